#pragma once

// Binary parameter checkpoints.
//
// Layout: 8-byte magic "PGCCKPT\n", u32 format version, u64 header length,
// a JSON header {format_version, step, metadata, params: [{name, shape}]},
// then for every parameter in header order its values, first and second
// Adam moments as little-endian float64, row-major.

#include <iosfwd>

#include "json.hpp"
#include "pgc/tensor.hpp"

namespace pgc::tensor {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

void save_params(std::ostream& out, const ParamStore& store, const nlohmann::json& metadata);

struct LoadedParams {
  nlohmann::json metadata;
  ParamStore store;
};

/// Throws ParseError on truncated or foreign bytes and DataError on a
/// format-version mismatch.
LoadedParams load_params(std::istream& in);

}  // namespace pgc::tensor
