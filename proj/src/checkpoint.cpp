#include "pgc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

#include "pgc/error.hpp"

namespace pgc::tensor {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'P', 'G', 'C', 'C', 'K', 'P', 'T', '\n'};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& in, std::size_t& offset) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw ParseError("truncated checkpoint", offset);
  offset += sizeof v;
  return v;
}

void write_array(std::ostream& out, const NumArray& a) {
  out.write(reinterpret_cast<const char*>(a.data().data()), static_cast<std::streamsize>(a.size() * sizeof(double)));
}

void read_array(std::istream& in, NumArray& a, std::size_t& offset) {
  const auto bytes = static_cast<std::streamsize>(a.size() * sizeof(double));
  if (!in.read(reinterpret_cast<char*>(a.data().data()), bytes)) throw ParseError("truncated checkpoint payload", offset);
  offset += static_cast<std::size_t>(bytes);
}

}  // namespace

void save_params(std::ostream& out, const ParamStore& store, const nlohmann::json& metadata) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, e] : store.entries()) params.push_back({{"name", name}, {"shape", e.value.shape()}});
  const nlohmann::json header{{"format_version", kCheckpointFormatVersion},
                              {"step", store.step()},
                              {"metadata", metadata},
                              {"params", std::move(params)}};
  const std::string text = header.dump();
  out.write(kMagic, sizeof kMagic);
  write_pod(out, kCheckpointFormatVersion);
  write_pod(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, e] : store.entries()) {
    write_array(out, e.value);
    write_array(out, e.m);
    write_array(out, e.v);
  }
  if (!out) throw DataError("failed writing checkpoint");
}

LoadedParams load_params(std::istream& in) {
  std::size_t offset = 0;
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw ParseError("not a checkpoint file (bad magic)", 0);
  }
  offset += sizeof magic;
  const auto version = read_pod<std::uint32_t>(in, offset);
  if (version != kCheckpointFormatVersion) {
    throw DataError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kCheckpointFormatVersion) + ")");
  }
  const auto header_len = read_pod<std::uint64_t>(in, offset);
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) throw ParseError("truncated checkpoint header", offset);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("corrupt checkpoint header: ") + e.what(), offset + e.byte);
  }
  offset += header_len;

  LoadedParams loaded;
  loaded.metadata = header.at("metadata");
  loaded.store.set_step(header.at("step").get<std::int64_t>());
  for (const auto& p : header.at("params")) {
    NumArray value(p.at("shape").get<std::vector<std::size_t>>());
    const auto name = p.at("name").get<std::string>();
    loaded.store.add(name, value);
    auto& e = loaded.store.entry(name);
    read_array(in, e.value, offset);
    read_array(in, e.m, offset);
    read_array(in, e.v, offset);
  }
  return loaded;
}

}  // namespace pgc::tensor
