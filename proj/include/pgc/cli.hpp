#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "pgc/model.hpp"
#include "pgc/train.hpp"

namespace pgc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

struct RunConfig {
  std::string subcommand;

  std::string input;
  std::string output;
  std::string predictions;
  std::string checkpoint;
  std::string loss_csv;
  std::string category_csv;
  std::string text;

  model::ModelConfig model;
  train::TrainConfig train;
  int vocab_min_count = 1;
  int category_k = 10;
  bool resume = false;

  bool tighten = false;
  bool multi_ref = false;
  int top_k_categories = 10;

  std::string task = "copy";
  int n_examples = 100;
  int min_len = 4;
  int max_len = 12;
  int word_pool = 512;
  double oov_rate = 0.15;

  int layer = -1;  // -1 = last encoder layer
  std::vector<int> heads{0, 1};
  int example_index = 0;

  double eps = 1e-5;

  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const RunConfig& config);

/// Applies the keys of `j` on top of `base`. Unknown keys raise a UsageError
/// that lists all of them.
RunConfig apply_json(RunConfig base, const nlohmann::json& j);

/// JSON config file over defaults; an empty file yields the defaults.
RunConfig load_config(const std::filesystem::path& path);

/// Entry point: returns 0 on success, 1 on usage errors, 2 on data errors.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pgc::cli
