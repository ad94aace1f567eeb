#pragma once

// Overall / generative / extractive EM and F1, per-category breakdown and the
// rationale-as-answer baseline.

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pgc/corpus.hpp"
#include "pgc/metrics.hpp"
#include "pgc/prompt.hpp"

namespace pgc::eval {

struct Prediction {
  std::string story_id;
  int turn_id = 0;
  std::string text;
};

struct CategoryScore {
  std::string category;
  double f1 = 0.0;  // percent
  std::size_t count = 0;
};

/// Scores are percentages; a split with no examples has no score.
struct EvalReport {
  std::optional<double> o_em, o_f1, g_em, g_f1, e_em, e_f1;
  std::size_t n_overall = 0;
  std::size_t n_generative = 0;
  std::size_t n_extractive = 0;
  std::vector<CategoryScore> per_category;
};

struct EvalOptions {
  ReferenceMode mode = ReferenceMode::Single;
  std::size_t top_k = 10;
  /// Category vocabulary; built from the evaluated examples when empty.
  prompt::CategoryVocab categories;
};

/// Throws DataError when a prediction has no matching example.
EvalReport evaluate(std::span<const Prediction> predictions, std::span<const corpus::DialogueExample> examples,
                    const EvalOptions& options = {});

/// Every example answered with its own rationale.
EvalReport raw_baseline(std::span<const corpus::DialogueExample> examples, const EvalOptions& options = {});

/// Report as JSON with scores rounded to one decimal (null for empty splits).
nlohmann::json to_json(const EvalReport& report);
void write_category_csv(std::ostream& out, const EvalReport& report);

void write_predictions_jsonl(std::ostream& out, std::span<const Prediction> predictions);
std::vector<Prediction> read_predictions_jsonl(std::istream& in);

}  // namespace pgc::eval
