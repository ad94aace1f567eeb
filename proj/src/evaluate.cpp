#include "pgc/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>

#include "pgc/error.hpp"

namespace pgc::eval {
namespace {

using corpus::AnswerClass;
using corpus::DialogueExample;

struct Accumulator {
  double em = 0.0;
  double f1 = 0.0;
  std::size_t n = 0;

  void add(const Score& s) {
    em += s.em;
    f1 += s.f1;
    ++n;
  }
  std::optional<double> em_pct() const { return n == 0 ? std::nullopt : std::optional(100.0 * em / static_cast<double>(n)); }
  std::optional<double> f1_pct() const { return n == 0 ? std::nullopt : std::optional(100.0 * f1 / static_cast<double>(n)); }
};

nlohmann::json rounded(const std::optional<double>& v) {
  if (!v) return nullptr;
  return std::round(*v * 10.0) / 10.0;
}

}  // namespace

EvalReport evaluate(std::span<const Prediction> predictions, std::span<const DialogueExample> examples,
                    const EvalOptions& options) {
  std::map<std::pair<std::string, int>, const DialogueExample*> index;
  for (const auto& e : examples) index[{e.story_id, e.turn.turn_id}] = &e;

  prompt::CategoryVocab categories = options.categories;
  if (categories.categories.empty() && !examples.empty()) {
    categories = prompt::build_category_vocab(examples, std::max<std::size_t>(options.top_k, 1));
  }

  Accumulator overall, generative, extractive;
  std::map<std::string, Accumulator> by_category;
  for (const auto& p : predictions) {
    auto it = index.find({p.story_id, p.turn_id});
    if (it == index.end()) {
      throw DataError("prediction for " + p.story_id + "/" + std::to_string(p.turn_id) + " has no matching example");
    }
    const DialogueExample& e = *it->second;
    const auto refs = e.references();
    const Score s = score_multi(p.text, refs, options.mode);
    overall.add(s);
    (e.answer_class == AnswerClass::Extractive ? extractive : generative).add(s);
    by_category[prompt::categorize(e.turn.question, categories)].add(s);
  }

  EvalReport r;
  r.o_em = overall.em_pct();
  r.o_f1 = overall.f1_pct();
  r.g_em = generative.em_pct();
  r.g_f1 = generative.f1_pct();
  r.e_em = extractive.em_pct();
  r.e_f1 = extractive.f1_pct();
  r.n_overall = overall.n;
  r.n_generative = generative.n;
  r.n_extractive = extractive.n;
  for (const auto& [cat, acc] : by_category) r.per_category.push_back({cat, *acc.f1_pct(), acc.n});
  std::stable_sort(r.per_category.begin(), r.per_category.end(),
                   [](const CategoryScore& a, const CategoryScore& b) { return a.count > b.count; });
  if (r.per_category.size() > options.top_k) r.per_category.resize(options.top_k);
  return r;
}

EvalReport raw_baseline(std::span<const DialogueExample> examples, const EvalOptions& options) {
  std::vector<Prediction> predictions;
  predictions.reserve(examples.size());
  for (const auto& e : examples) predictions.push_back({e.story_id, e.turn.turn_id, e.turn.rationale});
  return evaluate(predictions, examples, options);
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& c : r.per_category) {
    cats.push_back({{"category", c.category}, {"f1", std::round(c.f1 * 10.0) / 10.0}, {"count", c.count}});
  }
  return {{"o_em", rounded(r.o_em)},     {"o_f1", rounded(r.o_f1)},
          {"g_em", rounded(r.g_em)},     {"g_f1", rounded(r.g_f1)},
          {"e_em", rounded(r.e_em)},     {"e_f1", rounded(r.e_f1)},
          {"n_overall", r.n_overall},    {"n_generative", r.n_generative},
          {"n_extractive", r.n_extractive}, {"per_category", std::move(cats)}};
}

void write_category_csv(std::ostream& out, const EvalReport& r) {
  out << "category,f1,count\n";
  char buf[32];
  for (const auto& c : r.per_category) {
    std::snprintf(buf, sizeof buf, "%.1f", c.f1);
    out << c.category << ',' << buf << ',' << c.count << '\n';
  }
}

void write_predictions_jsonl(std::ostream& out, std::span<const Prediction> predictions) {
  for (const auto& p : predictions) {
    out << nlohmann::json{{"story_id", p.story_id}, {"turn_id", p.turn_id}, {"text", p.text}}.dump() << '\n';
  }
}

std::vector<Prediction> read_predictions_jsonl(std::istream& in) {
  std::vector<Prediction> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("story_id").get<std::string>(), j.at("turn_id").get<int>(), j.at("text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError("predictions line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace pgc::eval
