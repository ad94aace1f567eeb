#include "pgc/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "pgc/corpus.hpp"
#include "pgc/error.hpp"
#include "pgc/evaluate.hpp"
#include "pgc/prompt.hpp"

namespace pgc::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// One entry per config key: how to read it from JSON and write it back.
struct Field {
  std::function<void(RunConfig&, const json&)> read;
  std::function<json(const RunConfig&)> write;
};

template <class T, class Access>
Field field(Access access) {
  return Field{[access](RunConfig& c, const json& v) { access(c) = v.get<T>(); },
               [access](const RunConfig& c) { return json(access(const_cast<RunConfig&>(c))); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"subcommand", field<std::string>([](RunConfig& c) -> auto& { return c.subcommand; })},
      {"input", field<std::string>([](RunConfig& c) -> auto& { return c.input; })},
      {"output", field<std::string>([](RunConfig& c) -> auto& { return c.output; })},
      {"predictions", field<std::string>([](RunConfig& c) -> auto& { return c.predictions; })},
      {"checkpoint", field<std::string>([](RunConfig& c) -> auto& { return c.checkpoint; })},
      {"loss_csv", field<std::string>([](RunConfig& c) -> auto& { return c.loss_csv; })},
      {"category_csv", field<std::string>([](RunConfig& c) -> auto& { return c.category_csv; })},
      {"text", field<std::string>([](RunConfig& c) -> auto& { return c.text; })},
      {"n_enc_layers", field<int>([](RunConfig& c) -> auto& { return c.model.n_enc_layers; })},
      {"n_dec_layers", field<int>([](RunConfig& c) -> auto& { return c.model.n_dec_layers; })},
      {"d_model", field<int>([](RunConfig& c) -> auto& { return c.model.d_model; })},
      {"n_heads", field<int>([](RunConfig& c) -> auto& { return c.model.n_heads; })},
      {"d_k", field<int>([](RunConfig& c) -> auto& { return c.model.d_k; })},
      {"d_ff", field<int>([](RunConfig& c) -> auto& { return c.model.d_ff; })},
      {"vocab_size", field<int>([](RunConfig& c) -> auto& { return c.model.vocab_size; })},
      {"max_source_len", field<int>([](RunConfig& c) -> auto& { return c.model.max_source_len; })},
      {"max_target_len", field<int>([](RunConfig& c) -> auto& { return c.model.max_target_len; })},
      {"learning_rate", field<double>([](RunConfig& c) -> auto& { return c.train.learning_rate; })},
      {"batch_size", field<int>([](RunConfig& c) -> auto& { return c.train.batch_size; })},
      {"epochs", field<int>([](RunConfig& c) -> auto& { return c.train.epochs; })},
      {"seed", field<std::uint64_t>([](RunConfig& c) -> auto& { return c.train.seed; })},
      {"clip_norm", field<double>([](RunConfig& c) -> auto& { return c.train.clip_norm; })},
      {"checkpoint_every", field<int>([](RunConfig& c) -> auto& { return c.train.checkpoint_every; })},
      {"max_steps", field<int>([](RunConfig& c) -> auto& { return c.train.max_steps; })},
      {"prompt_version",
       Field{[](RunConfig& c, const json& v) { c.train.prompt_version.version = prompt::version_from_number(v.get<int>()); },
             [](const RunConfig& c) { return json(prompt::version_number(c.train.prompt_version.version)); }}},
      {"history_depth", field<int>([](RunConfig& c) -> auto& { return c.train.prompt_version.history_depth; })},
      {"vocab_min_count", field<int>([](RunConfig& c) -> auto& { return c.vocab_min_count; })},
      {"category_k", field<int>([](RunConfig& c) -> auto& { return c.category_k; })},
      {"resume", field<bool>([](RunConfig& c) -> auto& { return c.resume; })},
      {"tighten", field<bool>([](RunConfig& c) -> auto& { return c.tighten; })},
      {"multi_ref", field<bool>([](RunConfig& c) -> auto& { return c.multi_ref; })},
      {"top_k_categories", field<int>([](RunConfig& c) -> auto& { return c.top_k_categories; })},
      {"task", field<std::string>([](RunConfig& c) -> auto& { return c.task; })},
      {"n_examples", field<int>([](RunConfig& c) -> auto& { return c.n_examples; })},
      {"min_len", field<int>([](RunConfig& c) -> auto& { return c.min_len; })},
      {"max_len", field<int>([](RunConfig& c) -> auto& { return c.max_len; })},
      {"word_pool", field<int>([](RunConfig& c) -> auto& { return c.word_pool; })},
      {"oov_rate", field<double>([](RunConfig& c) -> auto& { return c.oov_rate; })},
      {"layer", field<int>([](RunConfig& c) -> auto& { return c.layer; })},
      {"heads", field<std::vector<int>>([](RunConfig& c) -> auto& { return c.heads; })},
      {"example_index", field<int>([](RunConfig& c) -> auto& { return c.example_index; })},
      {"eps", field<double>([](RunConfig& c) -> auto& { return c.eps; })},
  };
  return table;
}

void write_sidecar(const fs::path& artifact, const RunConfig& config) {
  fs::path path = artifact;
  path += ".config.json";
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << to_json(config).dump(2) << '\n';
}

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  return out;
}

void require(const std::string& value, const char* flag, const std::string& subcommand) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required for '" + subcommand + "'");
}

void require_file(const std::string& path, const char* flag, const std::string& subcommand) {
  require(path, flag, subcommand);
  if (!fs::is_regular_file(path)) throw UsageError(std::string(flag) + " '" + path + "' is not a readable file");
}

void check_writable(const std::string& path, const char* flag) {
  if (path.empty()) return;
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) {
    throw UsageError(std::string(flag) + " directory '" + parent.string() + "' does not exist");
  }
}

std::vector<corpus::DialogueExample> load_corpus(const RunConfig& c) {
  auto examples = corpus::load_examples(c.input);
  if (c.tighten) {
    for (auto& e : examples) e = corpus::tighten_rationale(std::move(e));
  }
  return examples;
}

train::Task task_from_string(const std::string& s) {
  if (s == "copy") return train::Task::Copy;
  if (s == "gate") return train::Task::Gate;
  throw UsageError("--task must be 'copy' or 'gate', got '" + s + "'");
}

json stats_json(const corpus::CorpusStats& s) {
  return json{{"n_examples", s.n_examples},
              {"n_extractive", s.n_extractive},
              {"n_generative", s.n_generative},
              {"extractive_fraction", s.extractive_fraction}};
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_ingest(const RunConfig& c, std::ostream& out) {
  const auto examples = load_corpus(c);
  auto file = open_output(c.output);
  corpus::write_jsonl(file, examples);
  write_sidecar(c.output, c);
  out << examples.size() << " examples written to " << c.output << '\n';
}

void cmd_stats(const RunConfig& c, std::ostream& out) {
  const auto stats = corpus::compute_stats(load_corpus(c));
  json j = stats_json(stats);
  out << j.dump(2) << '\n';
  if (!c.output.empty()) {
    j["config"] = to_json(c);
    open_output(c.output) << j.dump(2) << '\n';
  }
}

void cmd_prompts(const RunConfig& c, std::ostream& out) {
  const auto examples = load_corpus(c);
  const auto categories = prompt::build_category_vocab(examples, static_cast<std::size_t>(c.category_k));
  std::ofstream file;
  if (!c.output.empty()) file = open_output(c.output);
  std::ostream& sink = c.output.empty() ? out : file;
  for (const auto& e : examples) {
    const json line{{"story_id", e.story_id},
                    {"turn_id", e.turn.turn_id},
                    {"version", prompt::version_number(c.train.prompt_version.version)},
                    {"source_text", prompt::prompt_text(e, c.train.prompt_version, categories)},
                    {"target_text", e.turn.answer}};
    sink << line.dump() << '\n';
  }
  if (!c.output.empty()) write_sidecar(c.output, c);
}

void cmd_synthetic(const RunConfig& c, std::ostream& out) {
  train::SyntheticSpec spec;
  spec.task = task_from_string(c.task);
  spec.vocab_size = c.word_pool;
  spec.min_len = c.min_len;
  spec.max_len = c.max_len;
  spec.n_examples = c.n_examples;
  spec.seed = c.train.seed;
  spec.oov_rate = c.oov_rate;
  const auto examples = train::make_synthetic(spec);
  auto file = open_output(c.output);
  corpus::write_jsonl(file, examples);
  write_sidecar(c.output, c);
  out << examples.size() << " " << c.task << " examples written to " << c.output << '\n';
}

void cmd_train(RunConfig& c, std::ostream& out) {
  const auto examples = load_corpus(c);
  if (examples.empty()) throw DataError("'" + c.input + "' contains no examples");
  train::Checkpoint ckpt;
  ckpt.prompt_version = c.train.prompt_version;
  ckpt.categories = prompt::build_category_vocab(examples, static_cast<std::size_t>(c.category_k));
  ckpt.vocab = train::build_vocabulary(examples, c.train.prompt_version, ckpt.categories,
                                       static_cast<std::size_t>(c.model.vocab_size),
                                       static_cast<std::size_t>(c.vocab_min_count));
  // A small corpus may not fill the requested vocabulary.
  c.model.vocab_size = static_cast<int>(ckpt.vocab.size());
  c.model.validate();
  ckpt.model = c.model;
  ckpt.run_config = to_json(c);

  if (c.resume && fs::exists(c.checkpoint)) {
    train::Checkpoint prior = train::checkpoint_load(c.checkpoint, c.model);
    if (!(prior.vocab == ckpt.vocab) || prior.categories.categories != ckpt.categories.categories) {
      throw DataError("checkpoint '" + c.checkpoint + "' was trained on a different vocabulary");
    }
    ckpt.params = std::move(prior.params);
    out << "resuming from step " << ckpt.params.step() << '\n';
  } else {
    ckpt.params = model::init_params(c.model, c.train.seed);
  }

  const auto prepared = train::prepare_examples(examples, ckpt.prompt_version, ckpt.categories, ckpt.vocab);
  const auto on_step = [&](const train::LossPoint& p, const tensor::ParamStore& params) {
    if (c.train.checkpoint_every > 0 && p.step % c.train.checkpoint_every == 0) {
      train::Checkpoint snapshot = ckpt;
      snapshot.params = params;
      train::checkpoint_save(c.checkpoint, snapshot);
    }
  };
  const auto result = train::train_loop(prepared, ckpt.params, c.model, c.train, on_step);
  train::checkpoint_save(c.checkpoint, ckpt);

  if (!c.loss_csv.empty()) {
    auto file = open_output(c.loss_csv);
    train::write_loss_csv(file, result.curve);
    write_sidecar(c.loss_csv, c);
  }
  char buf[64];
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%.6f", result.epoch_loss[e]);
    out << "epoch_loss[" << e << "] = " << buf << '\n';
  }
  out << "step " << ckpt.params.step() << ", checkpoint " << c.checkpoint << '\n';
}

void cmd_predict(RunConfig& c, std::ostream& out) {
  const train::Checkpoint ckpt = train::checkpoint_load(c.checkpoint);
  c.model = ckpt.model;
  c.train.prompt_version = ckpt.prompt_version;
  const auto examples = load_corpus(c);
  std::vector<eval::Prediction> predictions;
  predictions.reserve(examples.size());
  for (const auto& e : examples) {
    const auto p = prompt::build_prompt(e, ckpt.prompt_version, ckpt.categories, ckpt.vocab);
    predictions.push_back({e.story_id, e.turn.turn_id, train::predict_text(p, ckpt.params, ckpt.model, ckpt.vocab)});
  }
  auto file = open_output(c.output);
  eval::write_predictions_jsonl(file, predictions);
  write_sidecar(c.output, c);
  out << predictions.size() << " predictions written to " << c.output << '\n';
}

void emit_report(const RunConfig& c, const eval::EvalReport& report, std::ostream& out) {
  json j = eval::to_json(report);
  out << j.dump(2) << '\n';
  if (!c.output.empty()) {
    j["config"] = to_json(c);
    open_output(c.output) << j.dump(2) << '\n';
  }
  if (!c.category_csv.empty()) {
    auto file = open_output(c.category_csv);
    eval::write_category_csv(file, report);
    write_sidecar(c.category_csv, c);
  }
}

eval::EvalOptions eval_options(const RunConfig& c) {
  eval::EvalOptions o;
  o.mode = c.multi_ref ? eval::ReferenceMode::Max : eval::ReferenceMode::Single;
  o.top_k = static_cast<std::size_t>(c.top_k_categories);
  return o;
}

void cmd_eval(const RunConfig& c, std::ostream& out) {
  const auto examples = load_corpus(c);
  std::ifstream in(c.predictions);
  if (!in) throw DataError("cannot open '" + c.predictions + "'");
  const auto predictions = eval::read_predictions_jsonl(in);
  emit_report(c, eval::evaluate(predictions, examples, eval_options(c)), out);
}

void cmd_raw_baseline(const RunConfig& c, std::ostream& out) {
  emit_report(c, eval::raw_baseline(load_corpus(c), eval_options(c)), out);
}

int cmd_gradcheck(const RunConfig& c, std::ostream& out) {
  c.model.validate();
  const auto example = train::probe_example(c.model, 5, 3, c.train.seed);
  tensor::GradCheckOptions opts;
  opts.eps = c.eps;
  opts.seed = c.train.seed;
  const auto r = train::check_loss_gradients(c.model, example, c.train.seed, opts);
  const json j{{"max_rel_error", r.max_rel_error}, {"worst_param", r.worst_param}, {"worst_index", r.worst_index},
               {"analytic", r.analytic},         {"numeric", r.numeric},         {"n_checked", r.n_checked}};
  char buf[128];
  std::snprintf(buf, sizeof buf, "max relative error %.3e over %zu coordinates (worst: %s[%zu])\n", r.max_rel_error,
                r.n_checked, r.worst_param.c_str(), r.worst_index);
  out << buf;
  if (!c.output.empty()) {
    json full = j;
    full["config"] = to_json(c);
    open_output(c.output) << full.dump(2) << '\n';
  }
  if (r.max_rel_error >= 1e-4) throw NumericError("gradient check failed: relative error above 1e-4");
  return kExitOk;
}

void cmd_export_attention(RunConfig& c, std::ostream& out) {
  const train::Checkpoint ckpt = train::checkpoint_load(c.checkpoint);
  c.model = ckpt.model;
  prompt::PromptedExample p;
  if (!c.text.empty()) {
    p.source_tokens = prompt::tokenize(c.text);
    for (const auto& t : p.source_tokens) {
      if (ckpt.vocab.contains(t)) {
        p.source_ids.push_back(ckpt.vocab.id(t));
        continue;
      }
      const auto it = std::find(p.oov_tokens.begin(), p.oov_tokens.end(), t);
      p.source_ids.push_back(static_cast<int>(ckpt.vocab.size() + (it - p.oov_tokens.begin())));
      if (it == p.oov_tokens.end()) p.oov_tokens.push_back(t);
    }
  } else {
    require_file(c.input, "--input or --text", "export-attention");
    const auto examples = load_corpus(c);
    if (c.example_index < 0 || static_cast<std::size_t>(c.example_index) >= examples.size()) {
      throw UsageError("--example-index out of range (corpus has " + std::to_string(examples.size()) + " examples)");
    }
    p = prompt::build_prompt(examples[c.example_index], ckpt.prompt_version, ckpt.categories, ckpt.vocab);
  }
  if (p.source_ids.empty()) throw DataError("source text has no tokens");

  // Labels follow prepare_source: tail of the tokens, then EOS.
  const auto source = model::prepare_source(p.source_ids, c.model);
  std::vector<std::string> labels(p.source_tokens.end() - static_cast<std::ptrdiff_t>(source.size() - 1),
                                  p.source_tokens.end());
  labels.push_back(ckpt.vocab.token(prompt::Vocabulary::kEos));

  const int layer = c.layer < 0 ? c.model.n_enc_layers - 1 : c.layer;
  const auto paths = model::export_attention(ckpt.params, c.model, source, labels, layer, c.heads, c.output);
  write_sidecar(c.output, c);
  for (const auto& path : paths) out << path.string() << '\n';
}

}  // namespace

json to_json(const RunConfig& config) {
  json j = json::object();
  for (const auto& [key, f] : fields()) j[key] = f.write(config);
  return j;
}

RunConfig apply_json(RunConfig base, const json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  std::vector<std::string> unknown;
  for (const auto& [key, value] : j.items()) {
    const auto& table = fields();
    const auto it = std::find_if(table.begin(), table.end(), [&](const auto& kv) { return kv.first == key; });
    if (it == table.end()) {
      unknown.push_back(key);
      continue;
    }
    try {
      it->second.read(base, value);
    } catch (const json::exception&) {
      throw UsageError("config key '" + key + "' has the wrong type");
    }
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
    throw UsageError("unknown config keys: " + list);
  }
  return base;
}

RunConfig load_config(const fs::path& path) {
  const std::string text = corpus::read_file(path);
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return RunConfig{};
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("config '" + path.string() + "' is not valid JSON", e.byte);
  }
  return apply_json(RunConfig{}, j);
}

namespace {

// Every flag writes into `staged`; only flags actually given are copied onto
// the effective config, so file values survive unless overridden.
class FlagBinder {
 public:
  explicit FlagBinder(CLI::App& app) : app_(app) {}

  template <class Access>
  CLI::Option* option(const std::string& name, const std::string& help, Access access) {
    CLI::Option* opt = app_.add_option(name, access(staged_), help)->capture_default_str();
    copies_.emplace_back(opt, [access, this](RunConfig& dst) { access(dst) = access(staged_); });
    return opt;
  }

  template <class Access>
  CLI::Option* flag(const std::string& name, const std::string& help, Access access) {
    CLI::Option* opt = app_.add_flag(name, access(staged_), help);
    copies_.emplace_back(opt, [access, this](RunConfig& dst) { access(dst) = access(staged_); });
    return opt;
  }

  void apply(RunConfig& dst) const {
    for (const auto& [opt, copy] : copies_) {
      if (opt->count() > 0) copy(dst);
    }
  }

  RunConfig& staged() { return staged_; }

 private:
  CLI::App& app_;
  RunConfig staged_;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> copies_;
};

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prompted pointer-generator answer rewriting for conversational QA", "pgc"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  const std::vector<std::pair<std::string, std::string>> subcommands = {
      {"ingest", "convert CoQA JSON into the line-delimited example store"},
      {"stats", "print extractive/generative corpus statistics"},
      {"prompts", "emit prompted sources as line-delimited JSON"},
      {"synthetic", "generate a synthetic copy or gate task"},
      {"train", "train a model and write a checkpoint"},
      {"predict", "greedy-decode answers with a checkpoint"},
      {"eval", "score predictions (O/G/E EM and F1, per-category F1)"},
      {"raw-baseline", "score the rationale itself as the answer"},
      {"gradcheck", "finite-difference check of the full training loss"},
      {"export-attention", "write encoder self-attention heatmaps as CSV"},
  };
  for (const auto& [name, help] : subcommands) app.add_subcommand(name, help);

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file; flags override its values");

  FlagBinder b(app);
  b.option("--input,-i", "corpus: CoQA JSON or .jsonl example store", [](RunConfig& c) -> auto& { return c.input; });
  b.option("--output,-o", "output file (or file prefix for export-attention)",
           [](RunConfig& c) -> auto& { return c.output; });
  b.option("--predictions", "predictions JSONL for eval", [](RunConfig& c) -> auto& { return c.predictions; });
  b.option("--checkpoint", "checkpoint path", [](RunConfig& c) -> auto& { return c.checkpoint; });
  b.option("--loss-csv", "training loss curve CSV", [](RunConfig& c) -> auto& { return c.loss_csv; });
  b.option("--category-csv", "per-category F1 CSV", [](RunConfig& c) -> auto& { return c.category_csv; });
  b.option("--text", "source text for export-attention", [](RunConfig& c) -> auto& { return c.text; });
  b.option("--example-index", "corpus example for export-attention",
           [](RunConfig& c) -> auto& { return c.example_index; });

  b.option("--enc-layers", "encoder layers", [](RunConfig& c) -> auto& { return c.model.n_enc_layers; });
  b.option("--dec-layers", "decoder layers", [](RunConfig& c) -> auto& { return c.model.n_dec_layers; });
  b.option("--d-model", "model width", [](RunConfig& c) -> auto& { return c.model.d_model; });
  b.option("--n-heads", "attention heads", [](RunConfig& c) -> auto& { return c.model.n_heads; });
  b.option("--d-k", "copy-head key width (0: d_model / n_heads)", [](RunConfig& c) -> auto& { return c.model.d_k; });
  b.option("--d-ff", "feed-forward width (0: 4 * d_model)", [](RunConfig& c) -> auto& { return c.model.d_ff; });
  b.option("--vocab-size", "generator vocabulary size including specials",
           [](RunConfig& c) -> auto& { return c.model.vocab_size; });
  b.option("--max-source-len", "encoder length limit", [](RunConfig& c) -> auto& { return c.model.max_source_len; });
  b.option("--max-target-len", "decoder length limit", [](RunConfig& c) -> auto& { return c.model.max_target_len; });

  b.option("--lr", "Adam learning rate", [](RunConfig& c) -> auto& { return c.train.learning_rate; });
  b.option("--batch-size", "examples per optimizer step", [](RunConfig& c) -> auto& { return c.train.batch_size; });
  b.option("--epochs", "training epochs", [](RunConfig& c) -> auto& { return c.train.epochs; });
  CLI::Option* seed_opt =
      b.option("--seed", "random seed (fallback: PGC_SEED)", [](RunConfig& c) -> auto& { return c.train.seed; });
  b.option("--clip-norm", "global gradient-norm clip", [](RunConfig& c) -> auto& { return c.train.clip_norm; });
  b.option("--checkpoint-every", "save every N steps (0: only at the end)",
           [](RunConfig& c) -> auto& { return c.train.checkpoint_every; });
  b.option("--max-steps", "stop after N optimizer steps (0: all epochs)",
           [](RunConfig& c) -> auto& { return c.train.max_steps; });
  b.flag("--resume", "continue training from --checkpoint if it exists", [](RunConfig& c) -> auto& { return c.resume; });
  b.option("--vocab-min-count", "minimum token count for the vocabulary",
           [](RunConfig& c) -> auto& { return c.vocab_min_count; });
  b.option("--categories", "question-category vocabulary size", [](RunConfig& c) -> auto& { return c.category_k; });

  int version = 3;
  CLI::Option* version_opt =
      app.add_option("--version", version, "prompt template version")->check(CLI::IsMember({1, 2, 3}))->capture_default_str();
  b.option("--history-depth", "prior turns in the V3 prompt",
           [](RunConfig& c) -> auto& { return c.train.prompt_version.history_depth; });

  b.flag("--tighten", "shrink extractive rationales to the answer span", [](RunConfig& c) -> auto& { return c.tighten; });
  b.flag("--multi-ref", "score against all references, keeping the maximum",
         [](RunConfig& c) -> auto& { return c.multi_ref; });
  b.option("--top-k-categories", "categories listed in the report",
           [](RunConfig& c) -> auto& { return c.top_k_categories; });

  b.option("--task", "synthetic task: copy or gate", [](RunConfig& c) -> auto& { return c.task; })
      ->check(CLI::IsMember({"copy", "gate"}));
  b.option("--n-examples", "synthetic examples", [](RunConfig& c) -> auto& { return c.n_examples; });
  b.option("--min-len", "synthetic rationale min length", [](RunConfig& c) -> auto& { return c.min_len; });
  b.option("--max-len", "synthetic rationale max length", [](RunConfig& c) -> auto& { return c.max_len; });
  b.option("--word-pool", "distinct common words in synthetic rationales",
           [](RunConfig& c) -> auto& { return c.word_pool; });
  b.option("--oov-rate", "chance a synthetic word is a one-off rare word",
           [](RunConfig& c) -> auto& { return c.oov_rate; });

  b.option("--layer", "encoder layer for export-attention (-1: last)", [](RunConfig& c) -> auto& { return c.layer; });
  b.option("--heads", "heads for export-attention", [](RunConfig& c) -> auto& { return c.heads; });
  b.option("--eps", "finite-difference step for gradcheck", [](RunConfig& c) -> auto& { return c.eps; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << " (see --help)\n";
    return kExitUsage;
  }

  try {
    RunConfig c;
    bool file_has_seed = false;
    if (!config_path.empty()) {
      if (!fs::is_regular_file(config_path)) throw UsageError("--config '" + config_path + "' is not a readable file");
      c = load_config(config_path);
      const std::string text = corpus::read_file(config_path);
      file_has_seed = text.find("\"seed\"") != std::string::npos;
    }
    if (!file_has_seed && seed_opt->count() == 0) {
      if (const char* env = std::getenv("PGC_SEED")) {
        try {
          c.train.seed = std::stoull(env);
        } catch (const std::exception&) {
          throw UsageError(std::string("PGC_SEED must be an unsigned integer, got '") + env + "'");
        }
      }
    }
    b.apply(c);
    if (version_opt->count() > 0) c.train.prompt_version.version = prompt::version_from_number(version);
    c.subcommand = app.get_subcommands().front()->get_name();
    const std::string& sub = c.subcommand;

    check_writable(c.output, "--output");
    check_writable(c.loss_csv, "--loss-csv");
    check_writable(c.category_csv, "--category-csv");
    if (c.train.prompt_version.history_depth < 0) throw UsageError("--history-depth must be >= 0");
    if (c.category_k < 1) throw UsageError("--categories must be >= 1");
    if (c.top_k_categories < 1) throw UsageError("--top-k-categories must be >= 1");

    if (sub == "ingest") {
      require_file(c.input, "--input", sub);
      require(c.output, "--output", sub);
      cmd_ingest(c, out);
    } else if (sub == "stats") {
      require_file(c.input, "--input", sub);
      cmd_stats(c, out);
    } else if (sub == "prompts") {
      require_file(c.input, "--input", sub);
      cmd_prompts(c, out);
    } else if (sub == "synthetic") {
      require(c.output, "--output", sub);
      cmd_synthetic(c, out);
    } else if (sub == "train") {
      require_file(c.input, "--input", sub);
      require(c.checkpoint, "--checkpoint", sub);
      check_writable(c.checkpoint, "--checkpoint");
      c.train.validate();
      c.model.validate();
      cmd_train(c, out);
    } else if (sub == "predict") {
      require_file(c.input, "--input", sub);
      require_file(c.checkpoint, "--checkpoint", sub);
      require(c.output, "--output", sub);
      cmd_predict(c, out);
    } else if (sub == "eval") {
      require_file(c.input, "--input", sub);
      require_file(c.predictions, "--predictions", sub);
      cmd_eval(c, out);
    } else if (sub == "raw-baseline") {
      require_file(c.input, "--input", sub);
      cmd_raw_baseline(c, out);
    } else if (sub == "gradcheck") {
      return cmd_gradcheck(c, out);
    } else if (sub == "export-attention") {
      require_file(c.checkpoint, "--checkpoint", sub);
      require(c.output, "--output", sub);
      cmd_export_attention(c, out);
    }
    return kExitOk;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace pgc::cli
