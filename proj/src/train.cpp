#include "pgc/train.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "pgc/checkpoint.hpp"
#include "pgc/error.hpp"

namespace pgc::train {
namespace {

using prompt::Vocabulary;
using tensor::Graph;
using tensor::ParamStore;
using tensor::Var;

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::string random_rare_word(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> digit(0, 9);
  std::string w = "z";
  for (int i = 0; i < 8; ++i) w.push_back(static_cast<char>('0' + digit(rng)));
  return w;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be positive");
  if (batch_size < 1) throw UsageError("batch_size must be at least 1");
  if (epochs < 1) throw UsageError("epochs must be at least 1");
  if (clip_norm < 0.0) throw UsageError("clip_norm must be non-negative");
  if (checkpoint_every < 0 || max_steps < 0) throw UsageError("checkpoint_every and max_steps must be non-negative");
  if (prompt_version.history_depth < 0) throw UsageError("history_depth must be non-negative");
}

TeacherForcing teacher_forcing(const prompt::PromptedExample& example, const model::ModelConfig& config) {
  if (example.target_ids.empty()) {
    throw DataError("example " + example.origin.story_id + "/" + std::to_string(example.origin.turn.turn_id) +
                    " has an empty target");
  }
  TeacherForcing tf;
  tf.source = model::prepare_source(example.source_ids, config);
  const std::size_t width = model::extended_width(tf.source, config);

  // target_ids ends with EOS; keep at most max_target_len - 1 answer tokens.
  const std::size_t n_answer = std::min(example.target_ids.size() - 1, static_cast<std::size_t>(config.max_target_len - 1));
  for (std::size_t i = 0; i < n_answer; ++i) {
    const int id = example.target_ids[i];
    tf.gold.push_back(static_cast<std::size_t>(id) < width ? id : Vocabulary::kUnk);
  }
  tf.gold.push_back(Vocabulary::kEos);
  tf.decoder_input.push_back(Vocabulary::kBos);
  tf.decoder_input.insert(tf.decoder_input.end(), tf.gold.begin(), tf.gold.end() - 1);
  return tf;
}

Var teacher_forced_loss(Graph& g, const prompt::PromptedExample& example, const model::ModelConfig& config) {
  const TeacherForcing tf = teacher_forcing(example, config);
  const model::EncoderStack stack = model::encode(g, config, tf.source);
  Var states = model::decoder_states(g, config, stack, tf.decoder_input);
  const model::HeadOutput head =
      model::output_head(g, config, states, stack, tf.source, model::extended_width(tf.source, config));
  return tensor::nll(head.p_final, tf.gold);
}

TrainResult train_loop(std::span<const prompt::PromptedExample> examples, ParamStore& params,
                       const model::ModelConfig& config, const TrainConfig& tc, const StepCallback& on_step) {
  tc.validate();
  config.validate();
  if (examples.empty()) throw DataError("cannot train on an empty dataset");

  const std::size_t n = examples.size();
  const std::size_t batch = static_cast<std::size_t>(tc.batch_size);
  const std::int64_t batches_per_epoch = static_cast<std::int64_t>((n + batch - 1) / batch);
  const std::int64_t total_steps = batches_per_epoch * tc.epochs;
  const std::int64_t last_step = tc.max_steps > 0 ? std::min<std::int64_t>(total_steps, tc.max_steps) : total_steps;
  const tensor::AdamOptions adam{tc.learning_rate, 0.9, 0.999, 1e-8};

  TrainResult result;
  std::int64_t step = params.step();
  while (step < last_step) {
    const int epoch = static_cast<int>(step / batches_per_epoch);
    const auto order = epoch_order(n, tc.seed, epoch);
    double epoch_sum = 0.0;
    int epoch_batches = 0;
    for (std::int64_t b = step % batches_per_epoch; b < batches_per_epoch && step < last_step; ++b) {
      const std::size_t begin = static_cast<std::size_t>(b) * batch;
      const std::size_t end = std::min(n, begin + batch);
      const double inv = 1.0 / static_cast<double>(end - begin);
      params.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        Graph g(&params, true);
        Var loss = teacher_forced_loss(g, examples[order[i]], config);
        batch_loss += loss.value()[0];
        g.backward(tensor::scale(loss, inv));
      }
      tensor::clip_grad_norm(params, tc.clip_norm);
      tensor::adam_step(params, adam);
      step = params.step();
      const LossPoint point{epoch, step, batch_loss * inv};
      result.curve.push_back(point);
      epoch_sum += point.loss;
      ++epoch_batches;
      if (on_step) on_step(point, params);
    }
    result.epoch_loss.push_back(epoch_sum / std::max(1, epoch_batches));
  }
  return result;
}

void write_loss_csv(std::ostream& out, std::span<const LossPoint> curve) {
  out << "epoch,step,loss\n";
  char buf[64];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%.10g", p.loss);
    out << p.epoch << ',' << p.step << ',' << buf << '\n';
  }
}

std::vector<corpus::DialogueExample> make_synthetic(const SyntheticSpec& spec) {
  if (spec.min_len < 1 || spec.min_len > spec.max_len) {
    throw UsageError("synthetic lengths must satisfy 1 <= min_len <= max_len");
  }
  if (spec.vocab_size < 1 || spec.n_examples < 0) throw UsageError("synthetic vocab_size >= 1 and n_examples >= 0 required");
  if (spec.oov_rate < 0.0 || spec.oov_rate > 1.0) throw UsageError("oov_rate must lie in [0, 1]");

  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> length(spec.min_len, spec.max_len);
  std::uniform_int_distribution<int> word(0, spec.vocab_size - 1);
  std::bernoulli_distribution rare(spec.oov_rate);
  std::bernoulli_distribution coin(0.5);

  std::vector<corpus::DialogueExample> out;
  out.reserve(static_cast<std::size_t>(spec.n_examples));
  for (int i = 0; i < spec.n_examples; ++i) {
    const int len = length(rng);
    std::vector<std::string> words;
    for (int k = 0; k < len; ++k) words.push_back(rare(rng) ? random_rare_word(rng) : "w" + std::to_string(word(rng)));

    corpus::DialogueExample ex;
    ex.turn.turn_id = 1;
    ex.turn.span_start = 0;
    if (spec.task == Task::Copy) {
      ex.story_id = "copy-" + std::to_string(spec.seed) + "-" + std::to_string(i);
      ex.turn.question = std::string(kCopyQuestion);
      ex.turn.rationale = prompt::detokenize(words);
      ex.turn.answer = ex.turn.rationale;
    } else {
      ex.story_id = "gate-" + std::to_string(spec.seed) + "-" + std::to_string(i);
      const bool present = coin(rng);
      if (present) {
        std::uniform_int_distribution<int> pos(0, len - 1);
        words[static_cast<std::size_t>(pos(rng))] = std::string(kGateMarker);
      }
      ex.turn.question = std::string(kGateQuestion);
      ex.turn.rationale = prompt::detokenize(words);
      ex.turn.answer = present ? "yes" : "no";
    }
    ex.answer_class = corpus::classify_answer(ex.turn.answer, ex.turn.rationale);
    out.push_back(std::move(ex));
  }
  return out;
}

prompt::Vocabulary build_vocabulary(std::span<const corpus::DialogueExample> examples,
                                    const prompt::PromptVersion& version, const prompt::CategoryVocab& categories,
                                    std::size_t max_size, std::size_t min_count) {
  std::vector<std::vector<std::string>> lists;
  lists.reserve(examples.size() * 2);
  for (const auto& e : examples) {
    lists.push_back(prompt::tokenize(prompt::prompt_text(e, version, categories)));
    lists.push_back(prompt::tokenize(e.turn.answer));
  }
  return prompt::Vocabulary::build(lists, max_size, min_count);
}

std::vector<prompt::PromptedExample> prepare_examples(std::span<const corpus::DialogueExample> examples,
                                                      const prompt::PromptVersion& version,
                                                      const prompt::CategoryVocab& categories,
                                                      const prompt::Vocabulary& vocab) {
  std::vector<prompt::PromptedExample> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(prompt::build_prompt(e, version, categories, vocab));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void checkpoint_save(const std::filesystem::path& path, const Checkpoint& c) {
  const nlohmann::json metadata{{"model_config", model::to_json(c.model)},
                                {"config_hash", model::config_hash(c.model)},
                                {"vocab", c.vocab.tokens()},
                                {"categories", c.categories.categories},
                                {"prompt_version", prompt::version_number(c.prompt_version.version)},
                                {"history_depth", c.prompt_version.history_depth},
                                {"run_config", c.run_config}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  tensor::save_params(out, c.params, metadata);
}

Checkpoint checkpoint_load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  tensor::LoadedParams loaded = tensor::load_params(in);
  const nlohmann::json& m = loaded.metadata;
  Checkpoint c;
  try {
    c.model = model::model_config_from_json(m.at("model_config"));
    if (m.at("config_hash").get<std::uint64_t>() != model::config_hash(c.model)) {
      throw DataError("checkpoint config hash does not match its model config");
    }
    c.vocab = prompt::Vocabulary(m.at("vocab").get<std::vector<std::string>>());
    c.categories.categories = m.at("categories").get<std::vector<std::string>>();
    c.prompt_version.version = prompt::version_from_number(m.at("prompt_version").get<int>());
    c.prompt_version.history_depth = m.at("history_depth").get<int>();
    c.run_config = m.value("run_config", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint metadata is incomplete: " + std::string(e.what()));
  }
  c.params = std::move(loaded.store);

  // Every parameter the configuration expects must be present with its shape.
  const ParamStore reference = model::init_params(c.model, 0);
  for (const auto& [name, e] : reference.entries()) {
    if (!c.params.contains(name)) throw DataError("checkpoint lacks parameter '" + name + "'");
    if (c.params.value(name).shape() != e.value.shape()) throw DataError("checkpoint parameter '" + name + "' has the wrong shape");
  }
  if (c.params.entries().size() != reference.entries().size()) throw DataError("checkpoint has unexpected parameters");
  if (c.vocab.size() != static_cast<std::size_t>(c.model.vocab_size)) {
    throw DataError("checkpoint vocabulary size differs from vocab_size");
  }
  return c;
}

Checkpoint checkpoint_load(const std::filesystem::path& path, const model::ModelConfig& expected) {
  Checkpoint c = checkpoint_load(path);
  if (!(c.model == expected)) {
    throw DataError("checkpoint was written for model config " + model::to_json(c.model).dump() + ", expected " +
                    model::to_json(expected).dump());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Inference helpers

std::vector<int> predict_ids(const prompt::PromptedExample& example, const ParamStore& params,
                             const model::ModelConfig& config) {
  const auto source = model::prepare_source(example.source_ids, config);
  return model::greedy_decode(params, config, source, static_cast<std::size_t>(config.max_target_len));
}

std::string predict_text(const prompt::PromptedExample& example, const ParamStore& params,
                         const model::ModelConfig& config, const prompt::Vocabulary& vocab) {
  return prompt::decode_ids(predict_ids(example, params, config), vocab, example.oov_tokens);
}

TokenTally token_tally(std::span<const int> predicted, std::span<const int> gold_with_eos) {
  TokenTally t;
  for (std::size_t i = 0; i < gold_with_eos.size(); ++i) {
    const int p = i < predicted.size() ? predicted[i] : Vocabulary::kEos;
    t.correct += p == gold_with_eos[i] ? 1 : 0;
    ++t.total;
  }
  return t;
}

GateTrace gate_trace(const prompt::PromptedExample& example, const ParamStore& params,
                     const model::ModelConfig& config) {
  const TeacherForcing tf = teacher_forcing(example, config);
  Graph g(params);
  const model::EncoderStack stack = model::encode(g, config, tf.source);
  Var states = model::decoder_states(g, config, stack, tf.decoder_input);
  const model::HeadOutput head =
      model::output_head(g, config, states, stack, tf.source, model::extended_width(tf.source, config));
  GateTrace trace;
  trace.gold = tf.gold;
  for (std::size_t t = 0; t < tf.gold.size(); ++t) {
    trace.p_gen.push_back(head.p_gen.value()[t]);
    const bool present = std::find(tf.source.begin(), tf.source.end(), tf.gold[t]) != tf.source.end();
    trace.in_source.push_back(present ? 1 : 0);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Gradient probes

prompt::PromptedExample probe_example(const model::ModelConfig& config, int n_source, int n_target,
                                      std::uint64_t seed) {
  if (n_source < 2 || n_target < 1) throw UsageError("probe example needs >= 2 source and >= 1 target ids");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> word(Vocabulary::kNumSpecial, config.vocab_size - 1);
  prompt::PromptedExample ex;
  for (int i = 0; i + 1 < n_source; ++i) {
    ex.source_ids.push_back(word(rng));
    ex.source_tokens.push_back("s" + std::to_string(i));
  }
  ex.source_ids.push_back(config.vocab_size);  // first OOV slot
  ex.source_tokens.push_back("oov0");
  ex.oov_tokens.push_back("oov0");
  ex.target_ids.push_back(ex.source_ids.front());
  for (int i = 1; i < n_target; ++i) ex.target_ids.push_back(i == 1 ? config.vocab_size : word(rng));
  ex.target_ids.push_back(Vocabulary::kEos);
  ex.origin.story_id = "probe";
  ex.origin.turn.turn_id = 1;
  return ex;
}

tensor::GradCheckResult check_loss_gradients(const model::ModelConfig& config,
                                             const prompt::PromptedExample& example, std::uint64_t seed,
                                             const tensor::GradCheckOptions& options) {
  ParamStore params = model::init_params(config, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> noise(0.0, 0.5);
  for (auto& [name, e] : params.entries()) {
    if (name == "copy.a_raw" || name.rfind("gate.", 0) == 0) {
      for (double& x : e.value.data()) x = noise(rng);
    }
  }
  return tensor::grad_check(params, [&](Graph& g) { return teacher_forced_loss(g, example, config); }, options);
}

}  // namespace pgc::train
