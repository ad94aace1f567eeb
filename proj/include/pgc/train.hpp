#pragma once

// Teacher-forced training, synthetic verification tasks and checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "json.hpp"
#include "pgc/corpus.hpp"
#include "pgc/model.hpp"
#include "pgc/prompt.hpp"
#include "pgc/tensor.hpp"

namespace pgc::train {

struct TrainConfig {
  double learning_rate = 1e-3;  // 2e-5 for the full-size model
  int batch_size = 8;
  int epochs = 10;
  std::uint64_t seed = 13;
  double clip_norm = 1.0;
  int checkpoint_every = 0;  // steps; 0 disables
  int max_steps = 0;         // 0 = run all epochs
  prompt::PromptVersion prompt_version;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Mean over target steps of -log P(y_t) with the gold prefix fed to the decoder.
tensor::Var teacher_forced_loss(tensor::Graph& g, const prompt::PromptedExample& example,
                                const model::ModelConfig& config);

/// Decoder input (BOS + gold prefix) and gold ids, truncated to max_target_len.
struct TeacherForcing {
  std::vector<int> source;  // prepared encoder input
  std::vector<int> decoder_input;
  std::vector<int> gold;
};
TeacherForcing teacher_forcing(const prompt::PromptedExample& example, const model::ModelConfig& config);

struct LossPoint {
  int epoch = 0;
  std::int64_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LossPoint> curve;      // one point per optimizer step
  std::vector<double> epoch_loss;    // mean batch loss per epoch run
};

using StepCallback = std::function<void(const LossPoint&, const tensor::ParamStore&)>;

/// Shuffled mini-batches per epoch, gradient accumulation, global-norm
/// clipping and Adam. Resumes from params.step(); deterministic in the seed.
TrainResult train_loop(std::span<const prompt::PromptedExample> examples, tensor::ParamStore& params,
                       const model::ModelConfig& config, const TrainConfig& train_config,
                       const StepCallback& on_step = {});

void write_loss_csv(std::ostream& out, std::span<const LossPoint> curve);

enum class Task { Copy, Gate };

struct SyntheticSpec {
  Task task = Task::Copy;
  int vocab_size = 512;  // distinct common words in rationales
  int min_len = 4;
  int max_len = 12;
  int n_examples = 100;
  std::uint64_t seed = 1;
  double oov_rate = 0.15;  // chance a rationale word is a one-off rare word
};

inline constexpr std::string_view kCopyQuestion = "what was stated ?";
inline constexpr std::string_view kGateQuestion = "did it appear ?";
inline constexpr std::string_view kGateMarker = "flag";

std::vector<corpus::DialogueExample> make_synthetic(const SyntheticSpec& spec);

/// Generator vocabulary from prompted sources and gold answers.
prompt::Vocabulary build_vocabulary(std::span<const corpus::DialogueExample> examples,
                                    const prompt::PromptVersion& version, const prompt::CategoryVocab& categories,
                                    std::size_t max_size, std::size_t min_count = 1);

std::vector<prompt::PromptedExample> prepare_examples(std::span<const corpus::DialogueExample> examples,
                                                      const prompt::PromptVersion& version,
                                                      const prompt::CategoryVocab& categories,
                                                      const prompt::Vocabulary& vocab);

struct Checkpoint {
  model::ModelConfig model;
  prompt::Vocabulary vocab;
  prompt::CategoryVocab categories;
  prompt::PromptVersion prompt_version;
  tensor::ParamStore params;
  nlohmann::json run_config = nlohmann::json::object();
};

void checkpoint_save(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint checkpoint_load(const std::filesystem::path& path);
/// Also rejects checkpoints written for a different model configuration.
Checkpoint checkpoint_load(const std::filesystem::path& path, const model::ModelConfig& expected);

/// Greedy answer for one prompted example, as surface text.
std::string predict_text(const prompt::PromptedExample& example, const tensor::ParamStore& params,
                         const model::ModelConfig& config, const prompt::Vocabulary& vocab);
std::vector<int> predict_ids(const prompt::PromptedExample& example, const tensor::ParamStore& params,
                             const model::ModelConfig& config);

/// Position-wise agreement over gold + EOS.
struct TokenTally {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};
TokenTally token_tally(std::span<const int> predicted, std::span<const int> gold_with_eos);

/// Teacher-forced gate values for every gold step.
struct GateTrace {
  std::vector<int> gold;
  std::vector<double> p_gen;
  std::vector<std::uint8_t> in_source;
};
GateTrace gate_trace(const prompt::PromptedExample& example, const tensor::ParamStore& params,
                     const model::ModelConfig& config);

/// Small fixed example for gradient checks: `n_source` source ids (the last
/// one outside the generator vocabulary) and `n_target` answer ids, the first
/// of which is copied from the source.
prompt::PromptedExample probe_example(const model::ModelConfig& config, int n_source, int n_target,
                                      std::uint64_t seed);

/// Finite-difference check of teacher_forced_loss on fresh parameters. The
/// zero-initialised copy and gate parameters are drawn at random first so
/// their gradients are exercised away from the symmetric point.
tensor::GradCheckResult check_loss_gradients(const model::ModelConfig& config,
                                             const prompt::PromptedExample& example, std::uint64_t seed,
                                             const tensor::GradCheckOptions& options = {});

}  // namespace pgc::train
