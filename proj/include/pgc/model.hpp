#pragma once

// Transformer encoder-decoder with a multi-view pointer-generator head.
//
// The copy head attends from the final decoder state to the outputs of every
// encoder layer, mixes the per-layer attention rows with softmax-normalised
// learnable weights, scatters the result onto the extended vocabulary and
// blends it with the generator distribution through a sigmoid gate.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pgc/tensor.hpp"

namespace pgc::model {

struct ModelConfig {
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_k = 0;   // copy-head key width; 0 means d_model / n_heads
  int d_ff = 0;  // 0 means 4 * d_model
  int vocab_size = 512;
  int max_source_len = 256;
  int max_target_len = 32;

  int key_dim() const { return d_k > 0 ? d_k : d_model / n_heads; }
  int ff_dim() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  /// Throws UsageError when a count is non-positive or heads do not divide d_model.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
/// FNV-1a over the canonical JSON form; stored in checkpoints.
std::uint64_t config_hash(const ModelConfig& config);

/// Fresh parameters for `config`, deterministic in `seed`.
tensor::ParamStore init_params(const ModelConfig& config, std::uint64_t seed);

/// Source sequence fed to the encoder: the last max_source_len - 1 ids,
/// followed by EOS.
std::vector<int> prepare_source(std::span<const int> source_ids, const ModelConfig& config);

/// Size of the extended vocabulary seen by a source sequence.
std::size_t extended_width(std::span<const int> source_ids, const ModelConfig& config);

struct EncoderStack {
  std::vector<tensor::Var> layers;       // one [source_len x d_model] output per encoder layer
  std::vector<std::uint8_t> key_valid;   // 0 at PAD positions
  std::vector<std::vector<tensor::NumArray>> self_attention;  // [layer][head]

  std::size_t source_len() const { return key_valid.size(); }
  tensor::Var last() const { return layers.back(); }
};

EncoderStack encode(tensor::Graph& g, const ModelConfig& config, std::span<const int> source_ids);

/// Final decoder states, one row per prefix position.
tensor::Var decoder_states(tensor::Graph& g, const ModelConfig& config, const EncoderStack& stack,
                           std::span<const int> prefix_ids);

struct CopyAttention {
  tensor::Var alpha;                  // [T x source_len]
  tensor::Var layer_weights;          // [1 x n_enc_layers], on the simplex
  std::vector<tensor::Var> per_layer; // masked attention rows per encoder layer
};

CopyAttention copy_attention(tensor::Graph& g, const ModelConfig& config, tensor::Var states,
                             const EncoderStack& stack);

tensor::Var scatter_copy(tensor::Var alpha, std::span<const int> source_ids, std::size_t width);
std::vector<double> scatter_copy(std::span<const double> alpha, std::span<const int> source_ids, std::size_t width);

/// sigmoid(w_c . c_t + w_s . s_t + b) with c_t the alpha-weighted sum of the
/// last encoder layer; one row per decoder position.
tensor::Var generation_gate(tensor::Graph& g, tensor::Var states, tensor::Var alpha, const EncoderStack& stack);

tensor::Var vocab_distribution(tensor::Graph& g, tensor::Var states);

tensor::Var mix(tensor::Var p_gen, tensor::Var p_vocab, tensor::Var p_copy);

struct HeadOutput {
  CopyAttention copy;
  tensor::Var p_copy;
  tensor::Var p_gen;
  tensor::Var p_vocab;
  tensor::Var p_final;
};

HeadOutput output_head(tensor::Graph& g, const ModelConfig& config, tensor::Var states, const EncoderStack& stack,
                       std::span<const int> source_ids, std::size_t width);

struct StepOutput {
  std::vector<double> alpha;
  double p_gen = 0.0;
  std::vector<double> p_vocab;
  std::vector<double> p_final;
  std::vector<double> layer_weights;
};

/// Distribution for the token following `prefix_ids` (which starts with BOS).
StepOutput decode_step(tensor::Graph& g, const ModelConfig& config, const EncoderStack& stack,
                       std::span<const int> source_ids, std::span<const int> prefix_ids);

/// Lowest id among the maxima.
int argmax(std::span<const double> p);

/// Repeated argmax decoding; the returned ids exclude BOS and the final EOS.
std::vector<int> greedy_decode(const tensor::ParamStore& params, const ModelConfig& config,
                               std::span<const int> source_ids, std::size_t max_len);

/// Encoder self-attention of one layer, one (source x source) matrix per head.
std::vector<tensor::NumArray> encoder_attention(const tensor::ParamStore& params, const ModelConfig& config,
                                                std::span<const int> source_ids, int layer,
                                                std::span<const int> heads);

/// CSV: header row of key tokens, then one row per query token.
void write_attention_csv(std::ostream& out, const tensor::NumArray& matrix, std::span<const std::string> labels);

/// Writes `<prefix>.layer<L>.head<H>.csv` for each head; returns the paths.
std::vector<std::filesystem::path> export_attention(const tensor::ParamStore& params, const ModelConfig& config,
                                                    std::span<const int> source_ids,
                                                    std::span<const std::string> labels, int layer,
                                                    std::span<const int> heads,
                                                    const std::filesystem::path& prefix);

}  // namespace pgc::model
