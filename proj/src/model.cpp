#include "pgc/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "pgc/error.hpp"
#include "pgc/prompt.hpp"

namespace pgc::model {
namespace {

using tensor::AttentionMask;
using tensor::Graph;
using tensor::NumArray;
using tensor::ParamStore;
using tensor::Var;
using Vocab = prompt::Vocabulary;

std::string layer_name(const char* stack, int i, const char* leaf) {
  return std::string(stack) + "." + std::to_string(i) + "." + leaf;
}

NumArray sinusoid_positions(std::size_t len, std::size_t d) {
  NumArray pe = NumArray::matrix(len, d);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe(pos, i) = std::sin(angle);
      if (i + 1 < d) pe(pos, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

/// Token embedding plus position; extended ids read the UNK row.
Var embed_tokens(Graph& g, const ModelConfig& config, std::span<const int> ids) {
  std::vector<int> rows(ids.begin(), ids.end());
  for (int& id : rows) {
    if (id < 0) throw DataError("negative token id " + std::to_string(id));
    if (id >= config.vocab_size) id = Vocab::kUnk;
  }
  Var tok = tensor::embedding(g.param("embed"), rows);
  return tensor::add(tok, g.constant(sinusoid_positions(rows.size(), static_cast<std::size_t>(config.d_model))));
}

Var multi_head(Graph& g, const ModelConfig& config, const std::string& prefix, Var queries, Var keys_values,
               const AttentionMask& mask, std::vector<NumArray>* probs) {
  Var q = tensor::matmul(queries, g.param(prefix + ".wq"));
  Var k = tensor::matmul(keys_values, g.param(prefix + ".wk"));
  Var v = tensor::matmul(keys_values, g.param(prefix + ".wv"));
  Var o = tensor::attention(q, k, v, static_cast<std::size_t>(config.n_heads), mask, probs);
  return tensor::matmul(o, g.param(prefix + ".wo"));
}

Var feed_forward(Graph& g, const std::string& prefix, Var x) {
  Var h = tensor::gelu(tensor::add_row(tensor::matmul(x, g.param(prefix + ".w1")), g.param(prefix + ".b1")));
  return tensor::add_row(tensor::matmul(h, g.param(prefix + ".w2")), g.param(prefix + ".b2"));
}

Var residual_norm(Graph& g, const std::string& prefix, Var x, Var update) {
  return tensor::layer_norm(tensor::add(x, update), g.param(prefix + ".g"), g.param(prefix + ".b"));
}

void add_linear(ParamStore& store, std::mt19937_64& rng, const std::string& name, int fan_in, int fan_out) {
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  NumArray w = NumArray::matrix(static_cast<std::size_t>(fan_in), static_cast<std::size_t>(fan_out));
  for (double& x : w.data()) x = dist(rng);
  store.add(name, std::move(w));
}

void add_norm(ParamStore& store, const std::string& prefix, int d) {
  store.add(prefix + ".g", NumArray({static_cast<std::size_t>(d)}, 1.0));
  store.add(prefix + ".b", NumArray({static_cast<std::size_t>(d)}, 0.0));
}

void add_attention(ParamStore& store, std::mt19937_64& rng, const std::string& prefix, int d) {
  for (const char* w : {".wq", ".wk", ".wv", ".wo"}) add_linear(store, rng, prefix + w, d, d);
}

void add_ffn(ParamStore& store, std::mt19937_64& rng, const std::string& prefix, int d, int ff) {
  add_linear(store, rng, prefix + ".w1", d, ff);
  store.add(prefix + ".b1", NumArray({static_cast<std::size_t>(ff)}, 0.0));
  add_linear(store, rng, prefix + ".w2", ff, d);
  store.add(prefix + ".b2", NumArray({static_cast<std::size_t>(d)}, 0.0));
}

std::vector<double> last_row(const NumArray& a) {
  auto r = a.row(a.rows() - 1);
  return {r.begin(), r.end()};
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw UsageError(std::string(name) + " must be at least 1 (got " + std::to_string(v) + ")");
  };
  positive(n_enc_layers, "n_enc_layers");
  positive(n_dec_layers, "n_dec_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(key_dim(), "d_k");
  positive(ff_dim(), "d_ff");
  positive(max_source_len, "max_source_len");
  positive(max_target_len, "max_target_len");
  if (d_model % n_heads != 0) throw UsageError("d_model must be divisible by n_heads");
  if (vocab_size <= Vocab::kNumSpecial) throw UsageError("vocab_size must exceed the 4 special tokens");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_enc_layers", c.n_enc_layers}, {"n_dec_layers", c.n_dec_layers}, {"d_model", c.d_model},
          {"n_heads", c.n_heads},           {"d_k", c.d_k},                   {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size},     {"max_source_len", c.max_source_len},
          {"max_target_len", c.max_target_len}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  std::vector<std::string> unknown;
  for (const auto& [key, value] : j.items()) {
    int* field = key == "n_enc_layers"     ? &c.n_enc_layers
                 : key == "n_dec_layers"   ? &c.n_dec_layers
                 : key == "d_model"        ? &c.d_model
                 : key == "n_heads"        ? &c.n_heads
                 : key == "d_k"            ? &c.d_k
                 : key == "d_ff"           ? &c.d_ff
                 : key == "vocab_size"     ? &c.vocab_size
                 : key == "max_source_len" ? &c.max_source_len
                 : key == "max_target_len" ? &c.max_target_len
                                           : nullptr;
    if (field == nullptr) {
      unknown.push_back(key);
      continue;
    }
    if (!value.is_number_integer()) throw UsageError("model config field '" + key + "' must be an integer");
    *field = value.get<int>();
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
    throw UsageError("unknown model config keys: " + list);
  }
  return c;
}

std::uint64_t config_hash(const ModelConfig& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : to_json(config).dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

ParamStore init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ParamStore store;
  const int d = config.d_model;
  const int ff = config.ff_dim();
  const int dk = config.key_dim();

  {
    std::normal_distribution<double> dist(0.0, 1.0);
    NumArray embed = NumArray::matrix(static_cast<std::size_t>(config.vocab_size), static_cast<std::size_t>(d));
    for (double& x : embed.data()) x = dist(rng);
    store.add("embed", std::move(embed));
  }
  for (int i = 0; i < config.n_enc_layers; ++i) {
    add_attention(store, rng, layer_name("enc", i, "attn"), d);
    add_norm(store, layer_name("enc", i, "ln1"), d);
    add_ffn(store, rng, layer_name("enc", i, "ffn"), d, ff);
    add_norm(store, layer_name("enc", i, "ln2"), d);
  }
  for (int i = 0; i < config.n_dec_layers; ++i) {
    add_attention(store, rng, layer_name("dec", i, "self"), d);
    add_norm(store, layer_name("dec", i, "ln1"), d);
    add_attention(store, rng, layer_name("dec", i, "cross"), d);
    add_norm(store, layer_name("dec", i, "ln2"), d);
    add_ffn(store, rng, layer_name("dec", i, "ffn"), d, ff);
    add_norm(store, layer_name("dec", i, "ln3"), d);
  }
  add_linear(store, rng, "copy.w_s", d, dk);
  for (int i = 0; i < config.n_enc_layers; ++i) add_linear(store, rng, "copy.w_h." + std::to_string(i), d, dk);
  store.add("copy.a_raw", NumArray({static_cast<std::size_t>(config.n_enc_layers)}, 0.0));
  store.add("gate.w_c", NumArray({static_cast<std::size_t>(d), 1}, 0.0));
  store.add("gate.w_s", NumArray({static_cast<std::size_t>(d), 1}, 0.0));
  store.add("gate.b", NumArray({1}, 0.0));
  add_linear(store, rng, "out.w_v", d, config.vocab_size);
  store.add("out.b_v", NumArray({static_cast<std::size_t>(config.vocab_size)}, 0.0));
  return store;
}

std::vector<int> prepare_source(std::span<const int> source_ids, const ModelConfig& config) {
  const std::size_t keep = std::min(source_ids.size(), static_cast<std::size_t>(config.max_source_len - 1));
  std::vector<int> out(source_ids.end() - static_cast<std::ptrdiff_t>(keep), source_ids.end());
  out.push_back(Vocab::kEos);
  return out;
}

std::size_t extended_width(std::span<const int> source_ids, const ModelConfig& config) {
  int top = config.vocab_size - 1;
  for (int id : source_ids) top = std::max(top, id);
  return static_cast<std::size_t>(top) + 1;
}

EncoderStack encode(Graph& g, const ModelConfig& config, std::span<const int> source_ids) {
  if (source_ids.empty()) throw DataError("encode: empty source sequence");
  if (source_ids.size() > static_cast<std::size_t>(config.max_source_len)) {
    throw DataError("encode: source length " + std::to_string(source_ids.size()) + " exceeds max_source_len " +
                    std::to_string(config.max_source_len));
  }
  EncoderStack stack;
  stack.key_valid.reserve(source_ids.size());
  for (int id : source_ids) stack.key_valid.push_back(id == Vocab::kPad ? 0 : 1);
  if (std::none_of(stack.key_valid.begin(), stack.key_valid.end(), [](auto v) { return v != 0; })) {
    throw DataError("encode: source sequence is all padding");
  }
  const AttentionMask mask{stack.key_valid, false};

  Var x = embed_tokens(g, config, source_ids);
  for (int i = 0; i < config.n_enc_layers; ++i) {
    std::vector<NumArray> probs;
    Var a = multi_head(g, config, layer_name("enc", i, "attn"), x, x, mask, &probs);
    x = residual_norm(g, layer_name("enc", i, "ln1"), x, a);
    x = residual_norm(g, layer_name("enc", i, "ln2"), x, feed_forward(g, layer_name("enc", i, "ffn"), x));
    stack.layers.push_back(x);
    stack.self_attention.push_back(std::move(probs));
  }
  return stack;
}

Var decoder_states(Graph& g, const ModelConfig& config, const EncoderStack& stack, std::span<const int> prefix_ids) {
  if (prefix_ids.empty()) throw DataError("decoder: empty prefix");
  if (prefix_ids.size() > static_cast<std::size_t>(config.max_target_len)) {
    throw DataError("decoder: prefix length " + std::to_string(prefix_ids.size()) + " exceeds max_target_len " +
                    std::to_string(config.max_target_len));
  }
  const AttentionMask self_mask{{}, true};
  const AttentionMask cross_mask{stack.key_valid, false};
  Var y = embed_tokens(g, config, prefix_ids);
  for (int i = 0; i < config.n_dec_layers; ++i) {
    Var s = multi_head(g, config, layer_name("dec", i, "self"), y, y, self_mask, nullptr);
    y = residual_norm(g, layer_name("dec", i, "ln1"), y, s);
    Var c = multi_head(g, config, layer_name("dec", i, "cross"), y, stack.last(), cross_mask, nullptr);
    y = residual_norm(g, layer_name("dec", i, "ln2"), y, c);
    y = residual_norm(g, layer_name("dec", i, "ln3"), y, feed_forward(g, layer_name("dec", i, "ffn"), y));
  }
  return y;
}

CopyAttention copy_attention(Graph& g, const ModelConfig& config, Var states, const EncoderStack& stack) {
  if (stack.layers.empty()) throw DataError("copy_attention: empty encoder stack");
  const std::size_t n_rows = states.value().rows();
  const std::size_t len = stack.source_len();
  tensor::Mask mask(n_rows * len);
  for (std::size_t t = 0; t < n_rows; ++t) std::copy(stack.key_valid.begin(), stack.key_valid.end(), mask.begin() + t * len);

  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(config.key_dim()));
  Var query = tensor::matmul(states, g.param("copy.w_s"));
  CopyAttention out;
  out.layer_weights = tensor::softmax(g.param("copy.a_raw"));
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    Var keys = tensor::matmul(stack.layers[i], g.param("copy.w_h." + std::to_string(i)));
    Var scores = tensor::scale(tensor::matmul_transposed(query, keys), inv_scale);
    Var rows = tensor::softmax(scores, &mask);
    out.per_layer.push_back(rows);
    Var weighted = tensor::scale_by(rows, out.layer_weights, i);
    out.alpha = i == 0 ? weighted : tensor::add(out.alpha, weighted);
  }
  return out;
}

Var scatter_copy(Var alpha, std::span<const int> source_ids, std::size_t width) {
  return tensor::scatter_columns(alpha, source_ids, width);
}

std::vector<double> scatter_copy(std::span<const double> alpha, std::span<const int> source_ids, std::size_t width) {
  if (alpha.size() != source_ids.size()) throw DataError("scatter_copy: alpha and source lengths differ");
  std::vector<double> p(width, 0.0);
  for (std::size_t l = 0; l < alpha.size(); ++l) {
    if (source_ids[l] < 0 || static_cast<std::size_t>(source_ids[l]) >= width) {
      throw DataError("scatter_copy: source id outside the extended vocabulary");
    }
    p[static_cast<std::size_t>(source_ids[l])] += alpha[l];
  }
  return p;
}

Var generation_gate(Graph& g, Var states, Var alpha, const EncoderStack& stack) {
  Var context = tensor::matmul(alpha, stack.last());
  Var logit = tensor::add(tensor::matmul(context, g.param("gate.w_c")), tensor::matmul(states, g.param("gate.w_s")));
  return tensor::sigmoid(tensor::add_row(logit, g.param("gate.b")));
}

Var vocab_distribution(Graph& g, Var states) {
  return tensor::softmax(tensor::add_row(tensor::matmul(states, g.param("out.w_v")), g.param("out.b_v")));
}

Var mix(Var p_gen, Var p_vocab, Var p_copy) { return tensor::mix(p_gen, p_vocab, p_copy); }

HeadOutput output_head(Graph& g, const ModelConfig& config, Var states, const EncoderStack& stack,
                       std::span<const int> source_ids, std::size_t width) {
  if (source_ids.size() != stack.source_len()) throw DataError("output_head: source ids do not match the encoder stack");
  HeadOutput h;
  h.copy = copy_attention(g, config, states, stack);
  h.p_copy = scatter_copy(h.copy.alpha, source_ids, width);
  h.p_gen = generation_gate(g, states, h.copy.alpha, stack);
  h.p_vocab = vocab_distribution(g, states);
  h.p_final = model::mix(h.p_gen, h.p_vocab, h.p_copy);
  return h;
}

StepOutput decode_step(Graph& g, const ModelConfig& config, const EncoderStack& stack, std::span<const int> source_ids,
                       std::span<const int> prefix_ids) {
  Var states = decoder_states(g, config, stack, prefix_ids);
  HeadOutput h = output_head(g, config, states, stack, source_ids, extended_width(source_ids, config));
  StepOutput out;
  out.alpha = last_row(h.copy.alpha.value());
  out.p_gen = h.p_gen.value()[h.p_gen.value().size() - 1];
  out.p_vocab = last_row(h.p_vocab.value());
  out.p_final = last_row(h.p_final.value());
  const auto& w = h.copy.layer_weights.value().data();
  out.layer_weights.assign(w.begin(), w.end());
  return out;
}

int argmax(std::span<const double> p) {
  if (p.empty()) throw DataError("argmax of an empty distribution");
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

std::vector<int> greedy_decode(const ParamStore& params, const ModelConfig& config, std::span<const int> source_ids,
                               std::size_t max_len) {
  Graph g(params);
  const EncoderStack stack = encode(g, config, source_ids);
  std::vector<int> prefix{Vocab::kBos};
  std::vector<int> out;
  const std::size_t limit = std::min(max_len, static_cast<std::size_t>(config.max_target_len));
  while (out.size() < limit) {
    const StepOutput step = decode_step(g, config, stack, source_ids, prefix);
    const int next = argmax(step.p_final);
    if (next == Vocab::kEos) break;
    out.push_back(next);
    prefix.push_back(next);
  }
  return out;
}

std::vector<NumArray> encoder_attention(const ParamStore& params, const ModelConfig& config,
                                        std::span<const int> source_ids, int layer, std::span<const int> heads) {
  if (layer < 0 || layer >= config.n_enc_layers) {
    throw UsageError("layer " + std::to_string(layer) + " out of range [0, " + std::to_string(config.n_enc_layers) + ")");
  }
  Graph g(params);
  const EncoderStack stack = encode(g, config, source_ids);
  std::vector<NumArray> out;
  for (int h : heads) {
    if (h < 0 || h >= config.n_heads) {
      throw UsageError("head " + std::to_string(h) + " out of range [0, " + std::to_string(config.n_heads) + ")");
    }
    out.push_back(stack.self_attention[static_cast<std::size_t>(layer)][static_cast<std::size_t>(h)]);
  }
  return out;
}

namespace {
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}
}  // namespace

void write_attention_csv(std::ostream& out, const NumArray& matrix, std::span<const std::string> labels) {
  if (labels.size() != matrix.cols() || matrix.rows() != matrix.cols()) {
    throw DataError("attention export: label count does not match the matrix");
  }
  out << "query";
  for (const auto& l : labels) out << ',' << csv_field(l);
  out << '\n';
  char buf[32];
  for (std::size_t r = 0; r < matrix.rows(); ++r) {
    out << csv_field(labels[r]);
    for (std::size_t c = 0; c < matrix.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.6f", matrix(r, c));
      out << ',' << buf;
    }
    out << '\n';
  }
}

std::vector<std::filesystem::path> export_attention(const ParamStore& params, const ModelConfig& config,
                                                    std::span<const int> source_ids,
                                                    std::span<const std::string> labels, int layer,
                                                    std::span<const int> heads, const std::filesystem::path& prefix) {
  const auto matrices = encoder_attention(params, config, source_ids, layer, heads);
  std::vector<std::filesystem::path> paths;
  for (std::size_t i = 0; i < matrices.size(); ++i) {
    std::filesystem::path p = prefix;
    p += ".layer" + std::to_string(layer) + ".head" + std::to_string(heads[i]) + ".csv";
    std::ofstream f(p);
    if (!f) throw DataError("cannot write '" + p.string() + "'");
    write_attention_csv(f, matrices[i], labels);
    paths.push_back(p);
  }
  return paths;
}

}  // namespace pgc::model
