#pragma once

// Dense double-precision arrays and a tape-based reverse-mode differentiator.
//
// Every value flowing through a Graph is viewed as a row-major matrix: rank-2
// arrays directly, rank-1 arrays of length n as a 1 x n row. Scalars are 1 x 1.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pgc::tensor {

class NumArray {
 public:
  NumArray() = default;
  explicit NumArray(std::vector<std::size_t> shape, double fill = 0.0);
  NumArray(std::vector<std::size_t> shape, std::vector<double> values);

  static NumArray matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static NumArray from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<double> data() { return values_; }
  std::span<const double> data() const { return values_; }
  std::span<double> row(std::size_t r) { return std::span<double>(values_).subspan(r * cols(), cols()); }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * cols(), cols());
  }

  void fill(double v);
  bool all_finite() const;
  bool same_shape(const NumArray& other) const { return rows() == other.rows() && cols() == other.cols(); }

  bool operator==(const NumArray&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

/// Element mask for softmax: nonzero = participates, zero = forced to 0.
using Mask = std::vector<std::uint8_t>;

/// Probability floor applied before taking logs in the loss.
inline constexpr double kProbabilityFloor = 1e-12;

// Value-level kernels.
NumArray matmul(const NumArray& a, const NumArray& b);
/// Row-wise softmax with max subtraction. Throws on a fully masked row.
NumArray softmax(const NumArray& x, const Mask* mask = nullptr);
double sigmoid(double x);
double cross_entropy(std::span<const double> p, std::size_t gold);

/// Learnable arrays with their gradients and Adam moments.
class ParamStore {
 public:
  struct Entry {
    NumArray value;
    NumArray grad;
    NumArray m;
    NumArray v;
  };

  void add(const std::string& name, NumArray init);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;
  NumArray& value(const std::string& name) { return entry(name).value; }
  const NumArray& value(const std::string& name) const { return entry(name).value; }
  NumArray& grad(const std::string& name) { return entry(name).grad; }
  const NumArray& grad(const std::string& name) const { return entry(name).grad; }

  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  void zero_grad();
  std::size_t parameter_count() const;

  std::int64_t step() const { return step_; }
  void set_step(std::int64_t step) { step_ = step; }

  bool operator==(const ParamStore&) const;

 private:
  std::map<std::string, Entry> entries_;
  std::int64_t step_ = 0;
};

class Graph;

/// Handle to a node of a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  std::size_t id() const { return id_; }
  Graph* graph() const { return graph_; }
  const NumArray& value() const;
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Records operations for one forward pass. With recording disabled no
/// backward closures are kept and the graph acts as a plain evaluator.
class Graph {
 public:
  explicit Graph(ParamStore* params = nullptr, bool record = true);
  /// Non-recording evaluator over read-only parameters.
  explicit Graph(const ParamStore& params) : Graph(const_cast<ParamStore*>(&params), false) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }
  ParamStore* params() const { return params_; }

  Var constant(NumArray value);
  /// Leaf bound to a named parameter; gradients land in the store.
  Var param(const std::string& name);

  const NumArray& value(Var v) const;
  /// Gradient buffer of a node (allocated on first use).
  NumArray& grad(Var v) { return grad_of(v.id()); }
  NumArray& grad_of(std::size_t id);

  /// Seeds d(loss)=1 and accumulates gradients into every reachable node.
  void backward(Var loss);

  Var push(const char* op, NumArray value, std::function<void()> backward_fn);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    NumArray owned;
    const NumArray* external = nullptr;
    NumArray* external_grad = nullptr;
    NumArray grad;
    bool has_grad = false;
    std::function<void()> backward;
  };

  ParamStore* params_;
  bool record_;
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_nodes_;
};

// Differentiable operations.
Var matmul(Var a, Var b);
/// a * transpose(b)
Var matmul_transposed(Var a, Var b);
Var add(Var a, Var b);
/// Adds a 1 x cols row to every row of x.
Var add_row(Var x, Var row);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var gelu(Var x);
Var sigmoid(Var x);
Var softmax(Var x, const Mask* mask = nullptr);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Gathers rows of `table` for each id.
Var embedding(Var table, std::span<const int> ids);
/// a * w[index] where w is a row vector.
Var scale_by(Var a, Var w, std::size_t index);
/// y[t, ids[l]] += a[t, l]; output has `width` columns.
Var scatter_columns(Var a, std::span<const int> ids, std::size_t width);
/// gate (T x 1) * pad(p_vocab) + (1 - gate) * p_copy over p_copy's width.
Var mix(Var gate, Var p_vocab, Var p_copy);
/// Mean over rows of -log(max(p[t, gold[t]], kProbabilityFloor)).
Var nll(Var probs, std::span<const int> gold);
Var sum(Var x);

struct AttentionMask {
  std::vector<std::uint8_t> key_valid;  // empty = all keys valid
  bool causal = false;
};

/// Multi-head scaled dot-product attention on pre-projected q, k, v.
/// When `probs_out` is given it receives one (queries x keys) matrix per head.
Var attention(Var q, Var k, Var v, std::size_t n_heads, const AttentionMask& mask,
              std::vector<NumArray>* probs_out = nullptr);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update of every parameter; increments the step counter.
void adam_step(ParamStore& store, const AdamOptions& options);

/// Rescales gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(ParamStore& store, double max_norm);

using LossBuilder = std::function<Var(Graph&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t max_coords_per_param = 12;
  std::uint64_t seed = 17;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t n_checked = 0;
};

/// Compares backward() against central finite differences on sampled
/// coordinates of every parameter. Leaves parameter values untouched.
GradCheckResult grad_check(ParamStore& store, const LossBuilder& loss, const GradCheckOptions& options = {});

}  // namespace pgc::tensor
