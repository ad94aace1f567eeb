#include "pgc/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <utility>

#include "pgc/error.hpp"

namespace pgc::tensor {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using HeadMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstHeadMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

MatMap as_mat(NumArray& a) { return MatMap(a.data().data(), a.rows(), a.cols()); }
ConstMatMap as_mat(const NumArray& a) { return ConstMatMap(a.data().data(), a.rows(), a.cols()); }

std::string shape_string(const NumArray& a) {
  return std::to_string(a.rows()) + "x" + std::to_string(a.cols());
}

void require_same_shape(const char* op, const NumArray& a, const NumArray& b) {
  if (!a.same_shape(b)) {
    throw NumericError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
}

Graph& graph_of(Var a) {
  if (!a.valid()) throw NumericError("operation on an unbound Var");
  return *a.graph();
}

Graph& graph_of(Var a, Var b) {
  if (a.graph() != b.graph()) throw NumericError("operands belong to different graphs");
  return graph_of(a);
}

bool allowed(const Mask* mask, std::size_t i) { return mask == nullptr || (*mask)[i] != 0; }

void softmax_rows_inplace(NumArray& x, const Mask* mask) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    double max_v = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (allowed(mask, r * cols + c)) max_v = std::max(max_v, x(r, c));
    }
    if (max_v == -std::numeric_limits<double>::infinity()) {
      throw NumericError("softmax: fully masked row " + std::to_string(r));
    }
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (allowed(mask, r * cols + c)) {
        x(r, c) = std::exp(x(r, c) - max_v);
        total += x(r, c);
      } else {
        x(r, c) = 0.0;
      }
    }
    for (std::size_t c = 0; c < cols; ++c) x(r, c) /= total;
  }
}

constexpr double kSigmoidClamp = 30.0;

double stable_sigmoid(double x) {
  x = std::clamp(x, -kSigmoidClamp, kSigmoidClamp);
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// NumArray

NumArray::NumArray(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  const std::size_t n = std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
  values_.assign(n, fill);
}

NumArray::NumArray(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  const std::size_t n = std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
  if (n != values_.size()) {
    throw NumericError("NumArray: shape holds " + std::to_string(n) + " values, got " +
                       std::to_string(values_.size()));
  }
}

NumArray NumArray::matrix(std::size_t rows, std::size_t cols, double fill) {
  return NumArray({rows, cols}, fill);
}

NumArray NumArray::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n_rows = rows.size();
  const std::size_t n_cols = n_rows == 0 ? 0 : rows.begin()->size();
  std::vector<double> values;
  values.reserve(n_rows * n_cols);
  for (const auto& r : rows) {
    if (r.size() != n_cols) throw NumericError("NumArray::from_rows: ragged rows");
    values.insert(values.end(), r.begin(), r.end());
  }
  return NumArray({n_rows, n_cols}, std::move(values));
}

std::size_t NumArray::rows() const {
  if (shape_.size() < 2) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
  return r;
}

std::size_t NumArray::cols() const { return shape_.empty() ? 1 : shape_.back(); }

void NumArray::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool NumArray::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Value kernels

NumArray matmul(const NumArray& a, const NumArray& b) {
  if (a.cols() != b.rows()) {
    throw NumericError("matmul: inner dimensions differ " + shape_string(a) + " * " + shape_string(b));
  }
  NumArray out = NumArray::matrix(a.rows(), b.cols());
  as_mat(out).noalias() = as_mat(a) * as_mat(b);
  return out;
}

NumArray softmax(const NumArray& x, const Mask* mask) {
  if (mask != nullptr && mask->size() != x.size()) throw NumericError("softmax: mask size differs from input");
  NumArray out = x;
  softmax_rows_inplace(out, mask);
  return out;
}

double sigmoid(double x) { return stable_sigmoid(x); }

double cross_entropy(std::span<const double> p, std::size_t gold) {
  if (gold >= p.size()) {
    throw NumericError("cross_entropy: gold id " + std::to_string(gold) + " outside distribution of size " +
                       std::to_string(p.size()));
  }
  return -std::log(std::max(p[gold], kProbabilityFloor));
}

// ---------------------------------------------------------------------------
// ParamStore

void ParamStore::add(const std::string& name, NumArray init) {
  if (contains(name)) throw NumericError("duplicate parameter '" + name + "'");
  Entry e;
  e.grad = NumArray(init.shape());
  e.m = NumArray(init.shape());
  e.v = NumArray(init.shape());
  e.value = std::move(init);
  entries_.emplace(name, std::move(e));
}

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw NumericError("unknown parameter '" + name + "'");
  return it->second;
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw NumericError("unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [name, e] : entries_) e.grad.fill(0.0);
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) n += e.value.size();
  return n;
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (step_ != other.step_ || entries_.size() != other.entries_.size()) return false;
  for (const auto& [name, e] : entries_) {
    auto it = other.entries_.find(name);
    if (it == other.entries_.end()) return false;
    const Entry& o = it->second;
    if (!(e.value == o.value && e.m == o.m && e.v == o.v)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Graph

const NumArray& Var::value() const { return graph_->value(*this); }

Graph::Graph(ParamStore* params, bool record) : params_(params), record_(record) { nodes_.reserve(256); }

Var Graph::constant(NumArray value) { return push("constant", std::move(value), nullptr); }

Var Graph::param(const std::string& name) {
  if (params_ == nullptr) throw NumericError("graph has no parameter store");
  auto it = param_nodes_.find(name);
  if (it != param_nodes_.end()) return Var(this, it->second);
  ParamStore::Entry& e = params_->entry(name);
  Node node;
  node.external = &e.value;
  node.external_grad = &e.grad;
  nodes_.push_back(std::move(node));
  const std::size_t id = nodes_.size() - 1;
  param_nodes_.emplace(name, id);
  return Var(this, id);
}

const NumArray& Graph::value(Var v) const {
  const Node& n = nodes_.at(v.id());
  return n.external != nullptr ? *n.external : n.owned;
}

NumArray& Graph::grad_of(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.external_grad != nullptr) {
    n.has_grad = true;
    return *n.external_grad;
  }
  if (!n.has_grad) {
    n.grad = NumArray(n.owned.shape());
    n.has_grad = true;
  }
  return n.grad;
}

Var Graph::push(const char* op, NumArray value, std::function<void()> backward_fn) {
  if (!value.all_finite()) throw NumericError(std::string(op) + ": produced a non-finite value");
  Node node;
  node.owned = std::move(value);
  if (record_) node.backward = std::move(backward_fn);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Graph::backward(Var loss) {
  if (!record_) throw NumericError("backward on a non-recording graph");
  if (loss.graph() != this) throw NumericError("backward: loss belongs to another graph");
  if (value(loss).size() != 1) throw NumericError("backward: loss must be a scalar");
  grad_of(loss.id())[0] += 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward();
  }
}

// ---------------------------------------------------------------------------
// Differentiable operations

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  NumArray out = matmul(a.value(), b.value());
  return g.push("matmul", std::move(out), [&g, a, b, id = g.size()] {
    const NumArray& dy = g.grad_of(id);
    as_mat(g.grad(a)).noalias() += as_mat(dy) * as_mat(b.value()).transpose();
    as_mat(g.grad(b)).noalias() += as_mat(a.value()).transpose() * as_mat(dy);
  });
}

Var matmul_transposed(Var a, Var b) {
  Graph& g = graph_of(a, b);
  if (a.value().cols() != b.value().cols()) {
    throw NumericError("matmul_transposed: column counts differ " + shape_string(a.value()) + " vs " +
                       shape_string(b.value()));
  }
  NumArray out = NumArray::matrix(a.value().rows(), b.value().rows());
  as_mat(out).noalias() = as_mat(a.value()) * as_mat(b.value()).transpose();
  return g.push("matmul_transposed", std::move(out), [&g, a, b, id = g.size()] {
    const NumArray& dy = g.grad_of(id);
    as_mat(g.grad(a)).noalias() += as_mat(dy) * as_mat(b.value());
    as_mat(g.grad(b)).noalias() += as_mat(dy).transpose() * as_mat(a.value());
  });
}

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape("add", a.value(), b.value());
  NumArray out = a.value();
  as_mat(out) += as_mat(b.value());
  return g.push("add", std::move(out), [&g, a, b, id = g.size()] {
    const NumArray& dy = g.grad_of(id);
    as_mat(g.grad(a)) += as_mat(dy);
    as_mat(g.grad(b)) += as_mat(dy);
  });
}

Var add_row(Var x, Var row) {
  Graph& g = graph_of(x, row);
  const NumArray& xv = x.value();
  const NumArray& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols()) {
    throw NumericError("add_row: expected 1x" + std::to_string(xv.cols()) + " row, got " + shape_string(rv));
  }
  NumArray out = xv;
  as_mat(out).rowwise() += as_mat(rv).row(0);
  return g.push("add_row", std::move(out), [&g, x, row, id = g.size()] {
    const NumArray& dy = g.grad_of(id);
    as_mat(g.grad(x)) += as_mat(dy);
    as_mat(g.grad(row)).row(0) += as_mat(dy).colwise().sum();
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape("mul", a.value(), b.value());
  NumArray out = a.value();
  as_mat(out).array() *= as_mat(b.value()).array();
  return g.push("mul", std::move(out), [&g, a, b, id = g.size()] {
    const NumArray& dy = g.grad_of(id);
    as_mat(g.grad(a)).array() += as_mat(dy).array() * as_mat(b.value()).array();
    as_mat(g.grad(b)).array() += as_mat(dy).array() * as_mat(a.value()).array();
  });
}

Var scale(Var a, double factor) {
  Graph& g = graph_of(a);
  NumArray out = a.value();
  as_mat(out) *= factor;
  return g.push("scale", std::move(out), [&g, a, factor, id = g.size()] {
    as_mat(g.grad(a)) += factor * as_mat(g.grad_of(id));
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var x) {
  Graph& g = graph_of(x);
  NumArray out = x.value();
  for (double& v : out.data()) v = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  return g.push("gelu", std::move(out), [&g, x, id = g.size()] {
    const NumArray& dy = g.grad_of(id);
    const NumArray& xv = x.value();
    NumArray& dx = g.grad(x);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      dx[i] += dy[i] * d;
    }
  });
}

Var sigmoid(Var x) {
  Graph& g = graph_of(x);
  NumArray out = x.value();
  for (double& v : out.data()) v = stable_sigmoid(v);
  return g.push("sigmoid", std::move(out), [&g, x, id = g.size()] {
    const NumArray& dy = g.grad_of(id);
    const NumArray& y = g.value(Var(&g, id));
    NumArray& dx = g.grad(x);
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] += dy[i] * y[i] * (1.0 - y[i]);
  });
}

Var softmax(Var x, const Mask* mask) {
  Graph& g = graph_of(x);
  NumArray out = softmax(x.value(), mask);
  return g.push("softmax", std::move(out), [&g, x, id = g.size()] {
    const NumArray& dy = g.grad_of(id);
    const NumArray& y = g.value(Var(&g, id));
    NumArray& dx = g.grad(x);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += dy(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) += y(r, c) * (dy(r, c) - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Graph& g = graph_of(x, gain);
  const NumArray& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  if (gain.value().size() != cols || bias.value().size() != cols) throw NumericError("layer_norm: gain/bias width");
  NumArray xhat = NumArray::matrix(rows, cols);
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xv(r, c);
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xv(r, c) - mean) * (xv(r, c) - mean);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) xhat(r, c) = (xv(r, c) - mean) * inv_std[r];
  }
  NumArray out = xhat;
  const NumArray& gv = gain.value();
  const NumArray& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = out(r, c) * gv[c] + bv[c];
  }
  return g.push("layer_norm", std::move(out),
                [&g, x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), id = g.size()] {
                  const NumArray& dy = g.grad_of(id);
                  const NumArray& gv = gain.value();
                  NumArray& dx = g.grad(x);
                  NumArray& dg = g.grad(gain);
                  NumArray& db = g.grad(bias);
                  const std::size_t rows = xhat.rows();
                  const std::size_t cols = xhat.cols();
                  const double n = static_cast<double>(cols);
                  std::vector<double> dxhat(cols);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double sum_d = 0.0;
                    double sum_dx = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                      dg[c] += dy(r, c) * xhat(r, c);
                      db[c] += dy(r, c);
                      dxhat[c] = dy(r, c) * gv[c];
                      sum_d += dxhat[c];
                      sum_dx += dxhat[c] * xhat(r, c);
                    }
                    for (std::size_t c = 0; c < cols; ++c) {
                      dx(r, c) += inv_std[r] / n * (n * dxhat[c] - sum_d - xhat(r, c) * sum_dx);
                    }
                  }
                });
}

Var embedding(Var table, std::span<const int> ids) {
  Graph& g = graph_of(table);
  const NumArray& tv = table.value();
  const std::size_t d = tv.cols();
  NumArray out = NumArray::matrix(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw NumericError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                         std::to_string(tv.rows()) + " rows");
    }
    std::copy_n(tv.row(ids[i]).begin(), d, out.row(i).begin());
  }
  return g.push("embedding", std::move(out),
                [&g, table, ids = std::vector<int>(ids.begin(), ids.end()), id = g.size()] {
                  const NumArray& dy = g.grad_of(id);
                  NumArray& dt = g.grad(table);
                  for (std::size_t i = 0; i < ids.size(); ++i) {
                    auto src = dy.row(i);
                    auto dst = dt.row(ids[i]);
                    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                  }
                });
}

Var scale_by(Var a, Var w, std::size_t index) {
  Graph& g = graph_of(a, w);
  if (index >= w.value().size()) throw NumericError("scale_by: index out of range");
  NumArray out = a.value();
  as_mat(out) *= w.value()[index];
  return g.push("scale_by", std::move(out), [&g, a, w, index, id = g.size()] {
    const NumArray& dy = g.grad_of(id);
    as_mat(g.grad(a)) += w.value()[index] * as_mat(dy);
    g.grad(w)[index] += (as_mat(dy).array() * as_mat(a.value()).array()).sum();
  });
}

Var scatter_columns(Var a, std::span<const int> ids, std::size_t width) {
  Graph& g = graph_of(a);
  const NumArray& av = a.value();
  if (av.cols() != ids.size()) throw NumericError("scatter_columns: id count differs from column count");
  for (int v : ids) {
    if (v < 0 || static_cast<std::size_t>(v) >= width) {
      throw NumericError("scatter_columns: id " + std::to_string(v) + " outside width " + std::to_string(width));
    }
  }
  NumArray out = NumArray::matrix(av.rows(), width);
  for (std::size_t t = 0; t < av.rows(); ++t) {
    for (std::size_t l = 0; l < ids.size(); ++l) out(t, ids[l]) += av(t, l);
  }
  return g.push("scatter_columns", std::move(out),
                [&g, a, ids = std::vector<int>(ids.begin(), ids.end()), id = g.size()] {
                  const NumArray& dy = g.grad_of(id);
                  NumArray& da = g.grad(a);
                  for (std::size_t t = 0; t < da.rows(); ++t) {
                    for (std::size_t l = 0; l < ids.size(); ++l) da(t, l) += dy(t, ids[l]);
                  }
                });
}

Var mix(Var gate, Var p_vocab, Var p_copy) {
  Graph& g = graph_of(gate, p_vocab);
  const NumArray& gv = gate.value();
  const NumArray& pv = p_vocab.value();
  const NumArray& pc = p_copy.value();
  const std::size_t rows = pc.rows();
  const std::size_t width = pc.cols();
  const std::size_t vocab = pv.cols();
  if (gv.rows() != rows || gv.cols() != 1 || pv.rows() != rows || vocab > width) {
    throw NumericError("mix: incompatible shapes gate " + shape_string(gv) + ", vocab " + shape_string(pv) +
                       ", copy " + shape_string(pc));
  }
  NumArray out = NumArray::matrix(rows, width);
  for (std::size_t t = 0; t < rows; ++t) {
    const double p = gv[t];
    for (std::size_t v = 0; v < width; ++v) {
      out(t, v) = (v < vocab ? p * pv(t, v) : 0.0) + (1.0 - p) * pc(t, v);
    }
  }
  return g.push("mix", std::move(out), [&g, gate, p_vocab, p_copy, id = g.size()] {
    const NumArray& dy = g.grad_of(id);
    const NumArray& gv = gate.value();
    const NumArray& pv = p_vocab.value();
    const NumArray& pc = p_copy.value();
    NumArray& dg = g.grad(gate);
    NumArray& dpv = g.grad(p_vocab);
    NumArray& dpc = g.grad(p_copy);
    const std::size_t vocab = pv.cols();
    for (std::size_t t = 0; t < pc.rows(); ++t) {
      const double p = gv[t];
      double d_gate = 0.0;
      for (std::size_t v = 0; v < pc.cols(); ++v) {
        const double vocab_p = v < vocab ? pv(t, v) : 0.0;
        d_gate += dy(t, v) * (vocab_p - pc(t, v));
        if (v < vocab) dpv(t, v) += p * dy(t, v);
        dpc(t, v) += (1.0 - p) * dy(t, v);
      }
      dg[t] += d_gate;
    }
  });
}

Var nll(Var probs, std::span<const int> gold) {
  Graph& g = graph_of(probs);
  const NumArray& p = probs.value();
  if (p.rows() != gold.size()) throw NumericError("nll: gold length differs from row count");
  double total = 0.0;
  for (std::size_t t = 0; t < gold.size(); ++t) {
    if (gold[t] < 0) throw NumericError("nll: negative gold id");
    total += cross_entropy(p.row(t), static_cast<std::size_t>(gold[t]));
  }
  const double n = static_cast<double>(gold.size());
  NumArray out({1, 1}, total / n);
  return g.push("nll", std::move(out), [&g, probs, gold = std::vector<int>(gold.begin(), gold.end()), n, id = g.size()] {
    const double dy = g.grad_of(id)[0];
    const NumArray& p = probs.value();
    NumArray& dp = g.grad(probs);
    for (std::size_t t = 0; t < gold.size(); ++t) {
      const double q = p(t, gold[t]);
      if (q >= kProbabilityFloor) dp(t, gold[t]) += -dy / (n * q);
    }
  });
}

Var sum(Var x) {
  Graph& g = graph_of(x);
  NumArray out({1, 1}, as_mat(x.value()).sum());
  return g.push("sum", std::move(out), [&g, x, id = g.size()] {
    const double dy = g.grad_of(id)[0];
    as_mat(g.grad(x)).array() += dy;
  });
}

Var attention(Var q, Var k, Var v, std::size_t n_heads, const AttentionMask& mask, std::vector<NumArray>* probs_out) {
  Graph& g = graph_of(q, k);
  const NumArray& qv = q.value();
  const NumArray& kv = k.value();
  const NumArray& vv = v.value();
  const std::size_t n_q = qv.rows();
  const std::size_t n_k = kv.rows();
  const std::size_t d = qv.cols();
  if (n_heads == 0 || d % n_heads != 0 || kv.cols() != d || vv.cols() != d || vv.rows() != n_k) {
    throw NumericError("attention: incompatible shapes q " + shape_string(qv) + ", k " + shape_string(kv) + ", v " +
                       shape_string(vv) + " for " + std::to_string(n_heads) + " heads");
  }
  if (!mask.key_valid.empty() && mask.key_valid.size() != n_k) throw NumericError("attention: key mask length");
  const std::size_t dh = d / n_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mask elem_mask(n_q * n_k, 1);
  for (std::size_t i = 0; i < n_q; ++i) {
    for (std::size_t j = 0; j < n_k; ++j) {
      const bool key_ok = mask.key_valid.empty() || mask.key_valid[j] != 0;
      const bool causal_ok = !mask.causal || j <= i;
      elem_mask[i * n_k + j] = key_ok && causal_ok ? 1 : 0;
    }
  }

  std::vector<NumArray> probs(n_heads);
  NumArray out = NumArray::matrix(n_q, d);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
    ConstHeadMap qh(qv.data().data() + h * dh, n_q, dh, stride);
    ConstHeadMap kh(kv.data().data() + h * dh, n_k, dh, stride);
    ConstHeadMap vh(vv.data().data() + h * dh, n_k, dh, stride);
    HeadMap oh(out.data().data() + h * dh, n_q, dh, stride);
    NumArray scores = NumArray::matrix(n_q, n_k);
    as_mat(scores).noalias() = inv_scale * (qh * kh.transpose());
    softmax_rows_inplace(scores, &elem_mask);
    oh.noalias() = as_mat(scores) * vh;
    probs[h] = std::move(scores);
  }
  if (probs_out != nullptr) *probs_out = probs;

  return g.push("attention", std::move(out),
                [&g, q, k, v, n_heads, dh, inv_scale, probs = std::move(probs), id = g.size()] {
                  const NumArray& dy = g.grad_of(id);
                  const NumArray& qv = q.value();
                  const NumArray& kv = k.value();
                  const NumArray& vv = v.value();
                  NumArray& dq = g.grad(q);
                  NumArray& dk = g.grad(k);
                  NumArray& dv = g.grad(v);
                  const std::size_t d = qv.cols();
                  const std::size_t n_q = qv.rows();
                  const std::size_t n_k = kv.rows();
                  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
                  for (std::size_t h = 0; h < n_heads; ++h) {
                    ConstHeadMap qh(qv.data().data() + h * dh, n_q, dh, stride);
                    ConstHeadMap kh(kv.data().data() + h * dh, n_k, dh, stride);
                    ConstHeadMap vh(vv.data().data() + h * dh, n_k, dh, stride);
                    ConstHeadMap doh(dy.data().data() + h * dh, n_q, dh, stride);
                    HeadMap dqh(dq.data().data() + h * dh, n_q, dh, stride);
                    HeadMap dkh(dk.data().data() + h * dh, n_k, dh, stride);
                    HeadMap dvh(dv.data().data() + h * dh, n_k, dh, stride);
                    const ConstMatMap p = as_mat(probs[h]);
                    dvh.noalias() += p.transpose() * doh;
                    RowMat dp = doh * vh.transpose();
                    const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
                    RowMat ds = p.array() * (dp.colwise() - row_dot).array();
                    ds *= inv_scale;
                    dqh.noalias() += ds * kh;
                    dkh.noalias() += ds.transpose() * qh;
                  }
                });
}

// ---------------------------------------------------------------------------
// Optimisation

void adam_step(ParamStore& store, const AdamOptions& o) {
  store.set_step(store.step() + 1);
  const double t = static_cast<double>(store.step());
  const double bc1 = 1.0 - std::pow(o.beta1, t);
  const double bc2 = 1.0 - std::pow(o.beta2, t);
  for (auto& [name, e] : store.entries()) {
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double gr = e.grad[i];
      e.m[i] = o.beta1 * e.m[i] + (1.0 - o.beta1) * gr;
      e.v[i] = o.beta2 * e.v[i] + (1.0 - o.beta2) * gr * gr;
      const double m_hat = e.m[i] / bc1;
      const double v_hat = e.v[i] / bc2;
      e.value[i] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
    }
  }
}

double clip_grad_norm(ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, e] : store.entries()) {
    for (double gr : e.grad.data()) sq += gr * gr;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& [name, e] : store.entries()) {
      for (double& gr : e.grad.data()) gr *= f;
    }
  }
  return norm;
}

GradCheckResult grad_check(ParamStore& store, const LossBuilder& loss, const GradCheckOptions& options) {
  store.zero_grad();
  {
    Graph g(&store, true);
    g.backward(loss(g));
  }
  auto evaluate = [&] {
    Graph g(&store, false);
    return loss(g).value()[0];
  };

  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  for (auto& [name, e] : store.entries()) {
    std::vector<std::size_t> coords(e.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
    }
    for (std::size_t i : coords) {
      const double saved = e.value[i];
      e.value[i] = saved + options.eps;
      const double plus = evaluate();
      e.value[i] = saved - options.eps;
      const double minus = evaluate();
      e.value[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double analytic = e.grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.n_checked;
      if (rel > result.max_rel_error || result.n_checked == 1) {
        result.max_rel_error = rel;
        result.worst_param = name;
        result.worst_index = i;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  store.zero_grad();
  return result;
}

}  // namespace pgc::tensor
