#pragma once

// Minimal dense linear algebra with a reverse-mode tape, parameter storage,
// Adam and a central finite-difference gradient checker. Double precision
// throughout; evaluation order is fixed so forward passes are bit-reproducible.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gnnreloc/error.hpp"

namespace gnnreloc {

using Rng = std::mt19937_64;

// Row-major dense matrix. Vectors are single-column matrices.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Matrix column(std::vector<double> v) {
    Matrix m;
    m.rows = v.size();
    m.cols = 1;
    m.data = std::move(v);
    return m;
  }
  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const Matrix&) const = default;

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }
};

inline Matrix uniform_matrix(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (auto& v : m.data) v = dist(rng);
  return m;
}

// A learnable block with its gradient and Adam moment buffers.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix adam_m;
  Matrix adam_v;
  std::int64_t step_count = 0;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)),
        value(std::move(v)),
        grad(value.rows, value.cols),
        adam_m(value.rows, value.cols),
        adam_v(value.rows, value.cols) {}

  void zero_grad() { grad.fill(0.0); }
  bool operator==(const Parameter&) const = default;
};

// Ordered collection of parameters. The order is the serialization order.
// Adding parameters invalidates references held by live tapes.
class ParameterSet {
 public:
  Parameter& add(std::string name, Matrix value) {
    require(find(name) == nullptr, "ParameterSet: duplicate parameter '" + name + "'");
    params_.emplace_back(std::move(name), std::move(value));
    return params_.back();
  }

  Parameter* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  const Parameter* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  Parameter& at(const std::string& name) {
    auto* p = find(name);
    require(p != nullptr, "ParameterSet: unknown parameter '" + name + "'");
    return *p;
  }
  const Parameter& at(const std::string& name) const {
    const auto* p = find(name);
    require(p != nullptr, "ParameterSet: unknown parameter '" + name + "'");
    return *p;
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }
  bool operator==(const ParameterSet&) const = default;

 private:
  std::vector<Parameter> params_;
};

struct Var {
  std::uint32_t id = 0;
};

// Single-threaded computation record. Nodes are appended in evaluation order,
// which is a topological order, so backward walks them in reverse once.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr, {}); }

  // Parameters are bound once per tape; gradients land in Parameter::grad
  // when backward() finishes.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return it->second;
    const Var v = push(p.value, true, &p, {});
    param_nodes_.emplace(&p, v);
    return v;
  }
  // Frozen binding: the value enters the tape as a constant.
  Var param(const Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return it->second;
    const Var v = push(p.value, false, nullptr, {});
    param_nodes_.emplace(&p, v);
    return v;
  }

  Var record(Matrix value, std::initializer_list<Var> inputs, Backward fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }
  Var record(Matrix value, std::span<const Var> inputs, Backward fn) {
    bool needs = false;
    for (const Var in : inputs) needs = needs || nodes_[in.id].needs_grad;
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : Backward{});
  }

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  Matrix& grad(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.size() != n.value.size()) n.grad = Matrix(n.value.rows, n.value.cols);
    return n.grad;
  }

  // Seeds d(root) = seed (root must be 1x1) and accumulates into parameters.
  void backward(Var root, double seed = 1.0) {
    require(value(root).size() == 1, "Tape::backward: root must be a scalar");
    if (!needs_grad(root)) return;
    grad(root)[0] += seed;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
    for (auto& n : nodes_) {
      if (n.param == nullptr || n.grad.size() == 0) continue;
      auto& g = n.param->grad.data;
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad.data[k];
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };

  Var push(Matrix value, bool needs, Parameter* p, Backward fn) {
    nodes_.push_back(Node{std::move(value), Matrix{}, needs, p, std::move(fn)});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, Var> param_nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable operations

inline Var matvec(Tape& t, Var W, Var x) {
  const Matrix& w = t.value(W);
  const Matrix& xv = t.value(x);
  if (xv.cols != 1 || w.cols != xv.rows)
    throw ContractViolation("matvec: shape mismatch " + std::to_string(w.rows) + "x" + std::to_string(w.cols) +
                            " * " + std::to_string(xv.rows) + "x" + std::to_string(xv.cols));
  Matrix y(w.rows, 1);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* row = &w.data[r * w.cols];
    double acc = 0.0;
    for (std::size_t c = 0; c < w.cols; ++c) acc += row[c] * xv.data[c];
    y.data[r] = acc;
  }
  return t.record(std::move(y), {W, x}, [W, x](Tape& tp, const Matrix& g) {
    const Matrix& w = tp.value(W);
    const Matrix& xv = tp.value(x);
    if (tp.needs_grad(W)) {
      Matrix& gw = tp.grad(W);
      for (std::size_t r = 0; r < w.rows; ++r) {
        const double gr = g.data[r];
        double* row = &gw.data[r * w.cols];
        for (std::size_t c = 0; c < w.cols; ++c) row[c] += gr * xv.data[c];
      }
    }
    if (tp.needs_grad(x)) {
      Matrix& gx = tp.grad(x);
      for (std::size_t r = 0; r < w.rows; ++r) {
        const double gr = g.data[r];
        const double* row = &w.data[r * w.cols];
        for (std::size_t c = 0; c < w.cols; ++c) gx.data[c] += row[c] * gr;
      }
    }
  });
}

inline Var add(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require(av.same_shape(bv), "add: shape mismatch");
  Matrix y = av;
  for (std::size_t k = 0; k < y.size(); ++k) y.data[k] += bv.data[k];
  return t.record(std::move(y), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    for (const Var v : {a, b}) {
      if (!tp.needs_grad(v)) continue;
      Matrix& gv = tp.grad(v);
      for (std::size_t k = 0; k < g.size(); ++k) gv.data[k] += g.data[k];
    }
  });
}

// W x + b
inline Var linear(Tape& t, Var x, Var W, Var b) {
  require(t.value(b).rows == t.value(W).rows && t.value(b).cols == 1, "linear: bias shape mismatch");
  return add(t, matvec(t, W, x), b);
}

inline Var scale(Tape& t, Var a, double s) {
  Matrix y = t.value(a);
  for (auto& v : y.data) v *= s;
  return t.record(std::move(y), {a}, [a, s](Tape& tp, const Matrix& g) {
    Matrix& ga = tp.grad(a);
    for (std::size_t k = 0; k < g.size(); ++k) ga.data[k] += s * g.data[k];
  });
}

// Subgradient at 0 is 0.
inline Var relu(Tape& t, Var x) {
  Matrix y = t.value(x);
  for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
  return t.record(std::move(y), {x}, [x](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(x);
    Matrix& gx = tp.grad(x);
    for (std::size_t k = 0; k < g.size(); ++k)
      if (xv.data[k] > 0.0) gx.data[k] += g.data[k];
  });
}

// Stacks column vectors.
inline Var concat(Tape& t, std::span<const Var> parts) {
  std::size_t n = 0;
  for (const Var p : parts) {
    require(t.value(p).cols == 1 || t.value(p).size() == 0, "concat: inputs must be column vectors");
    n += t.value(p).size();
  }
  Matrix y(n, 1);
  std::size_t off = 0;
  for (const Var p : parts) {
    const auto& d = t.value(p).data;
    std::copy(d.begin(), d.end(), y.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += d.size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(y), parts, [inputs](Tape& tp, const Matrix& g) {
    std::size_t off = 0;
    for (const Var p : inputs) {
      const std::size_t len = tp.value(p).size();
      if (tp.needs_grad(p) && len > 0) {
        Matrix& gp = tp.grad(p);
        for (std::size_t k = 0; k < len; ++k) gp.data[k] += g.data[off + k];
      }
      off += len;
    }
  });
}
inline Var concat(Tape& t, std::initializer_list<Var> parts) {
  return concat(t, std::span<const Var>(parts.begin(), parts.size()));
}

// Elementwise mean of equally shaped inputs, summed in the given order.
inline Var mean(Tape& t, std::span<const Var> parts) {
  require(!parts.empty(), "mean: no inputs");
  Matrix y(t.value(parts[0]).rows, t.value(parts[0]).cols);
  for (const Var p : parts) {
    const Matrix& pv = t.value(p);
    require(pv.same_shape(y), "mean: shape mismatch");
    for (std::size_t k = 0; k < y.size(); ++k) y.data[k] += pv.data[k];
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  for (auto& v : y.data) v *= inv;
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(y), parts, [inputs, inv](Tape& tp, const Matrix& g) {
    for (const Var p : inputs) {
      if (!tp.needs_grad(p)) continue;
      Matrix& gp = tp.grad(p);
      for (std::size_t k = 0; k < g.size(); ++k) gp.data[k] += inv * g.data[k];
    }
  });
}

// a b^T
inline Var outer(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require(av.cols == 1 && bv.cols == 1, "outer: inputs must be column vectors");
  Matrix y(av.rows, bv.rows);
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t c = 0; c < bv.rows; ++c) y(r, c) = av.data[r] * bv.data[c];
  return t.record(std::move(y), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    const Matrix& av = tp.value(a);
    const Matrix& bv = tp.value(b);
    if (tp.needs_grad(a)) {
      Matrix& ga = tp.grad(a);
      for (std::size_t r = 0; r < av.rows; ++r)
        for (std::size_t c = 0; c < bv.rows; ++c) ga.data[r] += g(r, c) * bv.data[c];
    }
    if (tp.needs_grad(b)) {
      Matrix& gb = tp.grad(b);
      for (std::size_t r = 0; r < av.rows; ++r)
        for (std::size_t c = 0; c < bv.rows; ++c) gb.data[c] += g(r, c) * av.data[r];
    }
  });
}

// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& m) {
  Matrix y(m.rows, m.cols);
  for (std::size_t r = 0; r < m.rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m.cols; ++c) mx = std::max(mx, m(r, c));
    double sum = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) {
      y(r, c) = std::exp(m(r, c) - mx);
      sum += y(r, c);
    }
    for (std::size_t c = 0; c < m.cols; ++c) y(r, c) /= sum;
  }
  return y;
}

inline Var softmax_rows(Tape& t, Var m) {
  const Var out{static_cast<std::uint32_t>(t.node_count())};
  return t.record(softmax_rows(t.value(m)), {m}, [m, out](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(out);
    Matrix& gm = tp.grad(m);
    for (std::size_t r = 0; r < y.rows; ++r) {
      double gy = 0.0;
      for (std::size_t c = 0; c < y.cols; ++c) gy += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols; ++c) gm(r, c) += y(r, c) * (g(r, c) - gy);
    }
  });
}

// ---------------------------------------------------------------------------
// Optimization

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with coupled L2 weight decay (decay * value added to the gradient
// before the moment update). Zeroes gradients afterwards.
inline void adam_step(ParameterSet& params, double lr, double weight_decay, const AdamConfig& cfg = {}) {
  for (auto& p : params) {
    ++p.step_count;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step_count));
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad.data[k] + weight_decay * p.value.data[k];
      p.adam_m.data[k] = cfg.beta1 * p.adam_m.data[k] + (1.0 - cfg.beta1) * g;
      p.adam_v.data[k] = cfg.beta2 * p.adam_v.data[k] + (1.0 - cfg.beta2) * g * g;
      const double mhat = p.adam_m.data[k] / bc1;
      const double vhat = p.adam_v.data[k] / bc2;
      p.value.data[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    p.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

struct BlockGradError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<BlockGradError> blocks;
};

// loss_fn(true) evaluates the loss and accumulates analytic gradients into
// params; loss_fn(false) only evaluates. Up to samples_per_block entries of
// each block are compared against (L(p+h) - L(p-h)) / 2h with relative error
// |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckReport finite_diff_check(const std::function<double(bool)>& loss_fn, ParameterSet& params,
                                         double h = 1e-5, std::size_t samples_per_block = 24,
                                         std::uint64_t seed = 0) {
  params.zero_grad();
  loss_fn(true);
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad);
  params.zero_grad();

  Rng rng(seed);
  GradCheckReport report;
  for (std::size_t b = 0; b < params.size(); ++b) {
    Parameter& p = params[b];
    std::vector<std::size_t> idx(p.value.size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    if (idx.size() > samples_per_block) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(samples_per_block);
      std::sort(idx.begin(), idx.end());
    }
    BlockGradError be{p.name, 0.0, idx.size()};
    for (const std::size_t k : idx) {
      const double orig = p.value.data[k];
      p.value.data[k] = orig + h;
      const double lp = loss_fn(false);
      p.value.data[k] = orig - h;
      const double lm = loss_fn(false);
      p.value.data[k] = orig;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic[b].data[k];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      be.max_rel_error = std::max(be.max_rel_error, std::abs(a - numeric) / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, be.max_rel_error);
    report.blocks.push_back(std::move(be));
  }
  params.zero_grad();
  return report;
}

}  // namespace gnnreloc
