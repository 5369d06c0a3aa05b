#pragma once

// Dense 64-bit tensors and a reverse-mode tape.
//
// A Tape records every operation executed on Vars created from it. Leaves are
// either constants (no gradient) or parameters, which alias a caller-owned
// Tensor whose grad buffer receives d(loss)/d(param) on backward(). Tapes are
// rebuilt per episode; nothing is cached between them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "peeler/error.hpp"

namespace peeler {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() : shape_{0} {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor filled(Shape shape, double v) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }

  // Row-major matrix from nested rows; rows must be equal length.
  static Tensor matrix(const std::vector<std::vector<double>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.front().size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool has_grad() const { return !grad_.empty(); }
  std::span<const double> grad() const { return grad_; }
  std::span<double> grad() { return grad_; }
  // Allocates the grad buffer if absent and sets it to zero.
  void zero_grad() { grad_.assign(data_.size(), 0.0); }
  void drop_grad() { grad_.clear(); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
};

enum class GradMode { kRecord, kNone };

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Adjoint of node `self`: reads grad(self) and adds into grads of its inputs.
  using Adjoint = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(GradMode mode = GradMode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == GradMode::kRecord; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, nullptr, false});
    return Var(this, nodes_.size() - 1);
  }

  // On a kNone tape a parameter is just a constant copy.
  Var parameter(Tensor& param) {
    const bool rec = recording();
    nodes_.push_back(Node{param, {}, {}, {}, rec ? &param : nullptr, rec});
    nodes_.back().value.drop_grad();
    return Var(this, nodes_.size() - 1);
  }

  Var record(Tensor value, std::vector<std::size_t> inputs, Adjoint adjoint) {
    bool needs = false;
    for (auto in : inputs) needs = needs || nodes_[in].requires_grad;
    needs = needs && recording();
    if (!needs) {
      inputs.clear();
      adjoint = nullptr;
    }
    nodes_.push_back(Node{std::move(value), {}, std::move(inputs), std::move(adjoint), nullptr, needs});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  std::span<double> grad(std::size_t id) { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Accumulates d(loss)/d(param) into every parameter leaf's grad buffer.
  void backward(const Var& loss) {
    if (!recording()) throw Error("backward() on a tape created without gradient recording");
    if (loss.tape() != this) throw Error("backward(): loss was not produced on this tape");
    if (numel(loss.shape()) != 1) {
      throw ShapeError("backward(): loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    const std::size_t top = loss.id();
    for (std::size_t i = 0; i <= top; ++i) {
      auto& n = nodes_[i];
      if (n.requires_grad) n.grad.assign(n.value.size(), 0.0);
    }
    if (!nodes_[top].requires_grad) return;
    nodes_[top].grad[0] = 1.0;
    for (std::size_t i = top + 1; i-- > 0;) {
      if (nodes_[i].adjoint) nodes_[i].adjoint(*this, i);
    }
    for (std::size_t i = 0; i <= top; ++i) {
      auto& n = nodes_[i];
      if (!n.param) continue;
      if (n.param->grad().size() != n.value.size()) n.param->zero_grad();
      auto dst = n.param->grad();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
    }
  }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    Adjoint adjoint;
    Tensor* param;
    bool requires_grad;
  };

  GradMode mode_;
  std::deque<Node> nodes_;  // stable addresses: Var::value() references stay valid as the tape grows
};

inline const Tensor& Var::value() const {
  if (!tape_) throw Error("use of an unbound Var");
  return tape_->value(id_);
}

namespace detail {

inline Tape& same_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const auto& v : vars) {
    if (!v.valid()) throw Error("use of an unbound Var");
    if (t && v.tape() != t) throw Error("operands live on different tapes");
    t = v.tape();
  }
  return *t;
}

inline void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(v.shape()));
  }
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Records y = f(x) elementwise with dy/dx = df(x, y).
template <typename F, typename DF>
Var unary(const Var& x, F f, DF df) {
  Tape& t = same_tape({x});
  const Tensor& xv = x.value();
  Tensor out = Tensor::zeros(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const auto xi = x.id();
  return t.record(std::move(out), {xi}, [xi, df](Tape& tp, std::size_t self) {
    const auto& xv = tp.value(xi);
    const auto& yv = tp.value(self);
    auto g = tp.grad(self);
    auto gx = tp.grad(xi);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape({a, b});
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const auto ai = a.id(), bi = b.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    for (auto id : {ai, bi}) {
      auto gi = tp.grad(id);
      if (!gi.empty())
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

inline Var subtract(const Var& a, const Var& b) {
  Tape& t = detail::same_tape({a, b});
  detail::require_same_shape(a, b, "subtract");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const auto ai = a.id(), bi = b.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    auto ga = tp.grad(ai);
    auto gb = tp.grad(bi);
    if (!ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (!gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

inline Var multiply(const Var& a, const Var& b) {
  Tape& t = detail::same_tape({a, b});
  detail::require_same_shape(a, b, "multiply");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ai = a.id(), bi = b.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto& av = tp.value(ai);
    const auto& bv = tp.value(bi);
    auto ga = tp.grad(ai);
    auto gb = tp.grad(bi);
    if (!ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    if (!gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
  });
}

inline Var scale(const Var& x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& x, double c) {
  return detail::unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var square(const Var& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Var exp(const Var& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(const Var& x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) throw NumericError("log: nonpositive input " + std::to_string(v));
  }
  return detail::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

// Subgradient at exactly 0 is 0.
inline Var relu(const Var& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double softplus_value(double u) {
  return u > 0.0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u));
}

inline double sigmoid_value(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

inline Var softplus(const Var& x) {
  return detail::unary(
      x, [](double v) { return softplus_value(v); }, [](double v, double) { return sigmoid_value(v); });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape({a, b});
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  const auto ai = a.id(), bi = b.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto& av = tp.value(ai);
    const auto& bv = tp.value(bi);
    auto ga = tp.grad(ai);
    auto gb = tp.grad(bi);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          if (!ga.empty()) ga[i * k + p] += gij * bv[p * n + j];
          if (!gb.empty()) gb[p * n + j] += gij * av[i * k + p];
        }
  });
}

// a[m,k] times b[n,k] transposed -> [m,n].
inline Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = detail::same_tape({a, b});
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw ShapeError("matmul_nt: widths disagree " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += av[i * k + p] * bv[j * k + p];
      out[i * n + j] = s;
    }
  const auto ai = a.id(), bi = b.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto& av = tp.value(ai);
    const auto& bv = tp.value(bi);
    auto ga = tp.grad(ai);
    auto gb = tp.grad(bi);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double gij = g[i * n + j];
        for (std::size_t p = 0; p < k; ++p) {
          if (!ga.empty()) ga[i * k + p] += gij * bv[j * k + p];
          if (!gb.empty()) gb[j * k + p] += gij * av[i * k + p];
        }
      }
  });
}

// Broadcasts row[d] over every row of x[batch, d].
inline Var add_row(const Var& x, const Var& row) {
  Tape& t = detail::same_tape({x, row});
  detail::require_rank(x, 2, "add_row");
  detail::require_rank(row, 1, "add_row");
  const std::size_t b = x.shape()[0], d = x.shape()[1];
  if (row.shape()[0] != d) {
    throw ShapeError("add_row: row width " + shape_str(row.shape()) + " vs " + shape_str(x.shape()));
  }
  Tensor out = x.value();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += row.value()[j];
  const auto xi = x.id(), ri = row.id();
  return t.record(std::move(out), {xi, ri}, [xi, ri, b, d](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    auto gx = tp.grad(xi);
    auto gr = tp.grad(ri);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        if (!gx.empty()) gx[i * d + j] += g[i * d + j];
        if (!gr.empty()) gr[j] += g[i * d + j];
      }
  });
}

inline Var affine(const Var& x, const Var& w, const Var& b) {
  detail::require_rank(x, 2, "affine");
  detail::require_rank(w, 2, "affine");
  detail::require_rank(b, 1, "affine");
  if (x.shape()[1] != w.shape()[0]) {
    throw ShapeError("affine: input width " + std::to_string(x.shape()[1]) + " does not match weight " +
                     shape_str(w.shape()));
  }
  if (b.shape()[0] != w.shape()[1]) {
    throw ShapeError("affine: bias " + shape_str(b.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  return add_row(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Reductions and indexing

inline Var sum(const Var& x) {
  Tape& t = detail::same_tape({x});
  const auto& xv = x.value();
  double s = 0.0;
  for (double v : xv.data()) s += v;
  const auto xi = x.id();
  return t.record(Tensor::scalar(s), {xi}, [xi](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (auto& v : tp.grad(xi)) v += g;
  });
}

inline Var mean(const Var& x) {
  const auto n = x.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

// x[batch, c] -> [batch], summing each row.
inline Var sum_rows(const Var& x) {
  Tape& t = detail::same_tape({x});
  detail::require_rank(x, 2, "sum_rows");
  const std::size_t b = x.shape()[0], c = x.shape()[1];
  Tensor out = Tensor::zeros({b});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += x.value()[i * c + j];
  const auto xi = x.id();
  return t.record(std::move(out), {xi}, [xi, b, c](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    auto gx = tp.grad(xi);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i];
  });
}

// Selects rows of x[r, d] in the given order (repeats allowed).
inline Var gather_rows(const Var& x, std::vector<std::size_t> index) {
  Tape& t = detail::same_tape({x});
  detail::require_rank(x, 2, "gather_rows");
  const std::size_t r = x.shape()[0], d = x.shape()[1];
  Tensor out = Tensor::zeros({index.size(), d});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) {
      throw ShapeError("gather_rows: row " + std::to_string(index[i]) + " out of range for " +
                       shape_str(x.shape()));
    }
    std::copy_n(x.value().data().begin() + index[i] * d, d, out.data().begin() + i * d);
  }
  const auto xi = x.id();
  return t.record(std::move(out), {xi}, [xi, d, index = std::move(index)](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    auto gx = tp.grad(xi);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gx[index[i] * d + j] += g[i * d + j];
  });
}

// out[i] = x[i, cols[i]].
inline Var pick(const Var& x, std::vector<std::size_t> cols) {
  Tape& t = detail::same_tape({x});
  detail::require_rank(x, 2, "pick");
  const std::size_t b = x.shape()[0], c = x.shape()[1];
  if (cols.size() != b) {
    throw ShapeError("pick: " + std::to_string(cols.size()) + " indices for " + std::to_string(b) + " rows");
  }
  Tensor out = Tensor::zeros({b});
  for (std::size_t i = 0; i < b; ++i) {
    if (cols[i] >= c) {
      throw ShapeError("pick: column " + std::to_string(cols[i]) + " out of range for width " + std::to_string(c));
    }
    out[i] = x.value()[i * c + cols[i]];
  }
  const auto xi = x.id();
  return t.record(std::move(out), {xi}, [xi, c, cols = std::move(cols)](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    auto gx = tp.grad(xi);
    for (std::size_t i = 0; i < cols.size(); ++i) gx[i * c + cols[i]] += g[i];
  });
}

// Per-group mean of rows: out[k] = mean{x[i] : labels[i] == k}.
inline Var segment_mean(const Var& x, std::vector<std::size_t> labels, std::size_t groups) {
  Tape& t = detail::same_tape({x});
  detail::require_rank(x, 2, "segment_mean");
  const std::size_t r = x.shape()[0], d = x.shape()[1];
  if (labels.size() != r) throw ShapeError("segment_mean: label count does not match rows");
  std::vector<double> count(groups, 0.0);
  for (auto l : labels) {
    if (l >= groups) throw ShapeError("segment_mean: label " + std::to_string(l) + " out of range");
    count[l] += 1.0;
  }
  for (std::size_t k = 0; k < groups; ++k) {
    if (count[k] == 0.0) throw DataError("segment_mean: class " + std::to_string(k) + " has no samples");
  }
  Tensor out = Tensor::zeros({groups, d});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < d; ++j) out[labels[i] * d + j] += x.value()[i * d + j];
  for (std::size_t k = 0; k < groups; ++k)
    for (std::size_t j = 0; j < d; ++j) out[k * d + j] /= count[k];
  const auto xi = x.id();
  return t.record(std::move(out), {xi},
                  [xi, d, labels = std::move(labels), count = std::move(count)](Tape& tp, std::size_t self) {
                    auto g = tp.grad(self);
                    auto gx = tp.grad(xi);
                    for (std::size_t i = 0; i < labels.size(); ++i)
                      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[labels[i] * d + j] / count[labels[i]];
                  });
}

// ---------------------------------------------------------------------------
// Softmax family

// Row-wise log-softmax with max subtraction.
inline Var log_softmax(const Var& z) {
  Tape& t = detail::same_tape({z});
  detail::require_rank(z, 2, "log_softmax");
  const std::size_t b = z.shape()[0], c = z.shape()[1];
  if (c == 0) throw ShapeError("log_softmax: zero classes");
  const auto& zv = z.value();
  Tensor out = Tensor::zeros({b, c});
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = zv.data().data() + i * c;
    const double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    const double lse = std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - m - lse;
  }
  const auto zi = z.id();
  return t.record(std::move(out), {zi}, [zi, b, c](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto& y = tp.value(self);
    auto gz = tp.grad(zi);
    for (std::size_t i = 0; i < b; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gz[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gs;
    }
  });
}

// Below this log-probability exp() underflows; p log p is taken as 0.
inline constexpr double kLogUnderflow = -745.0;

// out[i] = sum_k p_ik log p_ik computed from log-probabilities.
inline Var neg_entropy_rows(const Var& log_probs) {
  Tape& t = detail::same_tape({log_probs});
  detail::require_rank(log_probs, 2, "neg_entropy_rows");
  const std::size_t b = log_probs.shape()[0], c = log_probs.shape()[1];
  const auto& lp = log_probs.value();
  Tensor out = Tensor::zeros({b});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double l = lp[i * c + j];
      if (l >= kLogUnderflow) out[i] += std::exp(l) * l;
    }
  const auto li = log_probs.id();
  return t.record(std::move(out), {li}, [li, b, c](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto& lp = tp.value(li);
    auto gl = tp.grad(li);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double l = lp[i * c + j];
        if (l >= kLogUnderflow) gl[i * c + j] += g[i] * std::exp(l) * (l + 1.0);
      }
  });
}

// ---------------------------------------------------------------------------
// Pairwise distances

// d[q,k] = sum_m (f[q,m] - mu[k,m])^2.
inline Var squared_distance(const Var& f, const Var& mu) {
  Tape& t = detail::same_tape({f, mu});
  detail::require_rank(f, 2, "squared_distance");
  detail::require_rank(mu, 2, "squared_distance");
  const std::size_t q = f.shape()[0], n = mu.shape()[0], d = f.shape()[1];
  if (mu.shape()[1] != d) {
    throw ShapeError("squared_distance: widths disagree " + shape_str(f.shape()) + " vs " + shape_str(mu.shape()));
  }
  const auto& fv = f.value();
  const auto& mv = mu.value();
  Tensor out = Tensor::zeros({q, n});
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      double s = 0.0;
      for (std::size_t m = 0; m < d; ++m) {
        const double diff = fv[i * d + m] - mv[k * d + m];
        s += diff * diff;
      }
      out[i * n + k] = s;
    }
  const auto fi = f.id(), mi = mu.id();
  return t.record(std::move(out), {fi, mi}, [fi, mi, q, n, d](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto& fv = tp.value(fi);
    const auto& mv = tp.value(mi);
    auto gf = tp.grad(fi);
    auto gm = tp.grad(mi);
    for (std::size_t i = 0; i < q; ++i)
      for (std::size_t k = 0; k < n; ++k) {
        const double gik = g[i * n + k];
        for (std::size_t m = 0; m < d; ++m) {
          const double v = 2.0 * gik * (fv[i * d + m] - mv[k * d + m]);
          if (!gf.empty()) gf[i * d + m] += v;
          if (!gm.empty()) gm[k * d + m] -= v;
        }
      }
  });
}

// d[q,k] = sum_m A[k,m] (f[q,m] - mu[k,m])^2 with A > 0 (diagonal precision).
inline Var mahalanobis_distance(const Var& f, const Var& mu, const Var& precision) {
  Tape& t = detail::same_tape({f, mu, precision});
  detail::require_rank(f, 2, "mahalanobis_distance");
  detail::require_same_shape(mu, precision, "mahalanobis_distance");
  detail::require_rank(mu, 2, "mahalanobis_distance");
  const std::size_t q = f.shape()[0], n = mu.shape()[0], d = f.shape()[1];
  if (mu.shape()[1] != d) {
    throw ShapeError("mahalanobis_distance: widths disagree " + shape_str(f.shape()) + " vs " +
                     shape_str(mu.shape()));
  }
  const auto& fv = f.value();
  const auto& mv = mu.value();
  const auto& av = precision.value();
  for (double a : av.data()) {
    if (!(a > 0.0)) throw NumericError("mahalanobis_distance: nonpositive precision entry " + std::to_string(a));
  }
  Tensor out = Tensor::zeros({q, n});
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      double s = 0.0;
      for (std::size_t m = 0; m < d; ++m) {
        const double diff = fv[i * d + m] - mv[k * d + m];
        s += av[k * d + m] * diff * diff;
      }
      out[i * n + k] = s;
    }
  const auto fi = f.id(), mi = mu.id(), ai = precision.id();
  return t.record(std::move(out), {fi, mi, ai}, [fi, mi, ai, q, n, d](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto& fv = tp.value(fi);
    const auto& mv = tp.value(mi);
    const auto& av = tp.value(ai);
    auto gf = tp.grad(fi);
    auto gm = tp.grad(mi);
    auto ga = tp.grad(ai);
    for (std::size_t i = 0; i < q; ++i)
      for (std::size_t k = 0; k < n; ++k) {
        const double gik = g[i * n + k];
        for (std::size_t m = 0; m < d; ++m) {
          const double diff = fv[i * d + m] - mv[k * d + m];
          const double v = 2.0 * gik * av[k * d + m] * diff;
          if (!gf.empty()) gf[i * d + m] += v;
          if (!gm.empty()) gm[k * d + m] -= v;
          if (!ga.empty()) ga[k * d + m] += gik * diff * diff;
        }
      }
  });
}

}  // namespace peeler
