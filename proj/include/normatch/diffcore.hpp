#pragma once

// Reverse-mode automatic differentiation over dense float-64 tensors.
//
// A Tape records every operation applied to its tensors (define-by-run); the
// tape is rebuilt for every training step. Tensor is a cheap handle into the
// tape. Parameters live outside the tape as named Arrays and are bound to a
// tape once per step with Tape::parameter.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "normatch/errors.hpp"

namespace normatch {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

/// Plain row-major float-64 data with a shape. Not attached to any tape.
struct Array {
  Shape shape{1};
  std::vector<double> values{0.0};

  Array() = default;
  Array(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (numel(shape) != values.size())
      throw ShapeError("array: shape " + shape_str(shape) + " holds " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(values.size()));
  }

  static Array zeros(Shape s) {
    const auto n = numel(s);
    return Array(std::move(s), std::vector<double>(n, 0.0));
  }
  static Array filled(Shape s, double v) {
    const auto n = numel(s);
    return Array(std::move(s), std::vector<double>(n, v));
  }
  static Array scalar(double v) { return Array({1}, {v}); }

  std::size_t size() const { return values.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }
  double& operator()(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  bool operator==(const Array&) const = default;
};

class Tape;

/// Handle to a node on a Tape. Valid for the lifetime of the tape.
class Tensor {
 public:
  Tensor() = default;

  const Array& array() const;
  const Shape& shape() const { return array().shape; }
  std::span<const double> values() const { return array().values; }
  std::size_t rows() const { return array().rows(); }
  std::size_t cols() const { return array().cols(); }
  bool requires_grad() const;
  double item() const;

  std::size_t node_id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of a scalar loss keyed by parameter name.
using Gradients = std::map<std::string, Array>;

class Tape {
 public:
  /// Accumulates the output gradient of node `out` into its inputs' buffers.
  using BackwardRule = std::function<void(Tape&, std::size_t out)>;

  /// A no-grad tape binds parameters as constants and records no backward rules.
  explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Array value) { return push(std::move(value), false); }

  Tensor variable(Array value) { return push(std::move(value), record_grad_); }

  /// Binds a named parameter. Binding the same name twice returns the same node.
  Tensor parameter(const std::string& name, const Array& value) {
    if (auto it = params_.find(name); it != params_.end()) return Tensor(this, it->second);
    Tensor t = push(value, record_grad_);
    params_.emplace(name, t.id_);
    return t;
  }

  /// Same values as x, but gradients never flow back through the result.
  Tensor detach(const Tensor& x) {
    check_owner(x, "detach");
    Tensor t = push(x.array(), false);
    nodes_[t.id_].detached = true;
    return t;
  }

  bool is_detached(const Tensor& x) const { return nodes_.at(x.id_).detached; }

  /// Appends an op result; the backward rule is kept only if some input needs a gradient.
  Tensor record(Array value, std::initializer_list<Tensor> inputs, BackwardRule rule,
                std::string_view op) {
    bool needs = false;
    for (const auto& in : inputs) {
      check_owner(in, op);
      needs = needs || nodes_[in.id_].requires_grad;
    }
    Tensor t = push(std::move(value), needs);
    if (needs) nodes_[t.id_].backward = std::move(rule);
    return t;
  }

  /// Exact reverse-mode gradients of a scalar loss for every parameter bound on
  /// this tape; parameters the loss does not reach get zero arrays.
  Gradients backward(const Tensor& loss) {
    check_owner(loss, "backward");
    if (loss.array().size() != 1)
      throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    for (auto& n : nodes_) n.grad.clear();
    if (nodes_[loss.id_].requires_grad) {
      grad_buffer(loss.id_)[0] = 1.0;
      for (std::size_t id = loss.id_ + 1; id-- > 0;) {
        auto& n = nodes_[id];
        if (n.backward && !n.grad.empty()) n.backward(*this, id);
      }
    }
    Gradients out;
    for (const auto& [name, id] : params_) out.emplace(name, grad(Tensor(this, id)));
    return out;
  }

  /// Gradient of the last backward pass with respect to x (zeros if unreached).
  Array grad(const Tensor& x) const {
    const auto& n = nodes_.at(x.id_);
    if (n.grad.empty()) return Array::zeros(n.value.shape);
    return Array(n.value.shape, n.grad);
  }

  std::size_t size() const { return nodes_.size(); }

  // Accessors for backward rules.
  const Array& value(std::size_t id) const { return nodes_[id].value; }
  std::span<const double> out_grad(std::size_t id) const { return nodes_[id].grad; }
  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::vector<double>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

 private:
  friend class Tensor;

  struct Node {
    Array value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool detached = false;
    BackwardRule backward;
  };

  Tensor push(Array value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, false, {}});
    return Tensor(this, nodes_.size() - 1);
  }

  void check_owner(const Tensor& t, std::string_view op) const {
    if (t.tape_ != this)
      throw std::invalid_argument("op '" + std::string(op) + "': tensor belongs to another tape");
  }

  bool record_grad_;
  std::deque<Node> nodes_;
  std::map<std::string, std::size_t> params_;
};

inline const Array& Tensor::array() const { return tape_->nodes_[id_].value; }
inline bool Tensor::requires_grad() const { return tape_->nodes_[id_].requires_grad; }
inline double Tensor::item() const {
  if (array().size() != 1) throw ShapeError("item: tensor is not a scalar: " + shape_str(shape()));
  return array().values[0];
}

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajor>;
using ConstMatMap = Eigen::Map<const RowMajor>;

[[noreturn]] inline void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError("op '" + std::string(op) + "': shape mismatch " + shape_str(a) + " vs " +
                   shape_str(b));
}

inline void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_mismatch(op, a.shape(), b.shape());
}

inline void require_rank(std::string_view op, const Tensor& x, std::size_t rank) {
  if (x.shape().size() != rank)
    throw ShapeError("op '" + std::string(op) + "': expected rank " + std::to_string(rank) +
                     ", got shape " + shape_str(x.shape()));
}

template <class F, class D>
Tensor unary(const Tensor& x, std::string_view op, F&& f, D&& dfdx) {
  Array out = x.array();
  for (auto& v : out.values) v = f(v);
  const auto xi = x.node_id();
  return x.tape().record(
      std::move(out), {x},
      [xi, dfdx](Tape& t, std::size_t o) {
        if (!t.wants_grad(xi)) return;
        auto g = t.out_grad(o);
        const auto& xv = t.value(xi).values;
        const auto& yv = t.value(o).values;
        auto& gx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
      },
      op);
}

inline void accumulate(Tape& t, std::size_t target, std::span<const double> g, double sign = 1.0) {
  if (!t.wants_grad(target)) return;
  auto& buf = t.grad_buffer(target);
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += sign * g[i];
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same("add", a, b);
  Array out = a.array();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += bv[i];
  const auto ai = a.node_id(), bi = b.node_id();
  return a.tape().record(
      std::move(out), {a, b},
      [ai, bi](Tape& t, std::size_t o) {
        detail::accumulate(t, ai, t.out_grad(o));
        detail::accumulate(t, bi, t.out_grad(o));
      },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same("sub", a, b);
  Array out = a.array();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] -= bv[i];
  const auto ai = a.node_id(), bi = b.node_id();
  return a.tape().record(
      std::move(out), {a, b},
      [ai, bi](Tape& t, std::size_t o) {
        detail::accumulate(t, ai, t.out_grad(o));
        detail::accumulate(t, bi, t.out_grad(o), -1.0);
      },
      "sub");
}

/// Elementwise product of equally shaped tensors.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same("mul", a, b);
  Array out = a.array();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] *= bv[i];
  const auto ai = a.node_id(), bi = b.node_id();
  return a.tape().record(
      std::move(out), {a, b},
      [ai, bi](Tape& t, std::size_t o) {
        auto g = t.out_grad(o);
        const auto& av = t.value(ai).values;
        const auto& bv = t.value(bi).values;
        if (t.wants_grad(ai)) {
          auto& ga = t.grad_buffer(ai);
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.wants_grad(bi)) {
          auto& gb = t.grad_buffer(bi);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
        }
      },
      "mul");
}

/// [m, k] x [k, n] -> [m, n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) detail::shape_mismatch("matmul", a.shape(), b.shape());
  Array out = Array::zeros({m, n});
  detail::MatMap(out.values.data(), m, n).noalias() =
      detail::ConstMatMap(a.values().data(), m, k) * detail::ConstMatMap(b.values().data(), k, n);
  const auto ai = a.node_id(), bi = b.node_id();
  return a.tape().record(
      std::move(out), {a, b},
      [ai, bi, m, k, n](Tape& t, std::size_t o) {
        const detail::ConstMatMap g(t.out_grad(o).data(), m, n);
        if (t.wants_grad(ai))
          detail::MatMap(t.grad_buffer(ai).data(), m, k).noalias() +=
              g * detail::ConstMatMap(t.value(bi).values.data(), k, n).transpose();
        if (t.wants_grad(bi))
          detail::MatMap(t.grad_buffer(bi).data(), k, n).noalias() +=
              detail::ConstMatMap(t.value(ai).values.data(), m, k).transpose() * g;
      },
      "matmul");
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.values())
    if (!(v > 0.0)) throw DomainError("op 'log': non-positive input " + std::to_string(v));
  return detail::unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

namespace detail {

/// tanh through a single exp; absolute error stays at rounding level.
inline double fast_tanh(double v) {
  const double t = std::exp(-2.0 * std::abs(v));
  return std::copysign((1.0 - t) / (1.0 + t), v);
}

}  // namespace detail

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, "tanh", [](double v) { return detail::fast_tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor neg(const Tensor& x) {
  return detail::unary(
      x, "negate", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

/// Multiplies every entry by a fixed constant.
inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      x, "scale-by-constant", [c](double v) { return c * v; }, [c](double, double) { return c; });
}

/// Sum of all entries, shape [1].
inline Tensor sum(const Tensor& x) {
  const auto xv = x.values();
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  const auto xi = x.node_id();
  return x.tape().record(
      Array::scalar(s), {x},
      [xi](Tape& t, std::size_t o) {
        if (!t.wants_grad(xi)) return;
        const double g = t.out_grad(o)[0];
        for (auto& v : t.grad_buffer(xi)) v += g;
      },
      "sum");
}

/// Mean of all entries, shape [1].
inline Tensor mean(const Tensor& x) {
  const auto n = x.array().size();
  if (n == 0) throw ShapeError("op 'mean': empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

/// Multiplies every entry by a learnable scalar s of shape [1].
inline Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.array().size() != 1) detail::shape_mismatch("mul-scalar", x.shape(), s.shape());
  const double c = s.values()[0];
  Array out = x.array();
  for (auto& v : out.values) v *= c;
  const auto xi = x.node_id(), si = s.node_id();
  return x.tape().record(
      std::move(out), {x, s},
      [xi, si](Tape& t, std::size_t o) {
        auto g = t.out_grad(o);
        const auto& xv = t.value(xi).values;
        const double c = t.value(si).values[0];
        if (t.wants_grad(xi)) {
          auto& gx = t.grad_buffer(xi);
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * g[i];
        }
        if (t.wants_grad(si)) {
          double acc = 0.0;
          for (std::size_t i = 0; i < xv.size(); ++i) acc += g[i] * xv[i];
          t.grad_buffer(si)[0] += acc;
        }
      },
      "mul-scalar");
}

/// [b, n] + row vector [n] added to every row.
inline Tensor add_row(const Tensor& x, const Tensor& row) {
  detail::require_rank("broadcast-add-row", x, 2);
  if (row.array().size() != x.cols() || row.shape().size() != 1)
    detail::shape_mismatch("broadcast-add-row", x.shape(), row.shape());
  const std::size_t b = x.rows(), n = x.cols();
  Array out = x.array();
  const auto rv = row.values();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < n; ++j) out.values[i * n + j] += rv[j];
  const auto xi = x.node_id(), ri = row.node_id();
  return x.tape().record(
      std::move(out), {x, row},
      [xi, ri, b, n](Tape& t, std::size_t o) {
        auto g = t.out_grad(o);
        detail::accumulate(t, xi, g);
        if (t.wants_grad(ri)) {
          auto& gr = t.grad_buffer(ri);
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
        }
      },
      "broadcast-add-row");
}

/// [b, n] + column vector [b] added to every column.
inline Tensor add_col(const Tensor& x, const Tensor& col) {
  detail::require_rank("broadcast-add-col", x, 2);
  if (col.array().size() != x.rows() || col.shape().size() != 1)
    detail::shape_mismatch("broadcast-add-col", x.shape(), col.shape());
  const std::size_t b = x.rows(), n = x.cols();
  Array out = x.array();
  const auto cv = col.values();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < n; ++j) out.values[i * n + j] += cv[i];
  const auto xi = x.node_id(), ci = col.node_id();
  return x.tape().record(
      std::move(out), {x, col},
      [xi, ci, b, n](Tape& t, std::size_t o) {
        auto g = t.out_grad(o);
        detail::accumulate(t, xi, g);
        if (t.wants_grad(ci)) {
          auto& gc = t.grad_buffer(ci);
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < n; ++j) gc[i] += g[i * n + j];
        }
      },
      "broadcast-add-col");
}

/// [b, n] -> [b], summing each row.
inline Tensor row_sum(const Tensor& x) {
  detail::require_rank("row-sum", x, 2);
  const std::size_t b = x.rows(), n = x.cols();
  Array out = Array::zeros({b});
  const auto xv = x.values();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < n; ++j) out.values[i] += xv[i * n + j];
  const auto xi = x.node_id();
  return x.tape().record(
      std::move(out), {x},
      [xi, b, n](Tape& t, std::size_t o) {
        if (!t.wants_grad(xi)) return;
        auto g = t.out_grad(o);
        auto& gx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i];
      },
      "row-sum");
}

/// Columns [begin, end) of a [b, n] tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank("split-last-axis", x, 2);
  const std::size_t b = x.rows(), n = x.cols();
  if (begin >= end || end > n)
    throw ShapeError("op 'split-last-axis': invalid column range [" + std::to_string(begin) +
                     ", " + std::to_string(end) + ") for shape " + shape_str(x.shape()));
  const std::size_t w = end - begin;
  Array out = Array::zeros({b, w});
  const auto xv = x.values();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < w; ++j) out.values[i * w + j] = xv[i * n + begin + j];
  const auto xi = x.node_id();
  return x.tape().record(
      std::move(out), {x},
      [xi, b, n, w, begin](Tape& t, std::size_t o) {
        if (!t.wants_grad(xi)) return;
        auto g = t.out_grad(o);
        auto& gx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += g[i * w + j];
      },
      "split-last-axis");
}

/// Splits [b, n] into [b, at] and [b, n - at].
inline std::pair<Tensor, Tensor> split_last(const Tensor& x, std::size_t at) {
  detail::require_rank("split-last-axis", x, 2);
  return {slice_cols(x, 0, at), slice_cols(x, at, x.cols())};
}

/// [b, m] ++ [b, n] -> [b, m + n].
inline Tensor concat_last(const Tensor& a, const Tensor& b) {
  detail::require_rank("concat-last-axis", a, 2);
  detail::require_rank("concat-last-axis", b, 2);
  if (a.rows() != b.rows()) detail::shape_mismatch("concat-last-axis", a.shape(), b.shape());
  const std::size_t r = a.rows(), m = a.cols(), n = b.cols(), w = m + n;
  Array out = Array::zeros({r, w});
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.begin() + i * m, m, out.values.begin() + i * w);
    std::copy_n(bv.begin() + i * n, n, out.values.begin() + i * w + m);
  }
  const auto ai = a.node_id(), bi = b.node_id();
  return a.tape().record(
      std::move(out), {a, b},
      [ai, bi, r, m, n, w](Tape& t, std::size_t o) {
        auto g = t.out_grad(o);
        if (t.wants_grad(ai)) {
          auto& ga = t.grad_buffer(ai);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[i * w + j];
        }
        if (t.wants_grad(bi)) {
          auto& gb = t.grad_buffer(bi);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[i * n + j] += g[i * w + m + j];
        }
      },
      "concat-last-axis");
}

namespace detail {

inline double row_logsumexp(const double* row, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
  return mx + std::log(s);
}

}  // namespace detail

/// Row-wise log-softmax of a [b, C] tensor.
inline Tensor log_softmax(const Tensor& x) {
  detail::require_rank("log_softmax", x, 2);
  const std::size_t b = x.rows(), n = x.cols();
  Array out = x.array();
  for (std::size_t i = 0; i < b; ++i) {
    double* row = out.values.data() + i * n;
    const double lse = detail::row_logsumexp(row, n);
    for (std::size_t j = 0; j < n; ++j) row[j] -= lse;
  }
  const auto xi = x.node_id();
  return x.tape().record(
      std::move(out), {x},
      [xi, b, n](Tape& t, std::size_t o) {
        if (!t.wants_grad(xi)) return;
        auto g = t.out_grad(o);
        const auto& y = t.value(o).values;
        auto& gx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < b; ++i) {
          double gs = 0.0;
          for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
          for (std::size_t j = 0; j < n; ++j)
            gx[i * n + j] += g[i * n + j] - std::exp(y[i * n + j]) * gs;
        }
      },
      "log_softmax");
}

/// [b, C] -> [b], log-sum-exp of each row.
inline Tensor logsumexp_rows(const Tensor& x) {
  detail::require_rank("logsumexp-rows", x, 2);
  const std::size_t b = x.rows(), n = x.cols();
  Array out = Array::zeros({b});
  const auto xv = x.values();
  for (std::size_t i = 0; i < b; ++i) out.values[i] = detail::row_logsumexp(xv.data() + i * n, n);
  const auto xi = x.node_id();
  return x.tape().record(
      std::move(out), {x},
      [xi, b, n](Tape& t, std::size_t o) {
        if (!t.wants_grad(xi)) return;
        auto g = t.out_grad(o);
        const auto& xv = t.value(xi).values;
        const auto& y = t.value(o).values;
        auto& gx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < n; ++j)
            gx[i * n + j] += g[i] * std::exp(xv[i * n + j] - y[i]);
      },
      "logsumexp-rows");
}

/// Picks x[i, classes[i]] from a [b, C] tensor, giving [b].
inline Tensor gather_class(const Tensor& x, std::span<const std::size_t> classes) {
  detail::require_rank("gather-class", x, 2);
  const std::size_t b = x.rows(), n = x.cols();
  if (classes.size() != b)
    detail::shape_mismatch("gather-class", x.shape(), Shape{classes.size()});
  for (auto c : classes)
    if (c >= n)
      throw DomainError("op 'gather-class': class " + std::to_string(c) + " outside [0, " +
                        std::to_string(n) + ")");
  Array out = Array::zeros({b});
  const auto xv = x.values();
  for (std::size_t i = 0; i < b; ++i) out.values[i] = xv[i * n + classes[i]];
  const auto xi = x.node_id();
  std::vector<std::size_t> cls(classes.begin(), classes.end());
  return x.tape().record(
      std::move(out), {x},
      [xi, n, cls = std::move(cls)](Tape& t, std::size_t o) {
        if (!t.wants_grad(xi)) return;
        auto g = t.out_grad(o);
        auto& gx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < cls.size(); ++i) gx[i * n + cls[i]] += g[i];
      },
      "gather-class");
}

/// Log density of every row of u [b, d] under each diagonal Gaussian
/// N(means[k], diag(exp(log_vars[k]))), giving [b, C]. Evaluated in log domain.
inline Tensor diag_gaussian_logpdf(const Tensor& u, const Tensor& means, const Tensor& log_vars) {
  detail::require_rank("gaussian-logpdf", u, 2);
  detail::require_rank("gaussian-logpdf", means, 2);
  detail::require_same("gaussian-logpdf", means, log_vars);
  const std::size_t b = u.rows(), d = u.cols(), c = means.rows();
  if (means.cols() != d) detail::shape_mismatch("gaussian-logpdf", u.shape(), means.shape());
  constexpr double log_2pi = 1.8378770664093454836;  // ln(2 pi)
  const auto uv = u.values();
  const auto mv = means.values();
  const auto lv = log_vars.values();
  std::vector<double> inv_var(lv.size());
  std::vector<double> norm(c, 0.0);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t j = 0; j < d; ++j) {
      inv_var[k * d + j] = std::exp(-lv[k * d + j]);
      norm[k] += lv[k * d + j] + log_2pi;
    }
  Array out = Array::zeros({b, c});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      double q = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double r = uv[i * d + j] - mv[k * d + j];
        q += r * r * inv_var[k * d + j];
      }
      out.values[i * c + k] = -0.5 * (q + norm[k]);
    }
  const auto ui = u.node_id(), mi = means.node_id(), li = log_vars.node_id();
  return u.tape().record(
      std::move(out), {u, means, log_vars},
      [ui, mi, li, b, d, c, inv_var = std::move(inv_var)](Tape& t, std::size_t o) {
        auto g = t.out_grad(o);
        const auto& uv = t.value(ui).values;
        const auto& mv = t.value(mi).values;
        std::vector<double>* gu = t.wants_grad(ui) ? &t.grad_buffer(ui) : nullptr;
        std::vector<double>* gm = t.wants_grad(mi) ? &t.grad_buffer(mi) : nullptr;
        std::vector<double>* gl = t.wants_grad(li) ? &t.grad_buffer(li) : nullptr;
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t k = 0; k < c; ++k) {
            const double gik = g[i * c + k];
            if (gik == 0.0) continue;
            for (std::size_t j = 0; j < d; ++j) {
              const double r = uv[i * d + j] - mv[k * d + j];
              const double w = r * inv_var[k * d + j];
              if (gu) (*gu)[i * d + j] -= gik * w;
              if (gm) (*gm)[k * d + j] += gik * w;
              if (gl) (*gl)[k * d + j] -= 0.5 * gik * (1.0 - r * w);
            }
          }
      },
      "gaussian-logpdf");
}

/// The op kinds reachable through forward_op.
enum class OpKind {
  add,
  sub,
  mul,
  matmul,
  exp,
  log,
  tanh,
  relu,
  negate,
  sum,
  mean,
  concat_last,
  split_last,
  broadcast_add_row,
  scale_by_constant,
  log_softmax,
  gather_class,
};

inline constexpr OpKind all_op_kinds[] = {
    OpKind::add,         OpKind::sub,          OpKind::mul,
    OpKind::matmul,      OpKind::exp,          OpKind::log,
    OpKind::tanh,        OpKind::relu,         OpKind::negate,
    OpKind::sum,         OpKind::mean,         OpKind::concat_last,
    OpKind::split_last,  OpKind::broadcast_add_row, OpKind::scale_by_constant,
    OpKind::log_softmax, OpKind::gather_class,
};

struct OpAttrs {
  double constant = 1.0;              // scale-by-constant
  std::size_t split_at = 1;           // split-last-axis
  std::vector<std::size_t> classes;   // gather-class
};

/// Uniform entry point over op kinds. Every kind yields one tensor except
/// split-last-axis, which yields both halves.
inline std::vector<Tensor> forward_op(OpKind kind, std::span<const Tensor> in,
                                      const OpAttrs& attrs = {}) {
  auto arity = [&](std::size_t n, std::string_view op) {
    if (in.size() != n)
      throw std::invalid_argument("op '" + std::string(op) + "': expected " + std::to_string(n) +
                                  " inputs, got " + std::to_string(in.size()));
  };
  switch (kind) {
    case OpKind::add: arity(2, "add"); return {add(in[0], in[1])};
    case OpKind::sub: arity(2, "sub"); return {sub(in[0], in[1])};
    case OpKind::mul: arity(2, "mul"); return {mul(in[0], in[1])};
    case OpKind::matmul: arity(2, "matmul"); return {matmul(in[0], in[1])};
    case OpKind::exp: arity(1, "exp"); return {exp(in[0])};
    case OpKind::log: arity(1, "log"); return {log(in[0])};
    case OpKind::tanh: arity(1, "tanh"); return {tanh(in[0])};
    case OpKind::relu: arity(1, "relu"); return {relu(in[0])};
    case OpKind::negate: arity(1, "negate"); return {neg(in[0])};
    case OpKind::sum: arity(1, "sum"); return {sum(in[0])};
    case OpKind::mean: arity(1, "mean"); return {mean(in[0])};
    case OpKind::concat_last: arity(2, "concat-last-axis"); return {concat_last(in[0], in[1])};
    case OpKind::split_last: {
      arity(1, "split-last-axis");
      auto [l, r] = split_last(in[0], attrs.split_at);
      return {l, r};
    }
    case OpKind::broadcast_add_row: arity(2, "broadcast-add-row"); return {add_row(in[0], in[1])};
    case OpKind::scale_by_constant: arity(1, "scale-by-constant"); return {scale(in[0], attrs.constant)};
    case OpKind::log_softmax: arity(1, "log_softmax"); return {log_softmax(in[0])};
    case OpKind::gather_class: arity(1, "gather-class"); return {gather_class(in[0], attrs.classes)};
  }
  throw std::invalid_argument("forward_op: unknown op kind");
}

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul-elementwise";
    case OpKind::matmul: return "matmul";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::tanh: return "tanh";
    case OpKind::relu: return "relu";
    case OpKind::negate: return "negate";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::concat_last: return "concat-last-axis";
    case OpKind::split_last: return "split-last-axis";
    case OpKind::broadcast_add_row: return "broadcast-add-row";
    case OpKind::scale_by_constant: return "scale-by-constant";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::gather_class: return "gather-class";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

namespace detail {

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-12, std::abs(analytic) + std::abs(numeric));
}

inline double finite_item(const Tensor& loss) {
  const double v = loss.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value at probe point");
  return v;
}

}  // namespace detail

/// Scalar function of one tensor, built on the given tape.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

/// Max over coordinates of |analytic - central difference| / max(1e-12, |analytic| + |numeric|).
inline double grad_check(const ScalarFn& f, const Array& x, double step) {
  Array analytic;
  {
    Tape tape;
    Tensor xv = tape.variable(x);
    Tensor loss = f(tape, xv);
    detail::finite_item(loss);
    tape.backward(loss);
    analytic = tape.grad(xv);
  }
  double worst = 0.0;
  Array probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe.values[i] = x.values[i] + step;
    double fp, fm;
    {
      Tape tape;
      fp = detail::finite_item(f(tape, tape.constant(probe)));
    }
    probe.values[i] = x.values[i] - step;
    {
      Tape tape;
      fm = detail::finite_item(f(tape, tape.constant(probe)));
    }
    probe.values[i] = x.values[i];
    worst = std::max(worst, detail::relative_error(analytic.values[i], (fp - fm) / (2.0 * step)));
  }
  return worst;
}

/// Loss over named parameters that the function binds with Tape::parameter.
using ParamFn = std::function<Tensor(Tape&)>;
using ParamRef = std::pair<std::string, Array*>;

/// Same error measure, over every coordinate of every listed parameter.
/// Parameters are perturbed in place and restored before returning.
inline double grad_check(const ParamFn& f, std::span<const ParamRef> params, double step) {
  Gradients grads;
  {
    Tape tape;
    Tensor loss = f(tape);
    detail::finite_item(loss);
    grads = tape.backward(loss);
  }
  auto eval = [&] {
    Tape tape(false);
    return detail::finite_item(f(tape));
  };
  double worst = 0.0;
  for (const auto& [name, arr] : params) {
    auto it = grads.find(name);
    for (std::size_t i = 0; i < arr->size(); ++i) {
      const double analytic = it == grads.end() ? 0.0 : it->second.values[i];
      const double orig = arr->values[i];
      arr->values[i] = orig + step;
      const double fp = eval();
      arr->values[i] = orig - step;
      const double fm = eval();
      arr->values[i] = orig;
      worst = std::max(worst, detail::relative_error(analytic, (fp - fm) / (2.0 * step)));
    }
  }
  return worst;
}

}  // namespace normatch
