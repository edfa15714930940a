#pragma once

// Discriminative building blocks: MLP backbone, bias-free softmax head,
// cross-entropy, SGD with Nesterov momentum, AdamW, cosine schedule and EMA.

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "normatch/diffcore.hpp"

namespace normatch::nn {

/// Named mutable views of a model's parameters, in a stable order.
using ParamList = std::vector<ParamRef>;

/// Affine layer y = x W + b with W of shape [in, out].
struct Linear {
  Array weight;
  Array bias;

  /// Uniform in +-1/sqrt(in), the usual fan-in initialisation.
  static Linear init(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Linear l{Array::zeros({in, out}), Array::zeros({out})};
    for (auto& v : l.weight.values) v = u(rng);
    for (auto& v : l.bias.values) v = u(rng);
    return l;
  }
  static Linear zeros(std::size_t in, std::size_t out) {
    return Linear{Array::zeros({in, out}), Array::zeros({out})};
  }

  std::size_t in_dim() const { return weight.shape.at(0); }
  std::size_t out_dim() const { return weight.shape.at(1); }

  void append_params(ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".weight", &weight);
    out.emplace_back(prefix + ".bias", &bias);
  }
};

inline Tensor linear_forward(Tape& tape, const Linear& layer, const std::string& prefix,
                             const Tensor& x) {
  const Tensor w = tape.parameter(prefix + ".weight", layer.weight);
  const Tensor b = tape.parameter(prefix + ".bias", layer.bias);
  return add_row(matmul(x, w), b);
}

/// Stand-in for a CNN feature extractor: affine layers with tanh between them
/// and a linear last layer producing the feature z.
struct MlpBackbone {
  std::vector<Linear> layers;

  /// dims = {input_dim, hidden..., feature_dim}.
  static MlpBackbone make(const std::vector<std::size_t>& dims, std::mt19937_64& rng) {
    if (dims.size() < 2) throw std::invalid_argument("MlpBackbone: need at least input and feature dims");
    MlpBackbone m;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
      m.layers.push_back(Linear::init(dims[i], dims[i + 1], rng));
    return m;
  }

  std::size_t input_dim() const { return layers.front().in_dim(); }
  std::size_t feature_dim() const { return layers.back().out_dim(); }

  ParamList params() {
    ParamList out;
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].append_params(out, layer_name(i));
    return out;
  }

  static std::string layer_name(std::size_t i) { return "backbone." + std::to_string(i); }
};

inline Tensor backbone_forward(Tape& tape, const MlpBackbone& model, const Tensor& x) {
  if (x.shape().size() != 2 || x.cols() != model.input_dim())
    throw ShapeError("backbone_forward: expected input [batch, " +
                     std::to_string(model.input_dim()) + "], got " + shape_str(x.shape()));
  Tensor h = x;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    h = linear_forward(tape, model.layers[i], MlpBackbone::layer_name(i), h);
    if (i + 1 < model.layers.size()) h = tanh(h);
  }
  return h;
}

/// Linear softmax classifier without bias; column k of `weight` is W_k.
struct SoftmaxHead {
  Array weight;  // [feature_dim, C]

  static SoftmaxHead make(std::size_t feature_dim, std::size_t classes, std::mt19937_64& rng) {
    if (classes < 2) throw std::invalid_argument("SoftmaxHead: need at least 2 classes");
    return SoftmaxHead{Linear::init(feature_dim, classes, rng).weight};
  }

  std::size_t feature_dim() const { return weight.shape.at(0); }
  std::size_t classes() const { return weight.shape.at(1); }

  ParamList params() { return {{"head.weight", &weight}}; }
};

/// Row-wise log p_d(y|z) = log_softmax(z W).
inline Tensor head_logprob(Tape& tape, const SoftmaxHead& head, const Tensor& z) {
  if (z.shape().size() != 2 || z.cols() != head.feature_dim())
    throw ShapeError("head_logprob: expected features [batch, " +
                     std::to_string(head.feature_dim()) + "], got " + shape_str(z.shape()));
  return log_softmax(matmul(z, tape.parameter("head.weight", head.weight)));
}

inline Array one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  Array out = Array::zeros({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes)
      throw DomainError("one_hot: label " + std::to_string(labels[i]) + " outside [0, " +
                        std::to_string(classes) + ")");
    out(i, labels[i]) = 1.0;
  }
  return out;
}

inline void validate_distribution_rows(const Array& target, std::string_view who) {
  const std::size_t c = target.cols();
  for (std::size_t i = 0; i < target.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = target(i, j);
      if (v < 0.0) throw DomainError(std::string(who) + ": negative target entry in row " + std::to_string(i));
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9)
      throw DomainError(std::string(who) + ": target row " + std::to_string(i) + " sums to " +
                        std::to_string(s));
  }
}

/// Per-sample H(target_i, p_i) = -sum_y target_iy log p_iy, shape [batch].
inline Tensor per_sample_cross_entropy(const Array& target, const Tensor& logprob) {
  if (target.shape != logprob.shape())
    detail::shape_mismatch("cross_entropy", target.shape, logprob.shape());
  validate_distribution_rows(target, "cross_entropy");
  return neg(row_sum(mul(logprob.tape().constant(target), logprob)));
}

/// Batch mean of H(target, p).
inline Tensor cross_entropy(const Array& target, const Tensor& logprob) {
  return mean(per_sample_cross_entropy(target, logprob));
}

/// Batch mean of -log p[label].
inline Tensor cross_entropy(std::span<const std::size_t> labels, const Tensor& logprob) {
  return neg(mean(gather_class(logprob, labels)));
}

namespace detail {

inline const Array* find_grad(const Gradients& grads, const std::string& name, const Array& param) {
  auto it = grads.find(name);
  if (it == grads.end()) return nullptr;
  if (it->second.shape != param.shape)
    ::normatch::detail::shape_mismatch("optimizer(" + name + ")", param.shape, it->second.shape);
  for (double g : it->second.values)
    if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter '" + name + "'");
  return &it->second;
}

}  // namespace detail

/// SGD with Nesterov momentum:  g' = g + wd p;  v <- m v + g';  p <- p - lr (g' + m v).
struct SgdNesterov {
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::map<std::string, Array> velocity;

  void step(const ParamList& params, const Gradients& grads, double lr) {
    for (const auto& [name, p] : params) detail::find_grad(grads, name, *p);
    for (const auto& [name, p] : params) {
      const Array* g = detail::find_grad(grads, name, *p);
      auto [it, fresh] = velocity.try_emplace(name, Array::zeros(p->shape));
      auto& v = it->second.values;
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double gi = (g ? g->values[i] : 0.0) + weight_decay * p->values[i];
        v[i] = momentum * v[i] + gi;
        p->values[i] -= lr * (gi + momentum * v[i]);
      }
    }
  }
};

/// Adam with decoupled weight decay and bias correction.
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::map<std::string, Array> first_moment;
  std::map<std::string, Array> second_moment;
  std::int64_t steps = 0;

  void step(const ParamList& params, const Gradients& grads, double lr) {
    for (const auto& [name, p] : params) detail::find_grad(grads, name, *p);
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    for (const auto& [name, p] : params) {
      const Array* g = detail::find_grad(grads, name, *p);
      auto& m = first_moment.try_emplace(name, Array::zeros(p->shape)).first->second.values;
      auto& v = second_moment.try_emplace(name, Array::zeros(p->shape)).first->second.values;
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double gi = g ? g->values[i] : 0.0;
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
        p->values[i] *= 1.0 - lr * weight_decay;
        p->values[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
  }
};

/// base_lr * cos(7 pi step / (16 total_steps)).
inline double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(total_steps) + "]");
  return base_lr * std::cos(7.0 * std::numbers::pi * static_cast<double>(step) /
                            (16.0 * static_cast<double>(total_steps)));
}

/// Exponential moving average of parameters, used for evaluation only.
struct Ema {
  double decay = 0.999;
  std::map<std::string, Array> shadow;

  static Ema init(const ParamList& params, double decay) {
    if (!(decay > 0.0 && decay < 1.0)) throw std::invalid_argument("Ema: decay must lie in (0, 1)");
    Ema e{decay, {}};
    for (const auto& [name, p] : params) e.shadow.emplace(name, *p);
    return e;
  }

  /// shadow <- d shadow + (1 - d) param.
  void update(const ParamList& params) {
    for (const auto& [name, p] : params) {
      auto it = shadow.find(name);
      if (it == shadow.end()) throw std::invalid_argument("Ema: unknown parameter '" + name + "'");
      if (it->second.shape != p->shape)
        ::normatch::detail::shape_mismatch("ema_update(" + name + ")", it->second.shape, p->shape);
      auto& s = it->second.values;
      for (std::size_t i = 0; i < s.size(); ++i)
        s[i] = decay * s[i] + (1.0 - decay) * p->values[i];
    }
  }

  /// Copies shadow values into parameters with matching names.
  void copy_to(const ParamList& params) const {
    for (const auto& [name, p] : params) *p = shadow.at(name);
  }
};

}  // namespace normatch::nn
