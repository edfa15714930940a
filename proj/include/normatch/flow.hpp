#pragma once

// Normalizing-flow classifier: a stack of RealNVP affine coupling layers
// mapping features z to a latent u, with a class-conditional diagonal Gaussian
// mixture prior in latent space.
//
//   log p(z|y=k) = log N(u | mu_k, diag(exp(log_var_k))) + log|det du/dz|
//   log p(z)     = logsumexp_k (log p(z|y=k) + log p(y=k))
//   p(y=k|z)     = softmax_k (log p(z|y=k) + log p(y=k))

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "normatch/diffcore.hpp"
#include "normatch/nn.hpp"

namespace normatch::flow {

using nn::Linear;
using nn::ParamList;

/// Affine coupling layer. One half of the coordinates (the conditioning half)
/// passes through unchanged and parameterises a scale and shift of the other:
///   y_b = x_b * exp(s(x_a)) + t(x_a),  s = bound * tanh(s_net(x_a)).
struct CouplingLayer {
  std::size_t dim = 0;
  bool condition_on_first = true;
  Linear s_hidden, s_out;
  Linear t_hidden, t_out;
  Array scale_bound = Array::scalar(1.0);

  /// Output layers of s and t start at zero, so a fresh layer is the identity.
  static CouplingLayer make(std::size_t dim, std::size_t hidden, bool condition_on_first,
                            std::mt19937_64& rng) {
    if (dim < 2) throw std::invalid_argument("CouplingLayer: dimension must be at least 2");
    CouplingLayer l;
    l.dim = dim;
    l.condition_on_first = condition_on_first;
    const auto c = l.cond_dim(), m = l.trans_dim();
    l.s_hidden = Linear::init(c, hidden, rng);
    l.s_out = Linear::zeros(hidden, m);
    l.t_hidden = Linear::init(c, hidden, rng);
    l.t_out = Linear::zeros(hidden, m);
    return l;
  }

  std::size_t split() const { return dim / 2; }
  std::size_t cond_dim() const { return condition_on_first ? split() : dim - split(); }
  std::size_t trans_dim() const { return dim - cond_dim(); }

  /// true marks coordinates that pass through and condition the rest.
  std::vector<bool> mask() const {
    std::vector<bool> m(dim);
    for (std::size_t j = 0; j < dim; ++j) m[j] = (j < split()) == condition_on_first;
    return m;
  }

  void append_params(ParamList& out, const std::string& prefix) {
    s_hidden.append_params(out, prefix + ".s_hidden");
    s_out.append_params(out, prefix + ".s_out");
    t_hidden.append_params(out, prefix + ".t_hidden");
    t_out.append_params(out, prefix + ".t_out");
    out.emplace_back(prefix + ".scale_bound", &scale_bound);
  }
};

namespace detail {

struct ScaleShift {
  Tensor s;
  Tensor t;
};

inline ScaleShift scale_shift(Tape& tape, const CouplingLayer& layer, const std::string& prefix,
                              const Tensor& cond) {
  const Tensor hs = tanh(nn::linear_forward(tape, layer.s_hidden, prefix + ".s_hidden", cond));
  const Tensor raw = tanh(nn::linear_forward(tape, layer.s_out, prefix + ".s_out", hs));
  Tensor s = mul_scalar(raw, tape.parameter(prefix + ".scale_bound", layer.scale_bound));
  for (double v : s.values())
    if (!std::isfinite(v)) throw NumericError("coupling layer " + prefix + ": non-finite scale");
  const Tensor ht = tanh(nn::linear_forward(tape, layer.t_hidden, prefix + ".t_hidden", cond));
  Tensor t = nn::linear_forward(tape, layer.t_out, prefix + ".t_out", ht);
  return {s, t};
}

inline void check_dim(const CouplingLayer& layer, const Tensor& x, std::string_view who) {
  if (x.shape().size() != 2 || x.cols() != layer.dim)
    throw ShapeError(std::string(who) + ": expected [batch, " + std::to_string(layer.dim) +
                     "], got " + shape_str(x.shape()));
}

}  // namespace detail

/// Returns (y, logdet) with logdet[i] the sum of the scale outputs for row i.
inline std::pair<Tensor, Tensor> coupling_forward(Tape& tape, const CouplingLayer& layer,
                                                  const std::string& prefix, const Tensor& x) {
  detail::check_dim(layer, x, "coupling_forward");
  auto [first, second] = split_last(x, layer.split());
  const Tensor& cond = layer.condition_on_first ? first : second;
  const Tensor& moved = layer.condition_on_first ? second : first;
  const auto [s, t] = detail::scale_shift(tape, layer, prefix, cond);
  const Tensor y_moved = add(mul(moved, exp(s)), t);
  Tensor y = layer.condition_on_first ? concat_last(first, y_moved) : concat_last(y_moved, second);
  return {y, row_sum(s)};
}

/// Exact inverse: x_b = (y_b - t(y_a)) * exp(-s(y_a)).
inline Tensor coupling_inverse(Tape& tape, const CouplingLayer& layer, const std::string& prefix,
                               const Tensor& y) {
  detail::check_dim(layer, y, "coupling_inverse");
  auto [first, second] = split_last(y, layer.split());
  const Tensor& cond = layer.condition_on_first ? first : second;
  const Tensor& moved = layer.condition_on_first ? second : first;
  const auto [s, t] = detail::scale_shift(tape, layer, prefix, cond);
  const Tensor x_moved = mul(sub(moved, t), exp(neg(s)));
  return layer.condition_on_first ? concat_last(first, x_moved) : concat_last(x_moved, second);
}

/// Coupling layers with alternating masks.
struct FlowStack {
  std::size_t dim = 0;
  std::vector<CouplingLayer> layers;

  static FlowStack make(std::size_t dim, std::size_t count, std::size_t hidden,
                        std::mt19937_64& rng) {
    FlowStack f;
    f.dim = dim;
    for (std::size_t i = 0; i < count; ++i)
      f.layers.push_back(CouplingLayer::make(dim, hidden, i % 2 == 0, rng));
    return f;
  }

  static std::string layer_name(std::size_t i) { return "flow." + std::to_string(i); }

  ParamList params() {
    ParamList out;
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].append_params(out, layer_name(i));
    return out;
  }
};

/// Applies every layer in order; returns (u, total logdet [batch]).
inline std::pair<Tensor, Tensor> flow_transform(Tape& tape, const FlowStack& stack,
                                                const Tensor& z) {
  if (z.shape().size() != 2 || z.cols() != stack.dim)
    throw ShapeError("flow_transform: expected [batch, " + std::to_string(stack.dim) + "], got " +
                     shape_str(z.shape()));
  Tensor u = z;
  Tensor logdet = tape.constant(Array::zeros({z.rows()}));
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    auto [y, ld] = coupling_forward(tape, stack.layers[i], FlowStack::layer_name(i), u);
    u = y;
    logdet = add(logdet, ld);
  }
  return {u, logdet};
}

inline Tensor flow_inverse(Tape& tape, const FlowStack& stack, const Tensor& u) {
  Tensor z = u;
  for (std::size_t i = stack.layers.size(); i-- > 0;)
    z = coupling_inverse(tape, stack.layers[i], FlowStack::layer_name(i), z);
  return z;
}

/// Class-conditional diagonal Gaussians in latent space plus fixed class priors.
struct GmmPrior {
  Array means;            // [C, d]
  Array log_vars;         // [C, d]
  Array log_class_prior;  // [C], not trained

  /// Means drawn on the sphere of radius 2 sqrt(d); unit variances; uniform priors.
  static GmmPrior make(std::size_t classes, std::size_t dim, std::mt19937_64& rng) {
    if (classes < 1 || dim < 1) throw std::invalid_argument("GmmPrior: need classes, dim >= 1");
    GmmPrior p{Array::zeros({classes, dim}), Array::zeros({classes, dim}),
               Array::filled({classes}, -std::log(static_cast<double>(classes)))};
    const double radius = 2.0 * std::sqrt(static_cast<double>(dim));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t k = 0; k < classes; ++k) {
      double norm2 = 0.0;
      while (norm2 < 1e-12) {
        norm2 = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
          p.means(k, j) = normal(rng);
          norm2 += p.means(k, j) * p.means(k, j);
        }
      }
      const double f = radius / std::sqrt(norm2);
      for (std::size_t j = 0; j < dim; ++j) p.means(k, j) *= f;
    }
    return p;
  }

  std::size_t classes() const { return means.rows(); }
  std::size_t dim() const { return means.cols(); }

  ParamList params() { return {{"gmm.means", &means}, {"gmm.log_vars", &log_vars}}; }
};

/// The trainable flow classifier, theta_n.
struct FlowModel {
  FlowStack stack;
  GmmPrior prior;

  static FlowModel make(std::size_t dim, std::size_t classes, std::size_t layers,
                        std::size_t hidden, std::mt19937_64& rng) {
    FlowModel m;
    m.stack = FlowStack::make(dim, layers, hidden, rng);
    m.prior = GmmPrior::make(classes, dim, rng);
    return m;
  }

  ParamList params() {
    ParamList out = stack.params();
    for (auto& p : prior.params()) out.push_back(p);
    return out;
  }
};

/// log p(z | y=k) for every row and class, shape [batch, C].
inline Tensor class_conditional_logprob(Tape& tape, const FlowStack& stack, const GmmPrior& prior,
                                        const Tensor& z) {
  auto [u, logdet] = flow_transform(tape, stack, z);
  const Tensor means = tape.parameter("gmm.means", prior.means);
  const Tensor log_vars = tape.parameter("gmm.log_vars", prior.log_vars);
  return add_col(diag_gaussian_logpdf(u, means, log_vars), logdet);
}

/// log p(z|y=k) + log p(y=k), shape [batch, C].
inline Tensor joint_logprob(Tape& tape, const FlowStack& stack, const GmmPrior& prior,
                            const Tensor& z) {
  return add_row(class_conditional_logprob(tape, stack, prior, z),
                 tape.constant(prior.log_class_prior));
}

inline Tensor nfc_log_posterior(Tape& tape, const FlowStack& stack, const GmmPrior& prior,
                                const Tensor& z) {
  return log_softmax(joint_logprob(tape, stack, prior, z));
}

/// p_n(y|z), rows summing to one.
inline Tensor nfc_posterior(Tape& tape, const FlowStack& stack, const GmmPrior& prior,
                            const Tensor& z) {
  return exp(nfc_log_posterior(tape, stack, prior, z));
}

/// log p_n(z) per row, shape [batch].
inline Tensor marginal_logprob(Tape& tape, const FlowStack& stack, const GmmPrior& prior,
                               const Tensor& z) {
  return logsumexp_rows(joint_logprob(tape, stack, prior, z));
}

/// Mean negative log-likelihood of the batch under the flow.
inline Tensor num_loss_from_joint(const Tensor& joint) {
  if (joint.rows() == 0) throw std::invalid_argument("num_loss: empty batch");
  return neg(mean(logsumexp_rows(joint)));
}

inline Tensor num_loss(Tape& tape, const FlowStack& stack, const GmmPrior& prior,
                       const Tensor& z) {
  if (z.shape().size() != 2 || z.rows() == 0) throw std::invalid_argument("num_loss: empty batch");
  return num_loss_from_joint(joint_logprob(tape, stack, prior, z));
}

/// Mean cross-entropy of the true labels under p_n(y|z).
inline Tensor nfc_supervised_loss(Tape& tape, const FlowStack& stack, const GmmPrior& prior,
                                  const Tensor& z, std::span<const std::size_t> labels) {
  for (auto y : labels)
    if (y >= prior.classes())
      throw DomainError("nfc_supervised_loss: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(prior.classes()) + ")");
  return nn::cross_entropy(labels, nfc_log_posterior(tape, stack, prior, z));
}

}  // namespace normatch::flow
