#pragma once

// Finite-difference gradient oracles shared by the unit tests and the
// acceptance suite.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "normatch/objective.hpp"
#include "test_util.hpp"

namespace oracles {

using namespace normatch;
using testutil::random_simplex;
using testutil::uniform;

inline constexpr double kStep = 1e-5;

/// Worst relative error over all coordinates (strict), and the same with the
/// denominator floored so a discrepancy at the rounding floor of the central
/// difference scores 1e-4 (resolved).
struct GradError {
  double strict = 0.0;
  double resolved = 0.0;

  GradError& operator|=(const GradError& o) {
    strict = std::max(strict, o.strict);
    resolved = std::max(resolved, o.resolved);
    return *this;
  }
};

/// Absolute error a step-kStep central difference carries from rounding in f itself.
inline double roundoff_floor(double fp, double fm) {
  return 8.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(fp), std::abs(fm)) / kStep;
}

inline GradError fd_check(const ParamFn& f, std::span<const ParamRef> params) {
  Gradients grads;
  {
    Tape tape;
    grads = tape.backward(f(tape));
  }
  auto eval = [&] {
    Tape tape(false);
    const double v = f(tape).item();
    if (!std::isfinite(v)) throw NumericError("fd_check: non-finite loss at probe point");
    return v;
  };
  GradError err;
  for (const auto& [name, arr] : params) {
    const auto it = grads.find(name);
    for (std::size_t i = 0; i < arr->size(); ++i) {
      const double analytic = it == grads.end() ? 0.0 : it->second.values[i];
      const double orig = arr->values[i];
      arr->values[i] = orig + kStep;
      const double fp = eval();
      arr->values[i] = orig - kStep;
      const double fm = eval();
      arr->values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * kStep);
      const double diff = std::abs(analytic - numeric), mag = std::abs(analytic) + std::abs(numeric);
      err.strict = std::max(err.strict, diff / std::max(1e-12, mag));
      err.resolved = std::max(err.resolved, diff / std::max(mag, 1e4 * roundoff_floor(fp, fm)));
    }
  }
  return err;
}

struct OpCase {
  OpCase(std::vector<Shape> in, bool pos = false) : inputs(std::move(in)), positive(pos) {}
  std::vector<Shape> inputs;
  bool positive;
  OpAttrs attrs;
};

inline OpCase case_for(OpKind k, std::mt19937_64& rng) {
  const Shape m{3, 4};
  switch (k) {
    case OpKind::add:
    case OpKind::sub:
    case OpKind::mul: return {{m, m}};
    case OpKind::matmul: return {{{3, 4}, {4, 2}}};
    case OpKind::log: return {{m}, true};
    case OpKind::concat_last: return {{{3, 2}, {3, 3}}};
    case OpKind::split_last: {
      OpCase c{{{3, 5}}};
      c.attrs.split_at = 2;
      return c;
    }
    case OpKind::broadcast_add_row: return {{m, {4}}};
    case OpKind::scale_by_constant: {
      OpCase c{{m}};
      c.attrs.constant = std::uniform_real_distribution<double>(-2.0, 2.0)(rng);
      return c;
    }
    case OpKind::gather_class: {
      OpCase c{{m}};
      std::uniform_int_distribution<std::size_t> pick(0, 3);
      for (int i = 0; i < 3; ++i) c.attrs.classes.push_back(pick(rng));
      return c;
    }
    default: return {{m}};
  }
}

/// Scalarises every output with fixed random weights so all gradient paths are exercised.
inline Tensor weighted_outputs(Tape& t, const std::vector<Tensor>& outs, const std::vector<Array>& weights) {
  Tensor total = t.constant(Array::scalar(0.0));
  for (std::size_t i = 0; i < outs.size(); ++i)
    total = add(total, sum(mul(outs[i], t.constant(weights[i]))));
  return total;
}

inline GradError op_gradient_error(OpKind kind, int trials, std::mt19937_64& rng) {
  GradError worst;
  for (int trial = 0; trial < trials; ++trial) {
    const OpCase c = case_for(kind, rng);
    std::vector<Array> values;
    for (const auto& s : c.inputs) values.push_back(c.positive ? uniform(s, rng, 0.05, 2.0) : uniform(s, rng));
    std::vector<Array> weights;
    {
      Tape probe;
      std::vector<Tensor> in;
      for (const auto& v : values) in.push_back(probe.constant(v));
      for (const auto& o : forward_op(kind, in, c.attrs)) weights.push_back(uniform(o.shape(), rng));
    }
    std::vector<ParamRef> refs;
    for (std::size_t i = 0; i < values.size(); ++i) refs.emplace_back("in" + std::to_string(i), &values[i]);
    const ParamFn f = [&](Tape& t) {
      std::vector<Tensor> in;
      for (const auto& [name, a] : refs) in.push_back(t.parameter(name, *a));
      return weighted_outputs(t, forward_op(kind, in, c.attrs), weights);
    };
    worst |= fd_check(f, refs);
  }
  return worst;
}

/// Ops used by the models that sit outside the OpKind list.
inline GradError extra_ops_gradient_error(int trials, std::mt19937_64& rng) {
  GradError worst;
  for (int trial = 0; trial < trials; ++trial) {
    Array x = uniform({3, 4}, rng), s = uniform({1}, rng), col = uniform({3}, rng);
    Array means = uniform({2, 4}, rng), logv = uniform({2, 4}, rng);
    const Array w3 = uniform({3}, rng), w32 = uniform({3, 2}, rng), w34 = uniform({3, 4}, rng);
    std::vector<ParamRef> refs{{"x", &x}, {"s", &s}, {"col", &col}, {"m", &means}, {"lv", &logv}};
    const ParamFn f = [&](Tape& t) {
      const auto xv = t.parameter("x", x);
      Tensor l = sum(mul(mul_scalar(xv, t.parameter("s", s)), t.constant(w34)));
      l = add(l, sum(mul(add_col(xv, t.parameter("col", col)), t.constant(w34))));
      l = add(l, sum(mul(row_sum(xv), t.constant(w3))));
      l = add(l, sum(mul(logsumexp_rows(xv), t.constant(w3))));
      l = add(l, sum(mul(slice_cols(xv, 1, 3), t.constant(w32))));
      const auto g = diag_gaussian_logpdf(xv, t.parameter("m", means), t.parameter("lv", logv));
      return add(l, sum(mul(g, t.constant(w32))));
    };
    worst |= fd_check(f, refs);
  }
  return worst;
}

inline ModelSpec tiny_spec() {
  ModelSpec s;
  s.hidden = {6};
  s.feature_dim = 3;
  s.classes = 3;
  s.coupling_layers = 2;
  s.coupling_hidden = 4;
  return s;
}

/// Tiny models with every flow parameter off its zero initialisation and the
/// prior means near the features, so each class carries a measurable gradient.
inline Models random_models(std::uint64_t seed, std::mt19937_64& rng) {
  Models m = make_models(tiny_spec(), seed);
  for (auto& [name, p] : m.nfc.stack.params()) {
    if (name.ends_with("scale_bound")) p->values[0] = std::uniform_real_distribution<double>(0.5, 1.5)(rng);
    else *p = uniform(p->shape, rng, -0.5, 0.5);
  }
  m.nfc.prior.means = uniform(m.nfc.prior.means.shape, rng, -1, 1);
  m.nfc.prior.log_vars = uniform(m.nfc.prior.log_vars.shape, rng, -0.3, 0.3);
  return m;
}

inline data::BatchPair random_batch(std::size_t b, std::size_t nu, std::size_t classes, std::mt19937_64& rng) {
  data::BatchPair bp;
  bp.labeled_x = uniform({b, 2}, rng);
  for (std::size_t i = 0; i < b; ++i) bp.labels.push_back(rng() % classes);
  bp.weak = uniform({nu, 2}, rng);
  bp.strong = uniform({nu, 2}, rng);
  std::vector<std::size_t> truth;
  for (std::size_t i = 0; i < nu; ++i) {
    truth.push_back(rng() % classes);
    bp.unlabeled_index.push_back(i);
  }
  bp.unlabeled_truth = data::SealedLabels(truth);
  return bp;
}

/// Weighted unlabeled cross-entropy through backbone and head.
inline GradError weighted_unlabeled_loss_error(int trials, std::mt19937_64& rng) {
  GradError worst;
  for (int trial = 0; trial < trials; ++trial) {
    Models m = random_models(trial, rng);
    const Array strong = uniform({4, 2}, rng);
    const Array targets = random_simplex(4, 3, rng, 1.0);
    std::vector<double> tau(4);
    for (auto& v : tau) v = std::uniform_real_distribution<double>(0, 1)(rng);
    const auto params = m.discriminative_params();
    const ParamFn f = [&](Tape& t) {
      const Tensor z = nn::backbone_forward(t, m.backbone, t.constant(strong));
      return unlabeled_loss_d(targets, tau, nn::head_logprob(t, m.head, z));
    };
    worst |= fd_check(f, params);
  }
  return worst;
}

/// Mean flow negative log-likelihood over theta_n and the input features.
inline GradError num_loss_error(int trials, std::mt19937_64& rng) {
  GradError worst;
  for (int trial = 0; trial < trials; ++trial) {
    Models m = random_models(trial, rng);
    Array z = uniform({5, 3}, rng);
    auto params = m.flow_params();
    params.emplace_back("z", &z);
    const ParamFn f = [&](Tape& t) { return flow::num_loss(t, m.nfc.stack, m.nfc.prior, t.parameter("z", z)); };
    worst |= fd_check(f, params);
  }
  return worst;
}

/// Supervised cross-entropies of both classifiers.
inline GradError supervised_loss_error(int trials, std::mt19937_64& rng) {
  GradError worst;
  for (int trial = 0; trial < trials; ++trial) {
    Models m = random_models(trial, rng);
    const auto bp = random_batch(5, 0, 3, rng);
    const auto params = m.all_params();
    const ParamFn f = [&](Tape& t) {
      const Tensor z = nn::backbone_forward(t, m.backbone, t.constant(bp.labeled_x));
      return add(nn::cross_entropy(bp.labels, nn::head_logprob(t, m.head, z)),
                 flow::nfc_supervised_loss(t, m.nfc.stack, m.nfc.prior, z, bp.labels));
    };
    worst |= fd_check(f, params);
  }
  return worst;
}

/// Total loss with frozen targets: all parameters with the flow attached to the
/// backbone, then theta_n alone with stop-gradient on.
inline GradError total_loss_error(int trials, std::mt19937_64& rng) {
  GradError worst;
  for (int trial = 0; trial < trials; ++trial) {
    Models m = random_models(trial, rng);
    const auto bp = random_batch(3, 4, 3, rng);
    LossFlags flags;
    flags.lambda = 0.5;
    flags.train_nfc_on_pseudo_labels = trial % 2 == 1;
    const DaState da = DaState::make(3);
    FrozenTargets frozen{random_simplex(4, 3, rng, 1.0), std::vector<double>(4)};
    for (auto& v : frozen.tau) v = std::uniform_real_distribution<double>(0, 1)(rng);
    const ParamFn f = [&](Tape& t) { return total_loss(t, m, bp, flags, da, &frozen).first.total; };

    flags.stop_gradient = false;
    const auto all = m.all_params();
    worst |= fd_check(f, all);
    flags.stop_gradient = true;
    const auto flow_only = m.flow_params();
    worst |= fd_check(f, flow_only);
  }
  return worst;
}

}  // namespace oracles
