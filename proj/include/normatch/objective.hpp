#pragma once

// The NorMatch training objective.
//
//   L = L_x(theta_d) + L_u(theta_d) + L_x(theta_n) + lambda * L_u(theta_n)
//
// Pseudo-labels come from the discriminative head on weak views; each sample
// is weighted by the consensus of the head and the flow classifier, and the
// weighted cross-entropy supervises the strong views. Features entering the
// flow losses are detached unless stop-gradient is disabled.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "normatch/data.hpp"
#include "normatch/diffcore.hpp"
#include "normatch/flow.hpp"
#include "normatch/nn.hpp"

namespace normatch {

enum class PseudoLabelMode { soft_da, one_hot };

/// How the disagreement weight min(p_d, p_n) is read.
enum class MinReading {
  max_probabilities,     // min(max_y p_d, max_y p_n)
  discriminative_class,  // min(p_d[a], p_n[a]) with a = argmax p_d
};

struct WeightPolicy {
  enum class Kind { ncue, ncue_zero, fixed_threshold, none };
  Kind kind = Kind::ncue;
  double threshold = 0.95;
  MinReading min_reading = MinReading::max_probabilities;

  static WeightPolicy ncue() { return {}; }
  static WeightPolicy ncue_zero() { return {Kind::ncue_zero}; }
  static WeightPolicy none() { return {Kind::none}; }
  static WeightPolicy fixed_threshold(double t) {
    if (!(t > 0.0 && t <= 1.0))
      throw std::invalid_argument("fixed threshold must lie in (0, 1], got " + std::to_string(t));
    return {Kind::fixed_threshold, t};
  }

  /// Accepts ncue, ncue-zero, none and threshold:<t>.
  static WeightPolicy parse(const std::string& s) {
    if (s == "ncue") return ncue();
    if (s == "ncue-zero") return ncue_zero();
    if (s == "none") return none();
    if (s.rfind("threshold:", 0) == 0) {
      std::size_t used = 0;
      const std::string num = s.substr(10);
      double t = 0.0;
      try {
        t = std::stod(num, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != num.size())
        throw std::invalid_argument("bad threshold in policy '" + s + "'");
      return fixed_threshold(t);
    }
    throw std::invalid_argument("unknown weight policy '" + s + "'");
  }

  std::string name() const {
    switch (kind) {
      case Kind::ncue: return "ncue";
      case Kind::ncue_zero: return "ncue-zero";
      case Kind::none: return "none";
      case Kind::fixed_threshold: {
        std::ostringstream os;
        os << "threshold:" << threshold;
        return os.str();
      }
    }
    return "?";
  }
};

/// Lowest index among the maxima of row i.
inline std::size_t row_argmax(const Array& p, std::size_t i) {
  const std::size_t c = p.cols();
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (p(i, j) > p(i, best)) best = j;
  return best;
}

/// Moving average of recent batch-mean predictions, and the target marginal.
struct DaState {
  std::size_t window = 32;
  std::deque<std::vector<double>> history;
  std::vector<double> target;

  static DaState make(std::size_t classes, std::size_t window = 32) {
    if (window == 0) throw std::invalid_argument("DaState: window must be positive");
    return DaState{window, {}, std::vector<double>(classes, 1.0 / static_cast<double>(classes))};
  }

  std::size_t classes() const { return target.size(); }

  /// Mean over the window; uniform before any batch has been observed.
  std::vector<double> running_average() const {
    const std::size_t c = classes();
    if (history.empty()) return std::vector<double>(c, 1.0 / static_cast<double>(c));
    std::vector<double> avg(c, 0.0);
    for (const auto& h : history)
      for (std::size_t j = 0; j < c; ++j) avg[j] += h[j];
    for (auto& v : avg) v /= static_cast<double>(history.size());
    return avg;
  }

  void observe(std::vector<double> batch_mean) {
    history.push_back(std::move(batch_mean));
    while (history.size() > window) history.pop_front();
  }
};

inline std::vector<double> column_mean(const Array& p) {
  std::vector<double> m(p.cols(), 0.0);
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (std::size_t j = 0; j < p.cols(); ++j) m[j] += p(i, j);
  for (auto& v : m) v /= static_cast<double>(std::max<std::size_t>(1, p.rows()));
  return m;
}

/// p~_i proportional to p_i * target / running_average, renormalised per row.
/// Running-average entries are clamped at 1e-6 before dividing.
inline Array align_distribution(const Array& p, const DaState& da) {
  const std::size_t c = p.cols();
  if (c != da.classes()) ::normatch::detail::shape_mismatch("distribution_align", p.shape, Shape{da.classes()});
  const auto avg = da.running_average();
  std::vector<double> ratio(c);
  for (std::size_t j = 0; j < c; ++j) ratio[j] = da.target[j] / std::max(avg[j], 1e-6);
  Array out = p;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (out(i, j) *= ratio[j]);
    for (std::size_t j = 0; j < c; ++j) out(i, j) /= s;
  }
  return out;
}

/// Aligns p and then records its pre-alignment batch mean in the running average.
inline Array distribution_align(const Array& p, DaState& da) {
  Array out = align_distribution(p, da);
  da.observe(column_mean(p));
  return out;
}

/// Soft mode: aligned p_d. One-hot mode: argmax of p_d. No sharpening in either mode.
inline Array pseudo_label_targets(const Array& p_d_weak, PseudoLabelMode mode, const DaState& da) {
  if (mode == PseudoLabelMode::soft_da) return align_distribution(p_d_weak, da);
  Array out = Array::zeros(p_d_weak.shape);
  for (std::size_t i = 0; i < p_d_weak.rows(); ++i) out(i, row_argmax(p_d_weak, i)) = 1.0;
  return out;
}

/// As pseudo_label_targets, updating the running average in soft mode.
inline Array make_pseudo_labels(const Array& p_d_weak, PseudoLabelMode mode, DaState& da) {
  if (mode == PseudoLabelMode::soft_da) return distribution_align(p_d_weak, da);
  return pseudo_label_targets(p_d_weak, mode, da);
}

/// Per-sample weight tau. NCUE: 1 when the two classifiers' argmax agree,
/// otherwise the minimum of their confidences.
inline std::vector<double> ncue_weight(const Array& p_d, const Array& p_n, const WeightPolicy& policy) {
  if (p_d.shape != p_n.shape) ::normatch::detail::shape_mismatch("ncue_weight", p_d.shape, p_n.shape);
  const std::size_t b = p_d.rows();
  std::vector<double> tau(b, 1.0);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t ad = row_argmax(p_d, i);
    const std::size_t an = row_argmax(p_n, i);
    switch (policy.kind) {
      case WeightPolicy::Kind::none: break;
      case WeightPolicy::Kind::fixed_threshold:
        tau[i] = p_d(i, ad) >= policy.threshold ? 1.0 : 0.0;
        break;
      case WeightPolicy::Kind::ncue_zero:
        tau[i] = ad == an ? 1.0 : 0.0;
        break;
      case WeightPolicy::Kind::ncue:
        if (ad != an)
          tau[i] = policy.min_reading == MinReading::max_probabilities
                       ? std::min(p_d(i, ad), p_n(i, an))
                       : std::min(p_d(i, ad), p_n(i, ad));
        break;
    }
  }
  return tau;
}

/// (1 / muB) sum_i tau_i H(target_i, p_d(y | strong view i)). Targets and tau are constants.
inline Tensor unlabeled_loss_d(const Array& targets, std::span<const double> tau,
                               const Tensor& logprob_strong) {
  if (tau.size() != logprob_strong.rows() || targets.rows() != logprob_strong.rows())
    throw ShapeError("unlabeled_loss_d: batch size mismatch (tau " + std::to_string(tau.size()) +
                     ", targets " + std::to_string(targets.rows()) + ", logprob " +
                     std::to_string(logprob_strong.rows()) + ")");
  Tape& tape = logprob_strong.tape();
  if (tau.empty()) return tape.constant(Array::scalar(0.0));
  const Tensor w = tape.constant(Array({tau.size()}, {tau.begin(), tau.end()}));
  return mean(mul(w, nn::per_sample_cross_entropy(targets, logprob_strong)));
}

/// Backbone, softmax head (theta_d) and flow classifier (theta_n).
struct Models {
  nn::MlpBackbone backbone;
  nn::SoftmaxHead head;
  flow::FlowModel nfc;

  nn::ParamList discriminative_params() {
    nn::ParamList out = backbone.params();
    for (auto& p : head.params()) out.push_back(p);
    return out;
  }
  nn::ParamList flow_params() { return nfc.params(); }
  nn::ParamList all_params() {
    nn::ParamList out = discriminative_params();
    for (auto& p : flow_params()) out.push_back(p);
    return out;
  }
};

struct ModelSpec {
  std::size_t input_dim = 2;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t feature_dim = 8;
  std::size_t classes = 2;
  std::size_t coupling_layers = 6;
  std::size_t coupling_hidden = 32;
};

inline Models make_models(const ModelSpec& spec, std::uint64_t seed) {
  auto rng = data::make_rng({seed, 0x6d6f64656cULL});
  std::vector<std::size_t> dims{spec.input_dim};
  dims.insert(dims.end(), spec.hidden.begin(), spec.hidden.end());
  dims.push_back(spec.feature_dim);
  Models m;
  m.backbone = nn::MlpBackbone::make(dims, rng);
  m.head = nn::SoftmaxHead::make(spec.feature_dim, spec.classes, rng);
  m.nfc = flow::FlowModel::make(spec.feature_dim, spec.classes, spec.coupling_layers,
                                spec.coupling_hidden, rng);
  return m;
}

struct LossFlags {
  double lambda = 1e-6;
  WeightPolicy policy = WeightPolicy::ncue();
  PseudoLabelMode mode = PseudoLabelMode::soft_da;
  bool stop_gradient = true;
  bool train_nfc_on_pseudo_labels = false;
};

/// Each term of the total loss as a tensor on the step's tape.
struct LossTerms {
  Tensor sup_d;    // L_x(theta_d)
  Tensor unsup_d;  // L_u(theta_d)
  Tensor sup_n;    // L_x(theta_n)
  Tensor unsup_n;  // L_u(theta_n), reported even when lambda == 0
  Tensor pl_n;     // pseudo-label cross-entropy for theta_n (ablation)
  Tensor total;
};

/// Scalar values and pseudo-label diagnostics of one evaluation of the loss.
struct LossReport {
  double sup_d = 0.0, unsup_d = 0.0, sup_n = 0.0, unsup_n = 0.0, pl_n = 0.0, total = 0.0;
  std::size_t unlabeled = 0;
  double tau_mean = 0.0;
  std::size_t tau_one = 0;          // samples with tau == 1
  std::size_t agree = 0;            // argmax p_d == argmax p_n (NCUE high confidence)
  std::size_t above_threshold = 0;  // max p_d >= 0.95
  std::size_t correct = 0;          // argmax p_d matches the sealed truth
  std::vector<double> batch_mean_pd;  // pre-alignment mean of p_d on weak views
};

inline constexpr double kHighConfidence = 0.95;

namespace detail {

inline Array probabilities(const Tensor& logprob) {
  Array p = logprob.array();
  for (auto& v : p.values) v = std::exp(v);
  return p;
}

inline void require_finite(const Tensor& t, const char* name) {
  if (!std::isfinite(t.item()))
    throw NumericError(std::string("total_loss: non-finite term ") + name);
}

}  // namespace detail

/// Pseudo-label targets and weights held fixed, e.g. for finite-difference checks
/// where they must not be recomputed at every probe point.
struct FrozenTargets {
  Array targets;
  std::vector<double> tau;
};

/// Builds every loss term for one batch on `tape`.
inline std::pair<LossTerms, LossReport> total_loss(Tape& tape, const Models& models,
                                                   const data::BatchPair& batch,
                                                   const LossFlags& flags, const DaState& da,
                                                   const FrozenTargets* frozen = nullptr) {
  if (flags.lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
  LossTerms terms;
  LossReport report;
  const auto& nfc = models.nfc;
  auto for_flow = [&](const Tensor& z) { return flags.stop_gradient ? tape.detach(z) : z; };

  const Tensor z_l = nn::backbone_forward(tape, models.backbone, tape.constant(batch.labeled_x));
  terms.sup_d = nn::cross_entropy(batch.labels, nn::head_logprob(tape, models.head, z_l));
  terms.sup_n = flow::nfc_supervised_loss(tape, nfc.stack, nfc.prior, for_flow(z_l), batch.labels);

  const std::size_t nu = batch.unlabeled_size();
  report.unlabeled = nu;
  const Tensor zero = tape.constant(Array::scalar(0.0));
  terms.unsup_d = terms.unsup_n = terms.pl_n = zero;
  if (nu > 0) {
    const Tensor z_w = nn::backbone_forward(tape, models.backbone, tape.constant(batch.weak));
    const Tensor z_s = nn::backbone_forward(tape, models.backbone, tape.constant(batch.strong));
    const Array p_d = detail::probabilities(nn::head_logprob(tape, models.head, z_w));
    const Tensor joint_w = flow::joint_logprob(tape, nfc.stack, nfc.prior, for_flow(z_w));
    const Tensor log_pn = log_softmax(joint_w);
    const Array p_n = detail::probabilities(log_pn);

    const Array targets = frozen ? frozen->targets : pseudo_label_targets(p_d, flags.mode, da);
    const auto tau = frozen ? frozen->tau : ncue_weight(p_d, p_n, flags.policy);
    terms.unsup_d = unlabeled_loss_d(targets, tau, nn::head_logprob(tape, models.head, z_s));
    terms.unsup_n = flow::num_loss_from_joint(joint_w);
    if (flags.train_nfc_on_pseudo_labels) terms.pl_n = nn::cross_entropy(targets, log_pn);

    const auto& truth = batch.unlabeled_truth.reveal_for_diagnostics();
    double tau_sum = 0.0;
    for (std::size_t i = 0; i < nu; ++i) {
      const auto ad = row_argmax(p_d, i);
      tau_sum += tau[i];
      report.tau_one += tau[i] == 1.0;
      report.agree += ad == row_argmax(p_n, i);
      report.above_threshold += p_d(i, ad) >= kHighConfidence;
      if (i < truth.size()) report.correct += ad == truth[i];
    }
    report.tau_mean = tau_sum / static_cast<double>(nu);
    report.batch_mean_pd = column_mean(p_d);
  }

  detail::require_finite(terms.sup_d, "L_x(theta_d)");
  detail::require_finite(terms.unsup_d, "L_u(theta_d)");
  detail::require_finite(terms.sup_n, "L_x(theta_n)");
  detail::require_finite(terms.unsup_n, "L_u(theta_n)");
  detail::require_finite(terms.pl_n, "pseudo-label L(theta_n)");

  Tensor total = add(add(terms.sup_d, terms.unsup_d), terms.sup_n);
  if (flags.lambda > 0.0) total = add(total, scale(terms.unsup_n, flags.lambda));
  if (flags.train_nfc_on_pseudo_labels && nu > 0) total = add(total, terms.pl_n);
  terms.total = total;
  detail::require_finite(terms.total, "L");

  report.sup_d = terms.sup_d.item();
  report.unsup_d = terms.unsup_d.item();
  report.sup_n = terms.sup_n.item();
  report.unsup_n = terms.unsup_n.item();
  report.pl_n = terms.pl_n.item();
  report.total = terms.total.item();
  return {terms, report};
}

/// Everything the training step needs beyond the loss flags.
struct TrainConfig {
  LossFlags loss;
  std::int64_t total_steps = 3000;
  double lr_d = 0.03;
  double momentum = 0.9;
  double weight_decay_d = 5e-4;
  double lr_n = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay_n = 0.01;
  double ema_decay = 0.999;
  std::size_t da_window = 32;
};

struct TrainState {
  Models models;
  nn::SgdNesterov sgd;
  nn::AdamW adamw;
  nn::Ema ema;
  DaState da;
  std::int64_t step = 0;

  static TrainState init(const ModelSpec& spec, const TrainConfig& cfg, std::uint64_t seed) {
    TrainState s;
    s.models = make_models(spec, seed);
    s.sgd = nn::SgdNesterov{cfg.momentum, cfg.weight_decay_d, {}};
    s.adamw = nn::AdamW{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay_n, {}, {}, 0};
    s.ema = nn::Ema::init(s.models.discriminative_params(), cfg.ema_decay);
    s.da = DaState::make(spec.classes, cfg.da_window);
    return s;
  }

  /// Backbone and head carrying the EMA shadow weights.
  Models ema_models() const {
    Models m = models;
    ema.copy_to(m.discriminative_params());
    return m;
  }
};

/// One full iteration: loss, backward, SGD-Nesterov on theta_d, AdamW on
/// theta_n (both on the cosine schedule), EMA update, then the DA running average.
inline LossReport train_step(TrainState& state, const data::BatchPair& batch, const TrainConfig& cfg) {
  LossReport report;
  Gradients grads;
  {
    Tape tape;
    auto [terms, rep] = total_loss(tape, state.models, batch, cfg.loss, state.da);
    grads = tape.backward(terms.total);
    report = std::move(rep);
  }
  const double lr_d = nn::cosine_lr(cfg.lr_d, state.step, cfg.total_steps);
  const double lr_n = nn::cosine_lr(cfg.lr_n, state.step, cfg.total_steps);
  state.sgd.step(state.models.discriminative_params(), grads, lr_d);
  state.adamw.step(state.models.flow_params(), grads, lr_n);
  state.ema.update(state.models.discriminative_params());
  if (cfg.loss.mode == PseudoLabelMode::soft_da && !report.batch_mean_pd.empty())
    state.da.observe(report.batch_mean_pd);
  ++state.step;
  return report;
}

/// p_d(y|x) from backbone and head only; the flow classifier is not used.
inline Array predict_proba(const Models& models, const Array& x) {
  Tape tape(false);
  const Tensor z = nn::backbone_forward(tape, models.backbone, tape.constant(x));
  return detail::probabilities(nn::head_logprob(tape, models.head, z));
}

/// Fraction of rows whose argmax p_d equals the label.
inline double eval_accuracy(const Models& models, const Array& x, std::span<const std::size_t> labels) {
  if (labels.empty()) throw std::invalid_argument("eval_accuracy: empty dataset");
  const Array p = predict_proba(models, x);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += row_argmax(p, i) == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

inline double eval_accuracy(const Models& models, const data::Dataset& ds) {
  return eval_accuracy(models, ds.features, ds.labels);
}

/// Fraction of rows with max p_d strictly above 0.95.
inline double high_confidence_ratio(const Models& models, const Array& x) {
  if (x.rows() == 0) return 0.0;
  const Array p = predict_proba(models, x);
  std::size_t n = 0;
  for (std::size_t i = 0; i < p.rows(); ++i) n += p(i, row_argmax(p, i)) > kHighConfidence;
  return static_cast<double>(n) / static_cast<double>(p.rows());
}

}  // namespace normatch
