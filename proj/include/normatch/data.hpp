#pragma once

// Synthetic 2-D datasets, labeled/unlabeled splits, weak/strong augmentation
// analogues and mini-batch sampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "normatch/diffcore.hpp"

namespace normatch::data {

/// Generator seeded from several 64-bit words (seed, stream tag, step, ...).
inline std::mt19937_64 make_rng(std::initializer_list<std::uint64_t> words) {
  std::vector<std::uint32_t> parts;
  for (auto w : words) {
    parts.push_back(static_cast<std::uint32_t>(w));
    parts.push_back(static_cast<std::uint32_t>(w >> 32));
  }
  std::seed_seq seq(parts.begin(), parts.end());
  return std::mt19937_64(seq);
}

enum class Split { train, test };

struct Dataset {
  Array features = Array::zeros({0, 2});  // [N, input_dim]
  std::vector<std::size_t> labels;
  std::size_t num_classes = 2;
  Split split = Split::train;
  std::uint64_t seed = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (auto y : labels) ++counts.at(y);
    return counts;
  }
};

/// Ground-truth labels of unlabeled samples. Only diagnostics may read them.
class SealedLabels {
 public:
  SealedLabels() = default;
  explicit SealedLabels(std::vector<std::size_t> labels) : labels_(std::move(labels)) {}

  std::size_t size() const { return labels_.size(); }
  const std::vector<std::size_t>& reveal_for_diagnostics() const { return labels_; }

 private:
  std::vector<std::size_t> labels_;
};

struct UnlabeledSet {
  Array features = Array::zeros({0, 2});
  SealedLabels truth;
  std::size_t num_classes = 2;

  std::size_t size() const { return truth.size(); }
};

namespace detail {

inline void check_sizes(std::size_t n, std::size_t classes, std::string_view who) {
  if (classes < 2) throw std::invalid_argument(std::string(who) + ": need at least 2 classes");
  if (n < 2 * classes || n % classes != 0)
    throw std::invalid_argument(std::string(who) + ": n = " + std::to_string(n) +
                                " must be a multiple of the class count and at least " +
                                std::to_string(2 * classes));
}

/// Shuffles rows so that classes are interleaved.
inline Dataset finish(std::vector<double> xs, std::vector<std::size_t> ys, std::size_t classes,
                      std::uint64_t seed, std::mt19937_64& rng) {
  const std::size_t n = ys.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  Dataset ds;
  ds.features = Array::zeros({n, 2});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ds.features(i, 0) = xs[2 * order[i]];
    ds.features(i, 1) = xs[2 * order[i] + 1];
    ds.labels[i] = ys[order[i]];
  }
  ds.num_classes = classes;
  ds.seed = seed;
  return ds;
}

}  // namespace detail

/// Two interleaving half circles: class 0 on (cos t, sin t), class 1 on
/// (1 - cos t, 0.5 - sin t), t uniform on [0, pi], plus Gaussian noise.
inline Dataset make_two_moons(std::size_t n, double noise, std::uint64_t seed) {
  detail::check_sizes(n, 2, "make_two_moons");
  if (noise < 0.0) throw std::invalid_argument("make_two_moons: noise must be >= 0");
  auto rng = make_rng({seed, 0x6d6f6f6eULL});
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::normal_distribution<double> jitter(0.0, 1.0);
  std::vector<double> xs;
  std::vector<std::size_t> ys;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i < n / 2 ? 0 : 1;
    const double t = angle(rng);
    double a = y == 0 ? std::cos(t) : 1.0 - std::cos(t);
    double b = y == 0 ? std::sin(t) : 0.5 - std::sin(t);
    a += noise * jitter(rng);
    b += noise * jitter(rng);
    xs.push_back(a);
    xs.push_back(b);
    ys.push_back(y);
  }
  return detail::finish(std::move(xs), std::move(ys), 2, seed, rng);
}

/// Isotropic Gaussian clusters around centers spaced evenly on a circle of radius 2.
inline Dataset make_blobs(std::size_t n, std::size_t classes, double spread, std::uint64_t seed) {
  detail::check_sizes(n, classes, "make_blobs");
  if (spread < 0.0) throw std::invalid_argument("make_blobs: spread must be >= 0");
  auto rng = make_rng({seed, 0x626c6f62ULL});
  std::normal_distribution<double> jitter(0.0, 1.0);
  std::vector<double> xs;
  std::vector<std::size_t> ys;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i * classes / n;
    const double phi = 2.0 * std::numbers::pi * static_cast<double>(y) / static_cast<double>(classes);
    xs.push_back(2.0 * std::cos(phi) + spread * jitter(rng));
    xs.push_back(2.0 * std::sin(phi) + spread * jitter(rng));
    ys.push_back(y);
  }
  return detail::finish(std::move(xs), std::move(ys), classes, seed, rng);
}

inline Array blob_centers(std::size_t classes) {
  Array c = Array::zeros({classes, 2});
  for (std::size_t k = 0; k < classes; ++k) {
    const double phi = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes);
    c(k, 0) = 2.0 * std::cos(phi);
    c(k, 1) = 2.0 * std::sin(phi);
  }
  return c;
}

/// Concentric rings: class 0 at radius 1, class 1 at radius 0.5.
inline Dataset make_circles(std::size_t n, double noise, std::uint64_t seed) {
  detail::check_sizes(n, 2, "make_circles");
  if (noise < 0.0) throw std::invalid_argument("make_circles: noise must be >= 0");
  auto rng = make_rng({seed, 0x63697263ULL});
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> jitter(0.0, 1.0);
  std::vector<double> xs;
  std::vector<std::size_t> ys;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i < n / 2 ? 0 : 1;
    const double r = y == 0 ? 1.0 : 0.5;
    const double t = angle(rng);
    xs.push_back(r * std::cos(t) + noise * jitter(rng));
    xs.push_back(r * std::sin(t) + noise * jitter(rng));
    ys.push_back(y);
  }
  return detail::finish(std::move(xs), std::move(ys), 2, seed, rng);
}

struct LabelSplit {
  Dataset labeled;
  UnlabeledSet unlabeled;
  std::vector<std::size_t> labeled_index;    // rows of the source dataset
  std::vector<std::size_t> unlabeled_index;  // rows of the source dataset
};

/// Exactly labels_per_class labeled samples per class, drawn uniformly; the rest unlabeled.
inline LabelSplit split_labels(const Dataset& ds, std::size_t labels_per_class,
                               std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(ds.labels[i]).push_back(i);
  for (std::size_t k = 0; k < ds.num_classes; ++k)
    if (by_class[k].size() < labels_per_class)
      throw std::invalid_argument("split_labels: class " + std::to_string(k) + " has only " +
                                  std::to_string(by_class[k].size()) + " samples, " +
                                  std::to_string(labels_per_class) + " requested");
  auto rng = make_rng({seed, 0x73706c74ULL});
  std::vector<bool> is_labeled(ds.size(), false);
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t j = 0; j < labels_per_class; ++j) is_labeled[members[j]] = true;
  }
  LabelSplit out;
  for (std::size_t i = 0; i < ds.size(); ++i)
    (is_labeled[i] ? out.labeled_index : out.unlabeled_index).push_back(i);

  const std::size_t d = ds.dim();
  auto gather = [&](const std::vector<std::size_t>& idx) {
    Array a = Array::zeros({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) a(r, j) = ds.features(idx[r], j);
    return a;
  };
  out.labeled.features = gather(out.labeled_index);
  out.labeled.num_classes = ds.num_classes;
  out.labeled.seed = ds.seed;
  for (auto i : out.labeled_index) out.labeled.labels.push_back(ds.labels[i]);

  std::vector<std::size_t> truth;
  for (auto i : out.unlabeled_index) truth.push_back(ds.labels[i]);
  out.unlabeled.features = gather(out.unlabeled_index);
  out.unlabeled.truth = SealedLabels(std::move(truth));
  out.unlabeled.num_classes = ds.num_classes;
  return out;
}

/// Weak: x + N(0, sigma^2).  Strong: dropout(x * U[1 - rho, 1 + rho] + N(0, sigma^2)).
struct AugPolicy {
  enum class Kind { weak, strong };
  Kind kind = Kind::weak;
  double sigma = 0.05;
  double rho = 0.0;
  double p_drop = 0.0;

  static AugPolicy weak(double sigma = 0.05) { return {Kind::weak, sigma, 0.0, 0.0}; }
  static AugPolicy strong(double sigma = 0.20, double rho = 0.15, double p_drop = 0.0) {
    return {Kind::strong, sigma, rho, p_drop};
  }
};

inline Array augment(const Array& x, const AugPolicy& policy, std::mt19937_64& rng) {
  Array out = x;
  std::normal_distribution<double> normal(0.0, 1.0);
  if (policy.kind == AugPolicy::Kind::weak) {
    for (auto& v : out.values) v += policy.sigma * normal(rng);
    return out;
  }
  std::uniform_real_distribution<double> scale(1.0 - policy.rho, 1.0 + policy.rho);
  std::bernoulli_distribution drop(policy.p_drop);
  for (auto& v : out.values) {
    v = v * scale(rng) + policy.sigma * normal(rng);
    if (drop(rng)) v = 0.0;
  }
  return out;
}

/// One training iteration's data: B labeled rows (weakly augmented) and
/// mu*B unlabeled samples, each with a weak and a strong view.
struct BatchPair {
  Array labeled_x;
  std::vector<std::size_t> labels;
  Array weak;
  Array strong;
  SealedLabels unlabeled_truth;
  std::vector<std::size_t> labeled_index;
  std::vector<std::size_t> unlabeled_index;

  std::size_t unlabeled_size() const { return unlabeled_index.size(); }
};

/// k indices into a pool of n: without replacement when k <= n, else with replacement.
inline std::vector<std::size_t> draw_indices(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx;
  if (k > n) {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t i = 0; i < k; ++i) idx.push_back(pick(rng));
    return idx;
  }
  idx.resize(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

inline Array gather_rows(const Array& a, const std::vector<std::size_t>& idx) {
  const std::size_t d = a.cols();
  Array out = Array::zeros({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(a.values.begin() + idx[r] * d, d, out.values.begin() + r * d);
  return out;
}

/// mu == 0 selects supervised-only batches with no unlabeled part.
inline BatchPair sample_batches(const Dataset& labeled, const UnlabeledSet& unlabeled,
                                std::size_t batch, std::size_t mu, const AugPolicy& weak,
                                const AugPolicy& strong, std::mt19937_64& rng) {
  if (labeled.size() == 0) throw std::invalid_argument("sample_batches: empty labeled pool");
  BatchPair bp;
  bp.labeled_index = draw_indices(labeled.size(), batch, rng);
  bp.labeled_x = augment(gather_rows(labeled.features, bp.labeled_index), weak, rng);
  for (auto i : bp.labeled_index) bp.labels.push_back(labeled.labels[i]);

  const std::size_t d = labeled.dim();
  if (mu == 0) {
    bp.weak = bp.strong = Array::zeros({0, d});
    return bp;
  }
  if (unlabeled.size() == 0) throw std::invalid_argument("sample_batches: empty unlabeled pool");
  bp.unlabeled_index = draw_indices(unlabeled.size(), mu * batch, rng);
  const Array source = gather_rows(unlabeled.features, bp.unlabeled_index);
  bp.weak = augment(source, weak, rng);
  bp.strong = augment(source, strong, rng);
  std::vector<std::size_t> truth;
  const auto& all = unlabeled.truth.reveal_for_diagnostics();
  for (auto i : bp.unlabeled_index) truth.push_back(all[i]);
  bp.unlabeled_truth = SealedLabels(std::move(truth));
  return bp;
}

/// Rows `x1,...,xd,label,split` with split one of labeled/unlabeled/test.
inline void write_dataset_csv(std::ostream& os, const LabelSplit& train, const Dataset& test) {
  const std::size_t d = train.labeled.dim();
  for (std::size_t j = 0; j < d; ++j) os << 'x' << j + 1 << ',';
  os << "label,split\n";
  os.precision(17);
  auto rows = [&](const Array& x, const std::vector<std::size_t>& y, const char* tag) {
    for (std::size_t i = 0; i < y.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) os << x(i, j) << ',';
      os << y[i] << ',' << tag << '\n';
    }
  };
  rows(train.labeled.features, train.labeled.labels, "labeled");
  rows(train.unlabeled.features, train.unlabeled.truth.reveal_for_diagnostics(), "unlabeled");
  rows(test.features, test.labels, "test");
}

}  // namespace normatch::data
