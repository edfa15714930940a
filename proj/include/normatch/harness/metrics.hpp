#pragma once

// Per-interval metrics and their CSV form.
//
// One row per eval interval. Loss columns are means over the interval's steps.
// Count columns (tau_one, agree, above_threshold, correct) are per-step means
// over the interval, so each is bounded by mu*B.

#include <array>
#include <charconv>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "normatch/objective.hpp"

namespace normatch::harness {

inline constexpr int kMetricsSchemaVersion = 1;

struct MetricsRow {
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  double loss_total = 0.0;
  double loss_sup_d = 0.0;
  double loss_unsup_d = 0.0;
  double loss_sup_n = 0.0;
  double loss_unsup_n = 0.0;
  double loss_pl_n = 0.0;
  double train_acc_live = 0.0;
  double train_acc_ema = 0.0;
  double test_acc_live = 0.0;
  double test_acc_ema = 0.0;
  double pseudo_label_acc = 0.0;  // correct / unlabeled over the interval
  double unlabeled_per_step = 0.0;
  double tau_one = 0.0;
  double agree = 0.0;
  double above_threshold = 0.0;
  double correct = 0.0;
  double tau_mean = 0.0;
  double r_hc = 0.0;  // EMA model on the unlabeled pool, max p_d > 0.95
  std::int64_t interval_steps = 0;

  bool operator==(const MetricsRow&) const = default;
};

inline constexpr std::array<const char*, 22> kMetricsColumns{
    "schema_version", "seed",          "step",           "loss_total",     "loss_sup_d",
    "loss_unsup_d",   "loss_sup_n",    "loss_unsup_n",   "loss_pl_n",      "train_acc_live",
    "train_acc_ema",  "test_acc_live", "test_acc_ema",   "pseudo_label_acc",
    "unlabeled_per_step", "tau_one_count", "agree_count", "threshold_count", "correct_count",
    "tau_mean",       "r_hc",          "interval_steps"};

/// Sums of per-step training diagnostics since the last eval row.
struct IntervalAccumulator {
  std::int64_t steps = 0;
  double total = 0.0, sup_d = 0.0, unsup_d = 0.0, sup_n = 0.0, unsup_n = 0.0, pl_n = 0.0;
  double unlabeled = 0.0, tau_one = 0.0, agree = 0.0, above = 0.0, correct = 0.0, tau_sum = 0.0;

  void add(const LossReport& r) {
    ++steps;
    total += r.total;
    sup_d += r.sup_d;
    unsup_d += r.unsup_d;
    sup_n += r.sup_n;
    unsup_n += r.unsup_n;
    pl_n += r.pl_n;
    unlabeled += static_cast<double>(r.unlabeled);
    tau_one += static_cast<double>(r.tau_one);
    agree += static_cast<double>(r.agree);
    above += static_cast<double>(r.above_threshold);
    correct += static_cast<double>(r.correct);
    tau_sum += r.tau_mean * static_cast<double>(r.unlabeled);
  }

  /// Fills the training-side columns; evaluation columns are left alone.
  void fill(MetricsRow& row) const {
    const double n = steps > 0 ? static_cast<double>(steps) : 1.0;
    row.loss_total = total / n;
    row.loss_sup_d = sup_d / n;
    row.loss_unsup_d = unsup_d / n;
    row.loss_sup_n = sup_n / n;
    row.loss_unsup_n = unsup_n / n;
    row.loss_pl_n = pl_n / n;
    row.unlabeled_per_step = unlabeled / n;
    row.tau_one = tau_one / n;
    row.agree = agree / n;
    row.above_threshold = above / n;
    row.correct = correct / n;
    row.pseudo_label_acc = unlabeled > 0 ? correct / unlabeled : 0.0;
    row.tau_mean = unlabeled > 0 ? tau_sum / unlabeled : 0.0;
    row.interval_steps = steps;
  }

  std::vector<double> to_vector() const {
    return {static_cast<double>(steps), total, sup_d, unsup_d, sup_n, unsup_n, pl_n,
            unlabeled, tau_one, agree, above, correct, tau_sum};
  }
  static IntervalAccumulator from_vector(const std::vector<double>& v) {
    if (v.size() != 13) throw std::invalid_argument("IntervalAccumulator: expected 13 values");
    IntervalAccumulator a;
    a.steps = static_cast<std::int64_t>(v[0]);
    a.total = v[1];
    a.sup_d = v[2];
    a.unsup_d = v[3];
    a.sup_n = v[4];
    a.unsup_n = v[5];
    a.pl_n = v[6];
    a.unlabeled = v[7];
    a.tau_one = v[8];
    a.agree = v[9];
    a.above = v[10];
    a.correct = v[11];
    a.tau_sum = v[12];
    return a;
  }

  bool operator==(const IntervalAccumulator&) const = default;
};

inline void write_metrics_header(std::ostream& os) {
  for (std::size_t i = 0; i < kMetricsColumns.size(); ++i)
    os << (i ? "," : "") << kMetricsColumns[i];
  os << '\n';
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  os << kMetricsSchemaVersion << ',' << r.seed << ',' << r.step;
  for (double v : {r.loss_total, r.loss_sup_d, r.loss_unsup_d, r.loss_sup_n, r.loss_unsup_n,
                   r.loss_pl_n, r.train_acc_live, r.train_acc_ema, r.test_acc_live, r.test_acc_ema,
                   r.pseudo_label_acc, r.unlabeled_per_step, r.tau_one, r.agree, r.above_threshold,
                   r.correct, r.tau_mean, r.r_hc})
    os << ',' << format_double(v);
  os << ',' << r.interval_steps << '\n';
}

}  // namespace normatch::harness
