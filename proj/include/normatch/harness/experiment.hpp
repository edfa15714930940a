#pragma once

// Seeded training runs, multi-seed experiments, policy comparisons and the
// lambda sweep.

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "normatch/data.hpp"
#include "normatch/errors.hpp"
#include "normatch/harness/checkpoint.hpp"
#include "normatch/harness/config.hpp"
#include "normatch/harness/metrics.hpp"
#include "normatch/harness/run.hpp"
#include "normatch/objective.hpp"

namespace normatch::harness {

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<MetricsRow> rows;

  const MetricsRow& last() const { return rows.back(); }
};

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

inline Stat mean_std(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean_std: no values");
  Stat s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

struct ExperimentResult {
  std::vector<SeedResult> seeds;

  std::vector<double> final_values(double MetricsRow::*field) const {
    std::vector<double> out;
    for (const auto& s : seeds) out.push_back(s.last().*field);
    return out;
  }
  Stat test_acc_ema() const { return mean_std(final_values(&MetricsRow::test_acc_ema)); }
  Stat test_acc_live() const { return mean_std(final_values(&MetricsRow::test_acc_live)); }
  Stat r_hc() const { return mean_std(final_values(&MetricsRow::r_hc)); }
};

/// Called after every metrics row; useful for progress output.
using RowCallback = std::function<void(const MetricsRow&)>;

struct RunOptions {
  bool write_files = true;
  RowCallback on_row;
};

inline fs::path metrics_path(const fs::path& dir, std::uint64_t seed) {
  return dir / ("metrics_seed" + std::to_string(seed) + ".csv");
}

/// Creates `dir` and proves a file can be written there.
inline void ensure_writable_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw ConfigError("output directory '" + dir.string() + "' cannot be created: " + ec.message());
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream out(probe, std::ios::binary);
    if (!out || !(out << "ok") || !out.flush())
      throw ConfigError("output directory '" + dir.string() + "' is not writable");
  }
  fs::remove(probe, ec);
}

inline std::ofstream open_for_write(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + p.string() + "'");
  return out;
}

/// Trains one seed to completion, optionally streaming its CSV to `csv`.
inline SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, std::ostream* csv,
                           const RunOptions& opt = {}, const fs::path& checkpoint_dir = {}) {
  Run run(cfg, seed);
  if (csv) write_metrics_header(*csv);
  while (!run.done()) {
    if (auto row = run.advance()) {
      if (csv) write_metrics_row(*csv, *row);
      if (opt.on_row) opt.on_row(*row);
    }
    if (!checkpoint_dir.empty() && cfg.checkpoint_interval > 0 &&
        run.step() % static_cast<std::int64_t>(cfg.checkpoint_interval) == 0)
      save_checkpoint(checkpoint_dir / ("checkpoint_seed" + std::to_string(seed) + ".ckpt"), run);
  }
  if (csv && !csv->flush()) throw ConfigError("failed writing metrics CSV");
  return {seed, run.rows()};
}

inline nlohmann::json summary_json(const ExperimentConfig& cfg, const ExperimentResult& r) {
  nlohmann::json per_seed = nlohmann::json::array();
  for (const auto& s : r.seeds)
    per_seed.push_back({{"seed", s.seed},
                        {"test_acc_ema", s.last().test_acc_ema},
                        {"test_acc_live", s.last().test_acc_live},
                        {"r_hc", s.last().r_hc}});
  const auto ema = r.test_acc_ema(), live = r.test_acc_live(), hc = r.r_hc();
  return {{"policy", cfg.train.loss.policy.name()},
          {"lambda", cfg.train.loss.lambda},
          {"per_seed", per_seed},
          {"test_acc_ema", {{"mean", ema.mean}, {"std", ema.std}}},
          {"test_acc_live", {{"mean", live.mean}, {"std", live.std}}},
          {"r_hc", {{"mean", hc.mean}, {"std", hc.std}}}};
}

/// Every seed of `cfg`. With write_files, the output directory is checked
/// before any training and receives one CSV per seed plus summary.json.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  cfg.validate();
  const fs::path dir = cfg.output_dir;
  if (opt.write_files) ensure_writable_dir(dir);
  ExperimentResult result;
  for (auto seed : cfg.seeds) {
    if (opt.write_files) {
      auto out = open_for_write(metrics_path(dir, seed));
      result.seeds.push_back(run_seed(cfg, seed, &out, opt, dir));
    } else {
      result.seeds.push_back(run_seed(cfg, seed, nullptr, opt));
    }
  }
  if (opt.write_files) {
    auto out = open_for_write(dir / "summary.json");
    out << summary_json(cfg, result).dump(2) << '\n';
  }
  return result;
}

/// Seed-averaged high-confidence and correct pseudo-label counts for one row index.
struct CountPoint {
  std::int64_t step = 0;
  double agree = 0.0;      // NCUE high-confidence count (tau == 1)
  double threshold = 0.0;  // max p_d >= 0.95
  double correct = 0.0;    // pseudo-label matches the sealed truth
};

inline std::vector<CountPoint> count_curves(const ExperimentResult& r) {
  std::vector<CountPoint> out;
  if (r.seeds.empty()) return out;
  const std::size_t rows = r.seeds.front().rows.size();
  for (std::size_t i = 0; i < rows; ++i) {
    CountPoint p;
    p.step = r.seeds.front().rows[i].step;
    for (const auto& s : r.seeds) {
      p.agree += s.rows.at(i).agree;
      p.threshold += s.rows.at(i).above_threshold;
      p.correct += s.rows.at(i).correct;
    }
    const double n = static_cast<double>(r.seeds.size());
    p.agree /= n;
    p.threshold /= n;
    p.correct /= n;
    out.push_back(p);
  }
  return out;
}

struct PolicyResult {
  WeightPolicy policy;
  ExperimentResult result;
  std::vector<CountPoint> curves;
};

/// File-system friendly label: threshold:0.95 -> threshold_0.95.
inline std::string safe_name(std::string s) {
  for (auto& c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_')) c = '_';
  return s;
}

/// Same seeds and data under each policy.
inline std::vector<PolicyResult> compare_policies(const ExperimentConfig& cfg,
                                                  const std::vector<WeightPolicy>& policies,
                                                  const RunOptions& opt = {}) {
  if (policies.empty()) throw ConfigError("compare: no policies given");
  const fs::path root = cfg.output_dir;
  if (opt.write_files) ensure_writable_dir(root);
  std::vector<PolicyResult> out;
  for (const auto& p : policies) {
    ExperimentConfig c = cfg;
    c.train.loss.policy = p;
    c.output_dir = (root / safe_name(p.name())).string();
    auto r = run_experiment(c, opt);
    out.push_back({p, r, count_curves(r)});
  }
  if (opt.write_files) {
    auto table = open_for_write(root / "compare.csv");
    table << "policy,test_acc_ema_mean,test_acc_ema_std,test_acc_live_mean,r_hc_mean\n";
    for (const auto& p : out)
      table << p.policy.name() << ',' << format_double(p.result.test_acc_ema().mean) << ','
            << format_double(p.result.test_acc_ema().std) << ','
            << format_double(p.result.test_acc_live().mean) << ','
            << format_double(p.result.r_hc().mean) << '\n';
    auto curves = open_for_write(root / "count_curves.csv");
    curves << "policy,step,agree_count,threshold_count,correct_count\n";
    for (const auto& p : out)
      for (const auto& c : p.curves)
        curves << p.policy.name() << ',' << c.step << ',' << format_double(c.agree) << ','
               << format_double(c.threshold) << ',' << format_double(c.correct) << '\n';
  }
  return out;
}

inline const std::vector<double>& default_lambda_values() {
  static const std::vector<double> v{0.0, 1e-7, 1e-6, 1e-5, 1e-4};
  return v;
}

struct LambdaResult {
  double lambda = 0.0;
  ExperimentResult result;
};

inline std::vector<LambdaResult> lambda_sweep(const ExperimentConfig& cfg,
                                              const std::vector<double>& values,
                                              const RunOptions& opt = {}) {
  if (values.empty()) throw ConfigError("sweep-lambda: no values given");
  for (double v : values)
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ConfigError("sweep-lambda: lambda must be finite and >= 0, got " + format_double(v));
  const fs::path root = cfg.output_dir;
  if (opt.write_files) ensure_writable_dir(root);
  std::vector<LambdaResult> out;
  for (double v : values) {
    ExperimentConfig c = cfg;
    c.train.loss.lambda = v;
    c.output_dir = (root / ("lambda_" + format_double(v))).string();
    out.push_back({v, run_experiment(c, opt)});
  }
  if (opt.write_files) {
    auto table = open_for_write(root / "lambda_sweep.csv");
    table << "lambda,test_acc_ema_mean,test_acc_ema_std,test_acc_live_mean\n";
    for (const auto& l : out)
      table << format_double(l.lambda) << ',' << format_double(l.result.test_acc_ema().mean) << ','
            << format_double(l.result.test_acc_ema().std) << ','
            << format_double(l.result.test_acc_live().mean) << '\n';
  }
  return out;
}

}  // namespace normatch::harness
