#pragma once

// One seeded training run: data built from the config, a TrainState, and the
// metrics accumulated so far. Everything is a pure function of (config, seed).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

#include "normatch/data.hpp"
#include "normatch/errors.hpp"
#include "normatch/harness/config.hpp"
#include "normatch/harness/metrics.hpp"
#include "normatch/objective.hpp"

namespace normatch::harness {

namespace fs = std::filesystem;

/// Stream tags for make_rng; each consumer of randomness gets its own.
enum class Stream : std::uint64_t { train_data = 1, test_data = 2, split = 3, batch = 4 };

inline std::uint64_t derived_seed(std::uint64_t seed, Stream s) {
  auto rng = data::make_rng({seed, static_cast<std::uint64_t>(s)});
  return rng();
}

inline data::Dataset make_dataset(const DatasetSpec& d, std::size_t n, std::uint64_t seed) {
  if (d.kind == "two_moons") return data::make_two_moons(n, d.noise, seed);
  if (d.kind == "blobs") return data::make_blobs(n, d.classes, d.noise, seed);
  if (d.kind == "circles") return data::make_circles(n, d.noise, seed);
  throw ConfigError("unknown dataset kind '" + d.kind + "'");
}

/// Everything a run trains and evaluates on, a pure function of (config, seed).
struct RunData {
  data::Dataset train;
  data::Dataset test;
  data::LabelSplit split;
};

inline RunData build_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  RunData d;
  d.train = make_dataset(cfg.dataset, cfg.dataset.n, derived_seed(seed, Stream::train_data));
  d.test = make_dataset(cfg.dataset, cfg.dataset.test_n, derived_seed(seed, Stream::test_data));
  d.test.split = data::Split::test;
  d.split = data::split_labels(d.train, cfg.labels_per_class, derived_seed(seed, Stream::split));
  return d;
}

/// One seed of one configuration, advanced a step at a time.
class Run {
 public:
  Run(ExperimentConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)),
        seed_(seed),
        data_(build_data(cfg_, seed)),
        state_(TrainState::init(cfg_.model, cfg_.train, seed)) {}

  const ExperimentConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const RunData& data() const { return data_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  IntervalAccumulator& accumulator() { return acc_; }
  const IntervalAccumulator& accumulator() const { return acc_; }
  std::vector<MetricsRow>& rows() { return rows_; }
  const std::vector<MetricsRow>& rows() const { return rows_; }

  std::int64_t step() const { return state_.step; }
  bool done() const { return state_.step >= cfg_.train.total_steps; }

  /// Unlabeled batch multiplier actually used; 0 when no unlabeled data exists.
  std::size_t effective_mu() const { return data_.split.unlabeled.size() == 0 ? 0 : cfg_.mu; }

  data::BatchPair batch_for(std::int64_t step) const {
    auto rng = data::make_rng({seed_, static_cast<std::uint64_t>(Stream::batch),
                               static_cast<std::uint64_t>(step)});
    return data::sample_batches(data_.split.labeled, data_.split.unlabeled, cfg_.batch_size,
                                effective_mu(), cfg_.augment.weak(), cfg_.augment.strong(), rng);
  }

  /// Trains one step. Returns the metrics row when an eval interval closes.
  std::optional<MetricsRow> advance() {
    if (done()) throw std::logic_error("Run::advance: training already finished");
    acc_.add(train_step(state_, batch_for(state_.step), cfg_.train));
    const bool boundary = state_.step % static_cast<std::int64_t>(cfg_.eval_interval) == 0;
    if (!boundary && !done()) return std::nullopt;
    MetricsRow row = evaluate();
    acc_.fill(row);
    acc_ = {};
    rows_.push_back(row);
    return row;
  }

  /// Evaluation columns of a row for the current weights.
  MetricsRow evaluate() const {
    MetricsRow row;
    row.seed = seed_;
    row.step = state_.step;
    const Models ema = state_.ema_models();
    row.train_acc_live = eval_accuracy(state_.models, data_.train);
    row.train_acc_ema = eval_accuracy(ema, data_.train);
    row.test_acc_live = eval_accuracy(state_.models, data_.test);
    row.test_acc_ema = eval_accuracy(ema, data_.test);
    row.r_hc = high_confidence_ratio(ema, data_.split.unlabeled.features);
    return row;
  }

 private:
  ExperimentConfig cfg_;
  std::uint64_t seed_;
  RunData data_;
  TrainState state_;
  IntervalAccumulator acc_;
  std::vector<MetricsRow> rows_;
};

}  // namespace normatch::harness
