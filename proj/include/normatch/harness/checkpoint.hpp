#pragma once

// Checkpoint file layout:
//   8 bytes   magic "NMCKPT01"
//   8 bytes   header length, little-endian uint64
//   header    UTF-8 JSON: version, config, seed, step, adam_steps, and the
//             ordered list of arrays {name, shape}
//   payload   every array in header order as little-endian float64
//
// Batch randomness is drawn from make_rng({seed, tag, step}), so (seed, step)
// is the complete generator state.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "normatch/errors.hpp"
#include "normatch/harness/config.hpp"
#include "normatch/harness/run.hpp"

namespace normatch::harness {

inline constexpr int kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'N', 'M', 'C', 'K', 'P', 'T', '0', '1'};

/// Parsed checkpoint contents.
struct Checkpoint {
  int version = kCheckpointVersion;
  ExperimentConfig config;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::int64_t adam_steps = 0;
  std::map<std::string, Array> arrays;
};

namespace detail {

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap64(v);
  return v;
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  v = to_le(v);
  os.write(reinterpret_cast<const char*>(&v), 8);
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v;
  std::memcpy(&v, p, 8);
  return to_le(v);
}

inline void put_f64(std::ostream& os, double d) { put_u64(os, std::bit_cast<std::uint64_t>(d)); }

inline Array rows_to_array(const std::vector<MetricsRow>& rows) {
  constexpr std::size_t w = 20;
  Array a = Array::zeros({rows.size(), w});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const double v[w] = {static_cast<double>(r.step), r.loss_total, r.loss_sup_d, r.loss_unsup_d,
                         r.loss_sup_n, r.loss_unsup_n, r.loss_pl_n, r.train_acc_live,
                         r.train_acc_ema, r.test_acc_live, r.test_acc_ema, r.pseudo_label_acc,
                         r.unlabeled_per_step, r.tau_one, r.agree, r.above_threshold, r.correct,
                         r.tau_mean, r.r_hc, static_cast<double>(r.interval_steps)};
    for (std::size_t j = 0; j < w; ++j) a(i, j) = v[j];
  }
  return a;
}

inline std::vector<MetricsRow> array_to_rows(const Array& a, std::uint64_t seed) {
  if (a.shape.size() != 2 || a.cols() != 20) throw CheckpointError("checkpoint: bad metrics.rows shape");
  std::vector<MetricsRow> rows(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto& r = rows[i];
    r.seed = seed;
    r.step = static_cast<std::int64_t>(a(i, 0));
    double* f[] = {&r.loss_total, &r.loss_sup_d, &r.loss_unsup_d, &r.loss_sup_n, &r.loss_unsup_n,
                   &r.loss_pl_n, &r.train_acc_live, &r.train_acc_ema, &r.test_acc_live,
                   &r.test_acc_ema, &r.pseudo_label_acc, &r.unlabeled_per_step, &r.tau_one,
                   &r.agree, &r.above_threshold, &r.correct, &r.tau_mean, &r.r_hc};
    for (std::size_t j = 0; j < 18; ++j) *f[j] = a(i, j + 1);
    r.interval_steps = static_cast<std::int64_t>(a(i, 19));
  }
  return rows;
}

inline Array da_history_array(const DaState& da) {
  Array a = Array::zeros({da.history.size(), da.classes()});
  for (std::size_t i = 0; i < da.history.size(); ++i)
    for (std::size_t j = 0; j < da.classes(); ++j) a(i, j) = da.history[i].at(j);
  return a;
}

inline const Array& need(const Checkpoint& ck, const std::string& name, const Shape& shape) {
  auto it = ck.arrays.find(name);
  if (it == ck.arrays.end()) throw CheckpointError("checkpoint: missing array '" + name + "'");
  if (it->second.shape != shape)
    throw CheckpointError("checkpoint: array '" + name + "' has shape " + shape_str(it->second.shape) +
                          ", expected " + shape_str(shape));
  return it->second;
}

}  // namespace detail

/// Every array needed to resume `run` exactly.
inline std::map<std::string, Array> checkpoint_arrays(const Run& run) {
  std::map<std::string, Array> out;
  auto& st = const_cast<TrainState&>(run.state());
  for (const auto& [name, p] : st.models.all_params()) out.emplace("param/" + name, *p);
  for (const auto& [name, a] : st.sgd.velocity) out.emplace("sgd.velocity/" + name, a);
  for (const auto& [name, a] : st.adamw.first_moment) out.emplace("adamw.m/" + name, a);
  for (const auto& [name, a] : st.adamw.second_moment) out.emplace("adamw.v/" + name, a);
  for (const auto& [name, a] : st.ema.shadow) out.emplace("ema/" + name, a);
  out.emplace("da.history", detail::da_history_array(st.da));
  const auto acc = run.accumulator().to_vector();
  out.emplace("metrics.accumulator", Array({acc.size()}, acc));
  out.emplace("metrics.rows", detail::rows_to_array(run.rows()));
  return out;
}

inline void write_checkpoint(std::ostream& os, const Run& run) {
  const auto arrays = checkpoint_arrays(run);
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [name, a] : arrays) list.push_back({{"name", name}, {"shape", a.shape}});
  const nlohmann::json header{{"version", kCheckpointVersion},
                              {"config", config_to_json(run.config())},
                              {"seed", run.seed()},
                              {"step", run.step()},
                              {"adam_steps", run.state().adamw.steps},
                              {"arrays", list}};
  const std::string text = header.dump();
  os.write(kCheckpointMagic, 8);
  detail::put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, a] : arrays)
    for (double v : a.values) detail::put_f64(os, v);
}

/// Writes to a temporary file first so an interrupted save never leaves a torn checkpoint.
inline void save_checkpoint(const std::filesystem::path& path, const Run& run) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot write '" + tmp.string() + "'");
    write_checkpoint(out, run);
    if (!out.flush()) throw CheckpointError("checkpoint: write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 6) != 0)
    throw CheckpointError("checkpoint: not a checkpoint file (bad magic)");
  if (std::memcmp(bytes.data() + 6, kCheckpointMagic + 6, 2) != 0)
    throw CheckpointError("checkpoint: unsupported format revision '" + bytes.substr(6, 2) + "'");
  const std::uint64_t hlen = detail::get_u64(bytes.data() + 8);
  if (hlen > bytes.size() - 16) throw CheckpointError("checkpoint: truncated header");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: corrupted header: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.version = h.at("version").get<int>();
    if (ck.version != kCheckpointVersion)
      throw CheckpointError("checkpoint: version " + std::to_string(ck.version) + " not supported (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    ck.seed = h.at("seed").get<std::uint64_t>();
    ck.step = h.at("step").get<std::int64_t>();
    ck.adam_steps = h.at("adam_steps").get<std::int64_t>();
    try {
      ck.config = config_from_json(h.at("config"));
    } catch (const ConfigError& e) {
      throw CheckpointError(std::string("checkpoint: bad config snapshot: ") + e.what());
    }
    std::size_t offset = 16 + hlen;
    for (const auto& entry : h.at("arrays")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const std::size_t n = numel(shape);
      if (n > (bytes.size() - offset) / 8)
        throw CheckpointError("checkpoint: truncated payload at array '" + name + "'");
      std::vector<double> values(n);
      for (std::size_t i = 0; i < n; ++i)
        values[i] = std::bit_cast<double>(detail::get_u64(bytes.data() + offset + 8 * i));
      offset += 8 * n;
      if (!ck.arrays.emplace(name, Array(shape, std::move(values))).second)
        throw CheckpointError("checkpoint: duplicate array '" + name + "'");
    }
    if (offset != bytes.size()) throw CheckpointError("checkpoint: trailing bytes after payload");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

/// Rebuilds a run at the checkpointed step. Data is regenerated from the
/// config; every piece of training state comes from the file. Nothing is
/// returned unless the whole checkpoint is consistent.
inline Run restore_run(const Checkpoint& ck) {
  Run run(ck.config, ck.seed);
  auto& st = run.state();
  if (ck.step < 0 || ck.step > ck.config.train.total_steps)
    throw CheckpointError("checkpoint: step " + std::to_string(ck.step) + " outside the configured run");

  std::map<std::string, Array> params;
  for (const auto& [name, p] : st.models.all_params())
    params.emplace(name, detail::need(ck, "param/" + name, p->shape));

  auto optional_state = [&](const std::string& prefix, const nn::ParamList& list) {
    std::map<std::string, Array> out;
    for (const auto& [name, p] : list) {
      auto it = ck.arrays.find(prefix + name);
      if (it == ck.arrays.end()) continue;
      if (it->second.shape != p->shape)
        throw CheckpointError("checkpoint: array '" + prefix + name + "' has the wrong shape");
      out.emplace(name, it->second);
    }
    return out;
  };
  auto velocity = optional_state("sgd.velocity/", st.models.discriminative_params());
  auto first = optional_state("adamw.m/", st.models.flow_params());
  auto second = optional_state("adamw.v/", st.models.flow_params());

  std::map<std::string, Array> shadow;
  for (const auto& [name, p] : st.models.discriminative_params())
    shadow.emplace(name, detail::need(ck, "ema/" + name, p->shape));

  auto hist_it = ck.arrays.find("da.history");
  if (hist_it == ck.arrays.end()) throw CheckpointError("checkpoint: missing array 'da.history'");
  const Array& hist = hist_it->second;
  if (hist.shape.size() != 2 || hist.cols() != st.da.classes() || hist.rows() > st.da.window)
    throw CheckpointError("checkpoint: bad da.history shape " + shape_str(hist.shape));

  auto acc_it = ck.arrays.find("metrics.accumulator");
  if (acc_it == ck.arrays.end()) throw CheckpointError("checkpoint: missing array 'metrics.accumulator'");
  IntervalAccumulator acc;
  try {
    acc = IntervalAccumulator::from_vector(acc_it->second.values);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  auto rows_it = ck.arrays.find("metrics.rows");
  if (rows_it == ck.arrays.end()) throw CheckpointError("checkpoint: missing array 'metrics.rows'");
  auto rows = detail::array_to_rows(rows_it->second, ck.seed);

  // Everything validated; commit.
  for (const auto& [name, p] : st.models.all_params()) *p = params.at(name);
  st.sgd.velocity = std::move(velocity);
  st.adamw.first_moment = std::move(first);
  st.adamw.second_moment = std::move(second);
  st.adamw.steps = ck.adam_steps;
  st.ema.shadow = std::move(shadow);
  st.da.history.clear();
  for (std::size_t i = 0; i < hist.rows(); ++i)
    st.da.history.emplace_back(hist.values.begin() + static_cast<std::ptrdiff_t>(i * hist.cols()),
                               hist.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * hist.cols()));
  st.step = ck.step;
  run.accumulator() = acc;
  run.rows() = std::move(rows);
  return run;
}

}  // namespace normatch::harness
