#pragma once

// Experiment configuration: strict JSON with a required schema_version.
// Missing keys take defaults; unknown keys are errors.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "normatch/data.hpp"
#include "normatch/errors.hpp"
#include "normatch/objective.hpp"

namespace normatch::harness {

using Json = nlohmann::json;

inline constexpr int kConfigSchemaVersion = 1;

struct DatasetSpec {
  std::string kind = "two_moons";  // two_moons | blobs | circles
  std::size_t n = 2000;
  double noise = 0.1;  // spread for blobs
  std::size_t classes = 2;
  std::size_t test_n = 1000;
};

struct AugmentSpec {
  double weak_sigma = 0.05;
  double strong_sigma = 0.20;
  double strong_rho = 0.15;
  double strong_p_drop = 0.0;

  data::AugPolicy weak() const { return data::AugPolicy::weak(weak_sigma); }
  data::AugPolicy strong() const {
    return data::AugPolicy::strong(strong_sigma, strong_rho, strong_p_drop);
  }
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::size_t labels_per_class = 4;
  std::size_t batch_size = 32;
  std::size_t mu = 7;
  std::size_t eval_interval = 100;
  std::size_t checkpoint_interval = 0;  // 0: never
  ModelSpec model;
  TrainConfig train;
  AugmentSpec augment;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir = "runs/default";

  void validate() const;
};

/// Default desk-scale run on two moons.
inline ExperimentConfig default_config() { return {}; }

namespace detail {

template <class T>
struct is_unsigned_vector : std::false_type {};
template <class U>
struct is_unsigned_vector<std::vector<U>> : std::is_unsigned<U> {};

/// Walks one JSON object, remembering which keys were read.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!it->is_number_integer())
        throw ConfigError(where() + "." + key + ": expected an integer, got " + it->dump());
      if constexpr (std::is_unsigned_v<T>)
        if (it->is_number_integer() && !it->is_number_unsigned())
          throw ConfigError(where() + "." + key + ": must be non-negative, got " + it->dump());
    }
    if constexpr (is_unsigned_vector<T>::value) {
      if (!it->is_array()) throw ConfigError(where() + "." + key + ": expected an array");
      for (const auto& e : *it)
        if (!e.is_number_unsigned())
          throw ConfigError(where() + "." + key + ": entries must be non-negative integers, got " + e.dump());
    }
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where() + "." + key + ": wrong type (" + std::string(it->type_name()) + ")");
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where() + ": unknown key '" + k + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  using detail::require;
  require(dataset.kind == "two_moons" || dataset.kind == "blobs" || dataset.kind == "circles",
          "dataset.kind must be two_moons, blobs or circles, got '" + dataset.kind + "'");
  require(dataset.kind == "blobs" || dataset.classes == 2, dataset.kind + " has exactly 2 classes");
  require(dataset.classes >= 2, "dataset.classes must be at least 2");
  require(dataset.noise >= 0.0, "dataset.noise must be >= 0");
  require(dataset.n >= 2 * dataset.classes && dataset.n % dataset.classes == 0,
          "dataset.n must be a multiple of classes and at least 2*classes");
  require(dataset.test_n >= 2 * dataset.classes && dataset.test_n % dataset.classes == 0,
          "dataset.test_n must be a multiple of classes and at least 2*classes");
  require(labels_per_class >= 1, "labels_per_class must be >= 1");
  require(labels_per_class * dataset.classes <= dataset.n,
          "labels_per_class * classes exceeds dataset.n");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(eval_interval >= 1, "eval_interval must be >= 1");
  require(train.total_steps >= 1, "total_steps must be >= 1");
  require(train.loss.lambda >= 0.0, "lambda must be >= 0");
  require(!seeds.empty(), "seeds must be nonempty");
  require(train.lr_d > 0.0 && train.lr_n > 0.0, "learning rates must be positive");
  require(train.momentum >= 0.0 && train.momentum < 1.0, "momentum must lie in [0, 1)");
  require(train.ema_decay > 0.0 && train.ema_decay < 1.0, "ema_decay must lie in (0, 1)");
  require(train.da_window >= 1, "da_window must be >= 1");
  require(augment.weak_sigma >= 0.0 && augment.weak_sigma < augment.strong_sigma,
          "augment: need 0 <= weak_sigma < strong_sigma");
  require(augment.strong_rho >= 0.0 && augment.strong_rho < 1.0, "augment.strong_rho must lie in [0, 1)");
  require(augment.strong_p_drop >= 0.0 && augment.strong_p_drop <= 1.0,
          "augment.strong_p_drop must lie in [0, 1]");
  require(model.feature_dim >= 2, "model.feature_dim must be >= 2");
  require(model.coupling_layers >= 1 && model.coupling_hidden >= 1, "model: coupling sizes must be >= 1");
  for (auto h : model.hidden) require(h >= 1, "model.hidden widths must be >= 1");
}

inline ExperimentConfig config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  auto v = j.find("schema_version");
  if (v == j.end()) throw ConfigError("config: missing required key 'schema_version'");
  if (!v->is_number_integer() || v->get<int>() != kConfigSchemaVersion)
    throw ConfigError("config: unsupported schema_version " + v->dump() + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");

  ExperimentConfig c;
  detail::StrictObject root(j, "");
  int version = 0;
  root.get("schema_version", version);

  if (const Json* d = root.child("dataset")) {
    detail::StrictObject o(*d, "dataset");
    o.get("kind", c.dataset.kind);
    o.get("n", c.dataset.n);
    o.get("noise", c.dataset.noise);
    o.get("classes", c.dataset.classes);
    o.get("test_n", c.dataset.test_n);
    o.finish();
  }
  root.get("labels_per_class", c.labels_per_class);
  root.get("batch_size", c.batch_size);
  root.get("mu", c.mu);
  root.get("total_steps", c.train.total_steps);
  root.get("eval_interval", c.eval_interval);
  root.get("checkpoint_interval", c.checkpoint_interval);
  root.get("lambda", c.train.loss.lambda);

  std::string policy = c.train.loss.policy.name();
  root.get("policy", policy);
  try {
    c.train.loss.policy = WeightPolicy::parse(policy);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("policy: ") + e.what());
  }
  std::string reading = "max_probabilities";
  root.get("min_reading", reading);
  if (reading == "max_probabilities") c.train.loss.policy.min_reading = MinReading::max_probabilities;
  else if (reading == "discriminative_class") c.train.loss.policy.min_reading = MinReading::discriminative_class;
  else throw ConfigError("min_reading must be max_probabilities or discriminative_class");

  std::string mode = "soft_da";
  root.get("pseudo_label_mode", mode);
  if (mode == "soft_da") c.train.loss.mode = PseudoLabelMode::soft_da;
  else if (mode == "one_hot") c.train.loss.mode = PseudoLabelMode::one_hot;
  else throw ConfigError("pseudo_label_mode must be soft_da or one_hot, got '" + mode + "'");

  root.get("stop_gradient", c.train.loss.stop_gradient);
  root.get("train_nfc_on_pseudo_labels", c.train.loss.train_nfc_on_pseudo_labels);
  root.get("ema_decay", c.train.ema_decay);
  root.get("da_window", c.train.da_window);

  if (const Json* o = root.child("optimizer")) {
    detail::StrictObject s(*o, "optimizer");
    s.get("lr_d", c.train.lr_d);
    s.get("momentum", c.train.momentum);
    s.get("weight_decay_d", c.train.weight_decay_d);
    s.get("lr_n", c.train.lr_n);
    s.get("adam_beta1", c.train.adam_beta1);
    s.get("adam_beta2", c.train.adam_beta2);
    s.get("adam_eps", c.train.adam_eps);
    s.get("weight_decay_n", c.train.weight_decay_n);
    s.finish();
  }
  if (const Json* o = root.child("augment")) {
    detail::StrictObject s(*o, "augment");
    s.get("weak_sigma", c.augment.weak_sigma);
    s.get("strong_sigma", c.augment.strong_sigma);
    s.get("strong_rho", c.augment.strong_rho);
    s.get("strong_p_drop", c.augment.strong_p_drop);
    s.finish();
  }
  if (const Json* o = root.child("model")) {
    detail::StrictObject s(*o, "model");
    s.get("hidden", c.model.hidden);
    s.get("feature_dim", c.model.feature_dim);
    s.get("coupling_layers", c.model.coupling_layers);
    s.get("coupling_hidden", c.model.coupling_hidden);
    s.finish();
  }
  root.get("seeds", c.seeds);
  root.get("output_dir", c.output_dir);
  root.finish();

  c.model.input_dim = 2;
  c.model.classes = c.dataset.classes;
  c.validate();
  return c;
}

inline Json config_to_json(const ExperimentConfig& c) {
  const auto& l = c.train.loss;
  return Json{
      {"schema_version", kConfigSchemaVersion},
      {"dataset",
       {{"kind", c.dataset.kind},
        {"n", c.dataset.n},
        {"noise", c.dataset.noise},
        {"classes", c.dataset.classes},
        {"test_n", c.dataset.test_n}}},
      {"labels_per_class", c.labels_per_class},
      {"batch_size", c.batch_size},
      {"mu", c.mu},
      {"total_steps", c.train.total_steps},
      {"eval_interval", c.eval_interval},
      {"checkpoint_interval", c.checkpoint_interval},
      {"lambda", l.lambda},
      {"policy", l.policy.name()},
      {"min_reading", l.policy.min_reading == MinReading::max_probabilities ? "max_probabilities"
                                                                            : "discriminative_class"},
      {"pseudo_label_mode", l.mode == PseudoLabelMode::soft_da ? "soft_da" : "one_hot"},
      {"stop_gradient", l.stop_gradient},
      {"train_nfc_on_pseudo_labels", l.train_nfc_on_pseudo_labels},
      {"ema_decay", c.train.ema_decay},
      {"da_window", c.train.da_window},
      {"optimizer",
       {{"lr_d", c.train.lr_d},
        {"momentum", c.train.momentum},
        {"weight_decay_d", c.train.weight_decay_d},
        {"lr_n", c.train.lr_n},
        {"adam_beta1", c.train.adam_beta1},
        {"adam_beta2", c.train.adam_beta2},
        {"adam_eps", c.train.adam_eps},
        {"weight_decay_n", c.train.weight_decay_n}}},
      {"augment",
       {{"weak_sigma", c.augment.weak_sigma},
        {"strong_sigma", c.augment.strong_sigma},
        {"strong_rho", c.augment.strong_rho},
        {"strong_p_drop", c.augment.strong_p_drop}}},
      {"model",
       {{"hidden", c.model.hidden},
        {"feature_dim", c.model.feature_dim},
        {"coupling_layers", c.model.coupling_layers},
        {"coupling_hidden", c.model.coupling_hidden}}},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir},
  };
}

inline ExperimentConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace normatch::harness
