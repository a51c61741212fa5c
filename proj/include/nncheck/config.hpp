// SPDX-License-Identifier: Apache-2.0
//
// Declarative run configuration (model, training, data, thresholds, hooks)
// and its JSON encoding. The same schema backs config files, the fault lab
// scenarios and the CLI.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nncheck/checks.hpp"
#include "nncheck/data.hpp"
#include "nncheck/hooks.hpp"
#include "nncheck/nnengine.hpp"

namespace nncheck {

using json = nlohmann::json;

/// Raised for malformed config files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite doubles travel as the string sentinels "NaN", "Infinity" and
// "-Infinity".
inline json encode_number(double v) {
  if (std::isnan(v)) return "NaN";
  if (std::isinf(v)) return v > 0 ? "Infinity" : "-Infinity";
  return v;
}

inline double decode_number(const json& j) {
  if (j.is_string()) {
    const auto& s = j.get_ref<const std::string&>();
    if (s == "NaN") return std::numeric_limits<double>::quiet_NaN();
    if (s == "Infinity") return std::numeric_limits<double>::infinity();
    if (s == "-Infinity") return -std::numeric_limits<double>::infinity();
    throw ConfigError("invalid number sentinel: " + s);
  }
  if (!j.is_number()) throw ConfigError("expected a number, got " + j.dump());
  return j.get<double>();
}

/// 64-bit FNV-1a of a string, as 16 hex digits.
inline std::string digest_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct DataSpec {
  enum class Kind { blobs, digits, regression };
  Kind kind = Kind::blobs;
  std::size_t classes = 4;
  std::size_t per_class = 32;
  std::size_t features = 16;
  double separation = 4.0;
  double noise = 1.0;
  std::size_t side = 28;
  double flip = 0.1;
  std::size_t samples = 128;
  std::size_t outputs = 1;
  double scale = 1.0;
  double offset = 0.0;
  std::uint64_t seed = 1;

  std::size_t input_width() const {
    if (kind == Kind::digits) return side * side;
    return features;
  }
  std::size_t output_width() const { return kind == Kind::regression ? outputs : classes; }
};

inline Dataset make_dataset(const DataSpec& d) {
  switch (d.kind) {
    case DataSpec::Kind::blobs:
      return make_blobs(d.classes, d.per_class, d.features, d.separation, d.noise, d.seed);
    case DataSpec::Kind::digits: return make_digits(d.classes, d.per_class, d.side, d.flip, d.seed);
    case DataSpec::Kind::regression:
      return make_regression(d.samples, d.features, d.outputs, d.scale, d.offset, d.noise, d.seed);
  }
  throw UsageError("unknown dataset kind");
}

/// Everything needed to reproduce one monitored run.
struct RunConfig {
  std::vector<LayerSpec> layers;
  TrainConfig training;
  DataSpec data;
  std::int64_t steps = 500;
  CheckConfig checks;
  std::vector<HookSpec> hooks = default_hooks();
  ReactionPolicy policy;
};

// ---------------------------------------------------------------------------
// Encoding

inline json to_json(const InitScheme& s) {
  switch (s.kind) {
    case InitScheme::Kind::gaussian:
      return {{"kind", "gaussian"}, {"mean", s.mean}, {"stddev", s.stddev}};
    case InitScheme::Kind::constant: return {{"kind", "constant"}, {"value", s.value}};
    case InitScheme::Kind::gaussian_with_negative_bias_outliers:
      return {{"kind", "gaussian_with_negative_bias_outliers"},
              {"stddev", s.stddev},
              {"outlier_prob", s.outlier_prob},
              {"outlier_value", s.outlier_value}};
  }
  return {};
}

inline json to_json(const LayerSpec& l) {
  json j = {{"units", l.fan_out},
            {"activation", std::string(to_string(l.activation))},
            {"weight_init", to_json(l.weight_init)},
            {"bias_init", to_json(l.bias_init)},
            {"connected", l.connected}};
  if (l.declared_activation) j["declared_activation"] = std::string(to_string(*l.declared_activation));
  return j;
}

inline json to_json(const TrainConfig& t) {
  json opt = {{"kind", t.optimizer.kind == OptimizerSpec::Kind::sgd ? "sgd" : "sgd_momentum"}};
  if (t.optimizer.kind == OptimizerSpec::Kind::sgd_momentum) opt["momentum"] = t.optimizer.momentum;
  json sched;
  switch (t.lr_schedule.kind) {
    case LrSchedule::Kind::constant: sched = {{"kind", "constant"}}; break;
    case LrSchedule::Kind::geometric: sched = {{"kind", "geometric"}, {"rate", t.lr_schedule.rate}}; break;
    case LrSchedule::Kind::custom: sched = {{"kind", "custom"}}; break;
  }
  const std::string reg(to_string(t.regularization.kind));
  return {{"loss", std::string(to_string(t.loss))},
          {"optimizer", opt},
          {"learning_rate", t.learning_rate},
          {"lr_schedule", sched},
          {"regularization", {{"kind", reg}, {"lambda", t.regularization.lambda}}},
          {"dropout", t.dropout_prob},
          {"batch_size", t.batch_size},
          {"seed", t.seed},
          {"clamp_logits", t.clamp_logits}};
}

inline json to_json(const DataSpec& d) {
  switch (d.kind) {
    case DataSpec::Kind::blobs:
      return {{"kind", "blobs"},          {"classes", d.classes}, {"per_class", d.per_class},
              {"features", d.features},   {"separation", d.separation},
              {"noise", d.noise},         {"seed", d.seed}};
    case DataSpec::Kind::digits:
      return {{"kind", "digits"}, {"classes", d.classes}, {"per_class", d.per_class},
              {"side", d.side},   {"flip", d.flip},       {"seed", d.seed}};
    case DataSpec::Kind::regression:
      return {{"kind", "regression"}, {"samples", d.samples}, {"features", d.features},
              {"outputs", d.outputs}, {"scale", d.scale},     {"offset", d.offset},
              {"noise", d.noise},     {"seed", d.seed}};
  }
  return {};
}

inline json to_json(const CheckConfig& c) {
  json j = json::object();
  for (const auto& f : threshold_fields()) {
    std::visit([&](auto member) { j[f.name] = c.*member; }, f.member);
  }
  return j;
}

inline json to_json(const std::vector<HookSpec>& hooks, const ReactionPolicy& policy) {
  json j = json::object();
  for (const auto& h : hooks) {
    j[std::string(to_string(h.routine))] = {{"cadence", h.cadence},
                                            {"enabled", h.enabled},
                                            {"mode", std::string(to_string(policy.mode(h.routine)))}};
  }
  return j;
}

inline json model_json(const std::vector<LayerSpec>& layers) {
  json arr = json::array();
  for (const auto& l : layers) arr.push_back(to_json(l));
  return {{"inputs", layers.empty() ? 0 : layers.front().fan_in}, {"layers", arr}};
}

inline json to_json(const RunConfig& rc) {
  return {{"model", model_json(rc.layers)},
          {"training", to_json(rc.training)},
          {"data", to_json(rc.data)},
          {"steps", rc.steps},
          {"checks", to_json(rc.checks)},
          {"hooks", to_json(rc.hooks, rc.policy)}};
}

/// Digest of the model architecture and training configuration.
inline std::string model_digest(const std::vector<LayerSpec>& layers, const TrainConfig& train) {
  return digest_hex(json{{"model", model_json(layers)}, {"training", to_json(train)}}.dump());
}

/// Digest of thresholds, hooks and reaction policy.
inline std::string check_config_digest(const CheckConfig& cfg, const std::vector<HookSpec>& hooks,
                                       const ReactionPolicy& policy) {
  return digest_hex(json{{"checks", to_json(cfg)}, {"hooks", to_json(hooks, policy)}}.dump());
}

// ---------------------------------------------------------------------------
// Decoding. Missing keys keep their defaults.

namespace detail {

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    if constexpr (std::is_same_v<T, double>) {
      out = decode_number(j.at(key));
    } else {
      out = j.at(key).get<T>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

inline std::string kind_of(const json& j) {
  if (!j.is_object() || !j.contains("kind") || !j.at("kind").is_string()) {
    throw ConfigError("expected an object with a string 'kind': " + j.dump());
  }
  return j.at("kind").get<std::string>();
}

}  // namespace detail

inline InitScheme init_from_json(const json& j) {
  const std::string kind = detail::kind_of(j);
  InitScheme s;
  if (kind == "gaussian") {
    s.kind = InitScheme::Kind::gaussian;
  } else if (kind == "constant") {
    s.kind = InitScheme::Kind::constant;
  } else if (kind == "gaussian_with_negative_bias_outliers") {
    s.kind = InitScheme::Kind::gaussian_with_negative_bias_outliers;
  } else {
    throw ConfigError("unknown init kind: " + kind);
  }
  detail::read_if(j, "mean", s.mean);
  detail::read_if(j, "stddev", s.stddev);
  detail::read_if(j, "value", s.value);
  detail::read_if(j, "outlier_prob", s.outlier_prob);
  detail::read_if(j, "outlier_value", s.outlier_value);
  return s;
}

inline std::vector<LayerSpec> model_from_json(const json& j) {
  std::size_t width = 0;
  detail::read_if(j, "inputs", width);
  if (width < 1) throw ConfigError("model.inputs must be >= 1");
  if (!j.contains("layers") || !j.at("layers").is_array()) throw ConfigError("model.layers missing");
  std::vector<LayerSpec> layers;
  for (const json& lj : j.at("layers")) {
    LayerSpec l;
    l.fan_in = width;
    detail::read_if(lj, "units", l.fan_out);
    std::string act = "identity";
    detail::read_if(lj, "activation", act);
    l.activation = activation_from_string(act);
    if (lj.contains("declared_activation")) {
      l.declared_activation = activation_from_string(lj.at("declared_activation").get<std::string>());
    }
    if (lj.contains("weight_init")) l.weight_init = init_from_json(lj.at("weight_init"));
    if (lj.contains("bias_init")) l.bias_init = init_from_json(lj.at("bias_init"));
    detail::read_if(lj, "connected", l.connected);
    width = l.fan_out;
    layers.push_back(l);
  }
  return layers;
}

inline TrainConfig training_from_json(const json& j) {
  TrainConfig t;
  std::string loss = "mse";
  detail::read_if(j, "loss", loss);
  if (loss == "mse") {
    t.loss = LossKind::mse;
  } else if (loss == "cross_entropy") {
    t.loss = LossKind::cross_entropy;
  } else if (loss == "mutated_loss") {
    t.loss = LossKind::mutated_loss;
  } else {
    throw ConfigError("unknown loss: " + loss);
  }
  if (j.contains("optimizer")) {
    const std::string kind = detail::kind_of(j.at("optimizer"));
    if (kind == "sgd") {
      t.optimizer.kind = OptimizerSpec::Kind::sgd;
    } else if (kind == "sgd_momentum") {
      t.optimizer.kind = OptimizerSpec::Kind::sgd_momentum;
    } else {
      throw ConfigError("unknown optimizer: " + kind);
    }
    detail::read_if(j.at("optimizer"), "momentum", t.optimizer.momentum);
  }
  detail::read_if(j, "learning_rate", t.learning_rate);
  if (j.contains("lr_schedule")) {
    const std::string kind = detail::kind_of(j.at("lr_schedule"));
    if (kind == "constant") {
      t.lr_schedule = LrSchedule{};
    } else if (kind == "geometric") {
      double rate = 1.0;
      detail::read_if(j.at("lr_schedule"), "rate", rate);
      t.lr_schedule = LrSchedule::geometric(rate);
    } else {
      throw ConfigError("lr_schedule kind not loadable from config: " + kind);
    }
  }
  if (j.contains("regularization")) {
    const json& r = j.at("regularization");
    const std::string kind = detail::kind_of(r);
    if (kind == "none") {
      t.regularization.kind = Regularization::Kind::none;
    } else if (kind == "l1") {
      t.regularization.kind = Regularization::Kind::l1;
    } else if (kind == "l2") {
      t.regularization.kind = Regularization::Kind::l2;
    } else if (kind == "anti_regularization") {
      t.regularization.kind = Regularization::Kind::anti_regularization;
    } else {
      throw ConfigError("unknown regularization: " + kind);
    }
    detail::read_if(r, "lambda", t.regularization.lambda);
  }
  detail::read_if(j, "dropout", t.dropout_prob);
  detail::read_if(j, "batch_size", t.batch_size);
  detail::read_if(j, "seed", t.seed);
  detail::read_if(j, "clamp_logits", t.clamp_logits);
  return t;
}

inline DataSpec data_from_json(const json& j) {
  const std::string kind = detail::kind_of(j);
  DataSpec d;
  if (kind == "blobs") {
    d.kind = DataSpec::Kind::blobs;
  } else if (kind == "digits") {
    d.kind = DataSpec::Kind::digits;
  } else if (kind == "regression") {
    d.kind = DataSpec::Kind::regression;
  } else {
    throw ConfigError("unknown dataset kind: " + kind);
  }
  detail::read_if(j, "classes", d.classes);
  detail::read_if(j, "per_class", d.per_class);
  detail::read_if(j, "features", d.features);
  detail::read_if(j, "separation", d.separation);
  detail::read_if(j, "noise", d.noise);
  detail::read_if(j, "side", d.side);
  detail::read_if(j, "flip", d.flip);
  detail::read_if(j, "samples", d.samples);
  detail::read_if(j, "outputs", d.outputs);
  detail::read_if(j, "scale", d.scale);
  detail::read_if(j, "offset", d.offset);
  detail::read_if(j, "seed", d.seed);
  return d;
}

/// Apply threshold values from `j` onto `cfg`; unknown names are errors.
inline void apply_thresholds(const json& j, CheckConfig& cfg) {
  if (!j.is_object()) throw ConfigError("checks must be an object");
  for (const auto& [name, value] : j.items()) {
    bool found = false;
    for (const auto& f : threshold_fields()) {
      if (name != f.name) continue;
      found = true;
      std::visit(
          [&](auto member) {
            using T = std::remove_reference_t<decltype(cfg.*member)>;
            if constexpr (std::is_same_v<T, double>) {
              cfg.*member = decode_number(value);
            } else {
              if (!value.is_number_integer() || value.get<std::int64_t>() < 0) {
                throw ConfigError(name + " must be a non-negative integer");
              }
              cfg.*member = static_cast<T>(value.get<std::int64_t>());
            }
          },
          f.member);
    }
    if (!found) throw ConfigError("unknown threshold: " + name);
  }
}

inline void apply_hooks(const json& j, std::vector<HookSpec>& hooks, ReactionPolicy& policy) {
  if (!j.is_object()) throw ConfigError("hooks must be an object");
  for (const auto& [name, spec] : j.items()) {
    const Routine r = routine_from_string(name);
    auto it = std::find_if(hooks.begin(), hooks.end(), [&](const HookSpec& h) { return h.routine == r; });
    if (it == hooks.end()) it = hooks.insert(hooks.end(), HookSpec{r, default_cadence(r), true});
    detail::read_if(spec, "cadence", it->cadence);
    detail::read_if(spec, "enabled", it->enabled);
    if (spec.contains("mode")) policy.modes[r] = reaction_from_string(spec.at("mode").get<std::string>());
  }
  validate_hooks(hooks);
}

inline RunConfig run_config_from_json(const json& j) {
  try {
    RunConfig rc;
    if (!j.contains("model")) throw ConfigError("config needs a 'model' section");
    rc.layers = model_from_json(j.at("model"));
    if (j.contains("training")) rc.training = training_from_json(j.at("training"));
    if (j.contains("data")) rc.data = data_from_json(j.at("data"));
    detail::read_if(j, "steps", rc.steps);
    if (j.contains("checks")) apply_thresholds(j.at("checks"), rc.checks);
    if (j.contains("hooks")) apply_hooks(j.at("hooks"), rc.hooks, rc.policy);
    rc.checks.validate();
    rc.training.validate();
    return rc;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  } catch (const UsageError& e) {
    throw ConfigError(e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace nncheck
