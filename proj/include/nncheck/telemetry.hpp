// SPDX-License-Identifier: Apache-2.0
//
// Per-step telemetry records. Live monitoring and offline trace analysis
// both consume TraceRecord, which is what makes their reports comparable.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "nncheck/config.hpp"
#include "nncheck/nnengine.hpp"
#include "nncheck/numstat.hpp"

namespace nncheck {

enum class TensorKind {
  weights,
  biases,
  weight_gradients,
  bias_gradients,
  activations,
  pre_update_weights,
  pre_update_biases,
};

inline constexpr std::array kAllTensorKinds = {
    TensorKind::weights,          TensorKind::biases,      TensorKind::weight_gradients,
    TensorKind::bias_gradients,   TensorKind::activations, TensorKind::pre_update_weights,
    TensorKind::pre_update_biases};

inline std::string_view to_string(TensorKind k) {
  switch (k) {
    case TensorKind::weights: return "weights";
    case TensorKind::biases: return "biases";
    case TensorKind::weight_gradients: return "weight_gradients";
    case TensorKind::bias_gradients: return "bias_gradients";
    case TensorKind::activations: return "activations";
    case TensorKind::pre_update_weights: return "pre_update_weights";
    case TensorKind::pre_update_biases: return "pre_update_biases";
  }
  return "?";
}

inline TensorKind tensor_kind_from_string(std::string_view s) {
  for (TensorKind k : kAllTensorKinds) {
    if (to_string(k) == s) return k;
  }
  throw UsageError("unknown tensor kind: " + std::string(s));
}

enum class PayloadMode { full, summary };

inline std::string_view to_string(PayloadMode m) { return m == PayloadMode::full ? "full" : "summary"; }

inline PayloadMode payload_from_string(std::string_view s) {
  if (s == "full") return PayloadMode::full;
  if (s == "summary") return PayloadMode::summary;
  throw UsageError("unknown payload mode: " + std::string(s));
}

inline std::string layer_name(std::size_t index) { return "layer_" + std::to_string(index); }

inline std::string tensor_name(std::size_t layer, TensorKind kind) {
  return layer_name(layer) + "/" + std::string(to_string(kind));
}

struct TensorEntry {
  std::string name;
  TensorKind kind = TensorKind::weights;
  std::size_t layer = 0;
  std::variant<Tensor, TensorSummary> payload;

  bool is_full() const { return std::holds_alternative<Tensor>(payload); }
  const Tensor& tensor() const { return std::get<Tensor>(payload); }

  /// The summary, computed from the tensor when the payload is full.
  TensorSummary summary() const {
    if (const auto* s = std::get_if<TensorSummary>(&payload)) return *s;
    return summarize(std::get<Tensor>(payload));
  }

  friend bool operator==(const TensorEntry& a, const TensorEntry& b) {
    if (a.name != b.name || a.kind != b.kind || a.layer != b.layer ||
        a.payload.index() != b.payload.index()) {
      return false;
    }
    if (a.is_full()) return a.tensor().bit_equal(b.tensor());
    return std::get<TensorSummary>(a.payload) == std::get<TensorSummary>(b.payload);
  }
};

struct TraceRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  std::vector<TensorEntry> tensors;

  const TensorEntry* find(std::size_t layer, TensorKind kind) const {
    for (const auto& t : tensors) {
      if (t.layer == layer && t.kind == kind) return &t;
    }
    return nullptr;
  }

  friend bool operator==(const TraceRecord& a, const TraceRecord& b) {
    const bool same_loss = a.loss == b.loss || (std::isnan(a.loss) && std::isnan(b.loss));
    return a.step == b.step && same_loss && a.tensors == b.tensors;
  }
};

struct LayerInfo {
  std::string name;
  /// Declared activation, the one the monitor checks against.
  Activation activation = Activation::identity;
  std::size_t fan_in = 1;
  std::size_t fan_out = 1;

  friend bool operator==(const LayerInfo&, const LayerInfo&) = default;
};

inline constexpr int kTraceVersion = 1;

struct TraceHeader {
  int version = kTraceVersion;
  std::uint64_t seed = 0;
  std::string model_digest;
  PayloadMode payload = PayloadMode::full;
  std::vector<LayerInfo> layers;

  friend bool operator==(const TraceHeader&, const TraceHeader&) = default;
};

inline std::vector<LayerInfo> describe_layers(const Model& model) {
  std::vector<LayerInfo> out;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& s = model.layers[l].spec;
    out.push_back({layer_name(l), s.declared(), s.fan_in, s.fan_out});
  }
  return out;
}

/// Receives the telemetry stream of a monitored run.
class RecordSink {
 public:
  virtual ~RecordSink() = default;
  virtual void begin(const TraceHeader& header) = 0;
  virtual void write(const TraceRecord& record) = 0;
};

/// Which tensors one step's record must carry.
struct TelemetryRequest {
  std::size_t layer;
  TensorKind kind;
};

namespace detail {

/// Copy with every NaN replaced by the canonical quiet NaN, so that
/// bit-identity tests agree with what a trace file can represent.
inline Tensor canonical_nan(const Tensor& t) {
  Tensor out = t;
  for (double& x : out.values()) {
    if (std::isnan(x)) x = std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

inline const Tensor& step_tensor(const LayerStep& ls, TensorKind kind) {
  switch (kind) {
    case TensorKind::weights: return ls.weights;
    case TensorKind::biases: return ls.biases;
    case TensorKind::weight_gradients: return ls.weight_gradients;
    case TensorKind::bias_gradients: return ls.bias_gradients;
    case TensorKind::activations: return ls.activations;
    case TensorKind::pre_update_weights: return ls.pre_update_weights;
    case TensorKind::pre_update_biases: return ls.pre_update_biases;
  }
  return ls.weights;
}

}  // namespace detail

/// Full-payload record of the requested tensors of one training step.
inline TraceRecord make_record(const StepResult& r, const std::vector<TelemetryRequest>& wanted) {
  TraceRecord rec;
  rec.step = r.step;
  rec.loss = std::isnan(r.loss_value) ? std::numeric_limits<double>::quiet_NaN() : r.loss_value;
  for (const auto& w : wanted) {
    if (w.layer >= r.layers.size()) throw UsageError("telemetry request for a missing layer");
    rec.tensors.push_back({tensor_name(w.layer, w.kind), w.kind, w.layer,
                           detail::canonical_nan(detail::step_tensor(r.layers[w.layer], w.kind))});
  }
  return rec;
}

/// Same record with every full payload replaced by its summary.
inline TraceRecord to_summary(TraceRecord rec) {
  for (auto& t : rec.tensors) {
    if (t.is_full()) t.payload = summarize(t.tensor());
  }
  return rec;
}

// ---------------------------------------------------------------------------
// JSON encoding

inline json to_json(const TensorSummary& s) {
  return {{"count", s.count},
          {"has_nan", s.has_nan},
          {"has_inf", s.has_inf},
          {"mean_abs", encode_number(s.mean_abs)},
          {"variance", encode_number(s.variance)},
          {"p25", encode_number(s.p25)},
          {"p75", encode_number(s.p75)},
          {"min", encode_number(s.min)},
          {"max", encode_number(s.max)},
          {"abs_p25", encode_number(s.abs_p25)},
          {"abs_p75", encode_number(s.abs_p75)}};
}

inline TensorSummary summary_from_json(const json& j) {
  TensorSummary s;
  s.count = j.at("count").get<std::size_t>();
  s.has_nan = j.at("has_nan").get<bool>();
  s.has_inf = j.at("has_inf").get<bool>();
  s.mean_abs = decode_number(j.at("mean_abs"));
  s.variance = decode_number(j.at("variance"));
  s.p25 = decode_number(j.at("p25"));
  s.p75 = decode_number(j.at("p75"));
  s.min = decode_number(j.at("min"));
  s.max = decode_number(j.at("max"));
  s.abs_p25 = decode_number(j.at("abs_p25"));
  s.abs_p75 = decode_number(j.at("abs_p75"));
  return s;
}

inline json to_json(const TensorEntry& t) {
  json j = {{"name", t.name}, {"kind", std::string(to_string(t.kind))}};
  if (t.is_full()) {
    const Tensor& x = t.tensor();
    json data = json::array();
    for (double v : x.values()) data.push_back(encode_number(v));
    j["shape"] = x.shape();
    j["data"] = std::move(data);
  } else {
    j["summary"] = to_json(std::get<TensorSummary>(t.payload));
  }
  return j;
}

/// Layer index encoded in a "layer_<i>/<kind>" name.
inline std::size_t parse_layer_index(const std::string& name) {
  constexpr std::string_view prefix = "layer_";
  const auto slash = name.find('/');
  if (name.rfind(prefix, 0) != 0 || slash == std::string::npos || slash == prefix.size()) {
    throw UsageError("tensor name must look like layer_<i>/<kind>: " + name);
  }
  std::size_t idx = 0;
  for (std::size_t i = prefix.size(); i < slash; ++i) {
    if (name[i] < '0' || name[i] > '9') throw UsageError("bad layer index in tensor name: " + name);
    idx = idx * 10 + static_cast<std::size_t>(name[i] - '0');
  }
  return idx;
}

inline TensorEntry entry_from_json(const json& j) {
  TensorEntry t;
  t.name = j.at("name").get<std::string>();
  t.kind = tensor_kind_from_string(j.at("kind").get<std::string>());
  t.layer = parse_layer_index(t.name);
  if (t.name != tensor_name(t.layer, t.kind)) {
    throw UsageError("tensor name does not match its kind: " + t.name);
  }
  if (j.contains("summary")) {
    t.payload = summary_from_json(j.at("summary"));
  } else {
    std::vector<double> data;
    for (const json& v : j.at("data")) data.push_back(decode_number(v));
    t.payload = Tensor(j.at("shape").get<std::vector<std::size_t>>(), std::move(data));
  }
  return t;
}

inline json to_json(const TraceRecord& r) {
  json tensors = json::array();
  for (const auto& t : r.tensors) tensors.push_back(to_json(t));
  return {{"step", r.step}, {"loss", encode_number(r.loss)}, {"tensors", std::move(tensors)}};
}

inline TraceRecord record_from_json(const json& j) {
  TraceRecord r;
  r.step = j.at("step").get<std::int64_t>();
  r.loss = decode_number(j.at("loss"));
  for (const json& t : j.at("tensors")) r.tensors.push_back(entry_from_json(t));
  return r;
}

inline json to_json(const TraceHeader& h) {
  json layers = json::array();
  for (const auto& l : h.layers) {
    layers.push_back({{"name", l.name},
                      {"activation", std::string(to_string(l.activation))},
                      {"fan_in", l.fan_in},
                      {"fan_out", l.fan_out}});
  }
  return {{"format", "nncheck-trace"},
          {"version", h.version},
          {"seed", h.seed},
          {"model_digest", h.model_digest},
          {"payload", std::string(to_string(h.payload))},
          {"layers", std::move(layers)}};
}

inline TraceHeader header_from_json(const json& j) {
  TraceHeader h;
  h.version = j.at("version").get<int>();
  h.seed = j.at("seed").get<std::uint64_t>();
  h.model_digest = j.at("model_digest").get<std::string>();
  h.payload = payload_from_string(j.at("payload").get<std::string>());
  for (const json& l : j.at("layers")) {
    h.layers.push_back({l.at("name").get<std::string>(),
                        activation_from_string(l.at("activation").get<std::string>()),
                        l.at("fan_in").get<std::size_t>(), l.at("fan_out").get<std::size_t>()});
  }
  return h;
}

}  // namespace nncheck
