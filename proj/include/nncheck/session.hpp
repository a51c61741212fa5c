// SPDX-License-Identifier: Apache-2.0
//
// Monitored training: the Monitor dispatches due checks over telemetry
// records; the Session owns determinism setup and the training loop.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nncheck/checks.hpp"
#include "nncheck/config.hpp"
#include "nncheck/data.hpp"
#include "nncheck/hooks.hpp"
#include "nncheck/nnengine.hpp"
#include "nncheck/telemetry.hpp"

namespace nncheck {

/// Raised when a routine in halt_with_error mode fires, after the report is
/// complete. Not thrown by run_monitored, which returns the halted report.
class CheckFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A routine that was due but could not run, usually because a trace lacks
/// the tensors it needs.
struct Notice {
  Routine routine = Routine::zero_loss;
  std::int64_t step = 0;
  std::string locus;
  std::string message;

  friend bool operator==(const Notice&, const Notice&) = default;
};

struct SessionReport {
  std::vector<Issue> issues;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string model_digest;
  std::int64_t steps = 0;
  std::map<std::string, std::size_t> fire_counts;
  bool halted = false;
  std::vector<Notice> notices;

  friend bool operator==(const SessionReport&, const SessionReport&) = default;

  std::set<CheckId> fired() const {
    std::set<CheckId> out;
    for (const auto& i : issues) out.insert(i.check);
    return out;
  }
};

/// Runs the scheduled routines over a stream of telemetry records. The same
/// class serves live sessions and offline trace analysis.
class Monitor {
 public:
  Monitor(std::vector<LayerInfo> layers, CheckConfig cfg, std::vector<HookSpec> hooks,
          ReactionPolicy policy)
      : layers_(std::move(layers)),
        cfg_(std::move(cfg)),
        hooks_(std::move(hooks)),
        policy_(std::move(policy)),
        tracker_(make_loss_tracker(cfg_)) {
    if (layers_.empty()) throw UsageError("monitor needs at least one layer");
    cfg_.validate();
    validate_hooks(hooks_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (buffered(l)) {
        buffers_[l] = std::vector<ActivationBuffer>(layers_[l].fan_out,
                                                    ActivationBuffer(cfg_.buffer_size));
      }
    }
  }

  const CheckConfig& config() const noexcept { return cfg_; }
  const std::vector<HookSpec>& hooks() const noexcept { return hooks_; }
  const ReactionPolicy& policy() const noexcept { return policy_; }

  bool due(Routine r, std::int64_t step) const {
    for (const auto& h : hooks_) {
      if (h.routine == r) return h.due(step);
    }
    return false;
  }

  bool enabled(Routine r) const {
    for (const auto& h : hooks_) {
      if (h.routine == r) return h.enabled;
    }
    return false;
  }

  /// Tensors the routines due at `step` need, ordered by layer then kind.
  std::vector<TelemetryRequest> plan(std::int64_t step) const {
    std::set<std::pair<std::size_t, TensorKind>> want;
    const std::size_t n = layers_.size();
    for (std::size_t l = 0; l < n; ++l) {
      if (buffered(l) || (due(Routine::activation_range, step) && range_checked(l))) {
        want.insert({l, TensorKind::activations});
      }
      if (due(Routine::untrained_parameters, step) || due(Routine::parameter_divergence, step)) {
        want.insert({l, TensorKind::weights});
        want.insert({l, TensorKind::biases});
      }
      if (due(Routine::weight_symmetry, step)) want.insert({l, TensorKind::pre_update_weights});
      if (due(Routine::update_ratio, step)) {
        want.insert({l, TensorKind::weights});
        want.insert({l, TensorKind::pre_update_weights});
      }
    }
    if (n >= 2 && due(Routine::gradient_stability, step)) {
      want.insert({0, TensorKind::weight_gradients});
      want.insert({n - 1, TensorKind::weight_gradients});
    }
    std::vector<TelemetryRequest> out;
    for (const auto& [layer, kind] : want) out.push_back({layer, kind});
    return out;
  }

  /// Every tensor of every layer.
  std::vector<TelemetryRequest> plan_all() const {
    std::vector<TelemetryRequest> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      for (TensorKind k : kAllTensorKinds) out.push_back({l, k});
    }
    return out;
  }

  /// Feed one step. Returns true when a halting routine fired.
  bool observe(const TraceRecord& rec) {
    if (halted_) throw UsageError("monitor already halted");
    if (rec.step <= last_step_) throw UsageError("records must have strictly increasing steps");
    last_step_ = rec.step;
    tracker_.push(rec.loss);
    feed_buffers(rec);

    std::vector<Issue> found;
    for (Routine r : kAllRoutines) {
      if (r == Routine::small_sample || !due(r, rec.step)) continue;
      const std::size_t before = found.size();
      run_routine(r, rec, found);
      const Severity sev =
          policy_.mode(r) == Reaction::halt_with_error ? Severity::error : Severity::warning;
      for (std::size_t i = before; i < found.size(); ++i) found[i].severity = sev;
    }
    std::stable_sort(found.begin(), found.end(),
                     [](const Issue& a, const Issue& b) { return a.check < b.check; });
    for (auto& issue : found) {
      ++fire_counts_[std::string(to_string(issue.check))];
      if (issue.severity == Severity::error) halted_ = true;
      issues_.push_back(std::move(issue));
    }
    return halted_;
  }

  bool halted() const noexcept { return halted_; }
  const std::vector<Issue>& issues() const noexcept { return issues_; }
  const std::vector<Notice>& notices() const noexcept { return notices_; }

  SessionReport report(std::uint64_t seed, std::string model_digest) const {
    SessionReport r;
    r.issues = issues_;
    r.seed = seed;
    r.config_digest = check_config_digest(cfg_, hooks_, policy_);
    r.model_digest = std::move(model_digest);
    r.steps = std::max<std::int64_t>(last_step_, 0);
    r.fire_counts = fire_counts_;
    r.halted = halted_;
    r.notices = notices_;
    return r;
  }

 private:
  Activation declared(std::size_t l) const { return layers_[l].activation; }

  bool range_checked(std::size_t l) const {
    const ActivationRange r = theoretical_range(declared(l));
    return std::isfinite(r.lo) || std::isfinite(r.hi);
  }

  bool saturation_layer(std::size_t l) const { return is_bounded(declared(l)); }
  bool dead_layer(std::size_t l) const { return is_relu_family(declared(l)); }

  bool buffered(std::size_t l) const {
    return (enabled(Routine::saturation) && saturation_layer(l)) ||
           (enabled(Routine::dead_units) && dead_layer(l));
  }

  void notice(Routine r, std::int64_t step, const std::string& locus, const std::string& what) {
    for (const auto& n : notices_) {
      if (n.routine == r && n.locus == locus) return;
    }
    notices_.push_back({r, step, locus, "insufficient telemetry: " + what});
  }

  void feed_buffers(const TraceRecord& rec) {
    for (auto& [l, bufs] : buffers_) {
      const TensorEntry* e = rec.find(l, TensorKind::activations);
      if (e == nullptr || !e->is_full()) {
        missing_acts_.insert(l);
        continue;
      }
      const Tensor& a = e->tensor();
      if (a.rank() != 2 || a.cols() != bufs.size()) {
        throw UsageError(e->name + ": activation tensor must be batch x fan_out");
      }
      const std::size_t n = a.rows();
      for (std::size_t j = 0; j < bufs.size(); ++j) {
        double sum = 0.0;
        for (std::size_t r = 0; r < n; ++r) sum += a.at(r, j);
        bufs[j].push(sum / static_cast<double>(n));
      }
    }
  }

  void add(std::vector<Issue>& out, std::optional<Issue> issue) {
    if (issue) out.push_back(std::move(*issue));
  }

  void run_routine(Routine r, const TraceRecord& rec, std::vector<Issue>& out) {
    const std::int64_t step = rec.step;
    const std::size_t n = layers_.size();
    switch (r) {
      case Routine::untrained_parameters:
        for (std::size_t l = 0; l < n; ++l) {
          for (TensorKind k : {TensorKind::weights, TensorKind::biases}) {
            const std::string locus = tensor_name(l, k);
            const TensorEntry* e = rec.find(l, k);
            if (e == nullptr || !e->is_full()) {
              notice(r, step, locus, "needs full " + std::string(to_string(k)) + " payloads");
              continue;
            }
            auto& hist = digests_[locus];
            hist.push_back(content_digest(e->tensor()));
            if (hist.size() > cfg_.untrained_steps + 1) hist.erase(hist.begin());
            add(out, check_untrained_digests(hist, locus, cfg_, step));
          }
        }
        break;
      case Routine::weight_symmetry:
        for (std::size_t l = 0; l < n; ++l) {
          const std::string locus = tensor_name(l, TensorKind::weights);
          const TensorEntry* e = rec.find(l, TensorKind::pre_update_weights);
          if (e == nullptr) {
            notice(r, step, locus, "needs pre_update_weights");
          } else if (e->is_full()) {
            add(out, check_symmetry(e->tensor(), locus, cfg_, step));
          } else {
            add(out, check_symmetry(e->summary(), locus, cfg_, step));
          }
        }
        break;
      case Routine::parameter_divergence:
        for (std::size_t l = 0; l < n; ++l) {
          for (TensorKind k : {TensorKind::weights, TensorKind::biases}) {
            const std::string locus = tensor_name(l, k);
            const TensorEntry* e = rec.find(l, k);
            if (e == nullptr) {
              notice(r, step, locus, "needs " + std::string(to_string(k)));
            } else if (e->is_full()) {
              add(out, check_divergence(e->tensor(), locus, cfg_, step));
            } else {
              add(out, check_divergence(e->summary(), locus, cfg_, step));
            }
          }
        }
        break;
      case Routine::update_ratio:
        for (std::size_t l = 0; l < n; ++l) {
          const std::string locus = tensor_name(l, TensorKind::weights);
          const TensorEntry* pre = rec.find(l, TensorKind::pre_update_weights);
          const TensorEntry* post = rec.find(l, TensorKind::weights);
          if (pre == nullptr || post == nullptr || !pre->is_full() || !post->is_full()) {
            notice(r, step, locus, "needs full weights and pre_update_weights payloads");
            continue;
          }
          add(out, check_update_ratio(pre->tensor(), post->tensor(), locus, cfg_, step));
        }
        break;
      case Routine::activation_range:
        for (std::size_t l = 0; l < n; ++l) {
          if (!range_checked(l)) continue;
          const std::string locus = tensor_name(l, TensorKind::activations);
          const TensorEntry* e = rec.find(l, TensorKind::activations);
          if (e == nullptr) {
            notice(r, step, locus, "needs activations");
          } else if (e->is_full()) {
            add(out, check_activation_range(e->tensor(), declared(l), locus, cfg_, step));
          } else {
            add(out, check_activation_range(e->summary(), declared(l), locus, cfg_, step));
          }
        }
        break;
      case Routine::saturation:
      case Routine::dead_units:
        for (auto& [l, bufs] : buffers_) {
          const bool sat = r == Routine::saturation;
          if (sat ? !saturation_layer(l) : !dead_layer(l)) continue;
          const std::string locus = tensor_name(l, TensorKind::activations);
          if (missing_acts_.count(l) != 0) {
            notice(r, step, locus, "needs full activation payloads at every step");
            continue;
          }
          add(out, sat ? check_saturation(bufs, declared(l), locus, cfg_, step)
                       : check_dead_units(bufs, declared(l), locus, cfg_, step));
        }
        break;
      case Routine::zero_loss: add(out, check_zero_loss(rec.loss, cfg_, step)); break;
      case Routine::slow_loss: add(out, check_loss_decrease(tracker_, cfg_, step)); break;
      case Routine::diverging_loss:
        add(out, check_loss_divergence(tracker_, rec.loss, cfg_, step));
        break;
      case Routine::loss_fluctuation: add(out, check_loss_fluctuation(tracker_, cfg_, step)); break;
      case Routine::gradient_stability: {
        if (n < 2) break;
        const TensorEntry* first = rec.find(0, TensorKind::weight_gradients);
        const TensorEntry* last = rec.find(n - 1, TensorKind::weight_gradients);
        const std::string locus =
            tensor_name(0, TensorKind::weight_gradients) + ":" +
            tensor_name(n - 1, TensorKind::weight_gradients);
        if (first == nullptr || last == nullptr) {
          notice(r, step, locus, "needs first and last layer weight_gradients");
          break;
        }
        for (auto& issue :
             check_gradient_stability(first->summary(), last->summary(), locus, cfg_, step)) {
          out.push_back(std::move(issue));
        }
        break;
      }
      case Routine::small_sample: break;
    }
  }

  std::vector<LayerInfo> layers_;
  CheckConfig cfg_;
  std::vector<HookSpec> hooks_;
  ReactionPolicy policy_;
  LossTracker tracker_;
  std::map<std::size_t, std::vector<ActivationBuffer>> buffers_;
  std::set<std::size_t> missing_acts_;
  std::map<std::string, std::vector<std::uint64_t>> digests_;
  std::vector<Issue> issues_;
  std::vector<Notice> notices_;
  std::map<std::string, std::size_t> fire_counts_;
  std::int64_t last_step_ = 0;
  bool halted_ = false;
};

enum class TelemetryScope {
  /// Only the tensors the due routines consume.
  needed,
  /// Every tensor of every layer at every step.
  all,
};

/// One monitored training context. Call setup_determinism (optional) before
/// build_model, then run_monitored.
class Session {
 public:
  explicit Session(CheckConfig cfg = {}) : cfg_(std::move(cfg)) { cfg_.validate(); }

  /// Fix the seed of the engine PRNG. allow_parallel=false keeps the serial
  /// numeric path and with it bit-exact reruns.
  void setup_determinism(std::uint64_t seed, bool allow_parallel = false) {
    if (built_) throw UsageError("setup_determinism must be called before build_model");
    seed_ = seed;
    allow_parallel_ = allow_parallel;
  }

  Model build_model(const std::vector<LayerSpec>& specs, TrainConfig train) {
    if (seed_) train.seed = *seed_;
    Model m = nncheck::build_model(specs, train);
    m.parallel = allow_parallel_;
    specs_ = specs;
    built_ = true;
    return m;
  }

  const CheckConfig& config() const noexcept { return cfg_; }

  /// Train for at most max_steps steps, running the scheduled routines after
  /// each one. Data exhaustion ends the run early; a halting routine ends it
  /// within the step that fired.
  SessionReport run_monitored(Model& model, BatchStream& stream, const std::vector<HookSpec>& hooks,
                              const ReactionPolicy& policy, std::int64_t max_steps,
                              RecordSink* sink = nullptr,
                              TelemetryScope scope = TelemetryScope::needed) {
    if (max_steps < 0) throw UsageError("max_steps must be >= 0");
    std::vector<LayerSpec> specs;
    for (const auto& layer : model.layers) specs.push_back(layer.spec);
    const std::string digest = model_digest(specs, model.config);
    Monitor monitor(describe_layers(model), cfg_, hooks, policy);
    if (sink != nullptr) {
      TraceHeader header;
      header.seed = model.config.seed;
      header.model_digest = digest;
      header.layers = describe_layers(model);
      sink->begin(header);
    }
    for (std::int64_t s = 0; s < max_steps; ++s) {
      std::optional<Batch> batch = stream.next(model.rng);
      if (!batch) break;
      const StepResult result = train_step(model, batch->inputs, batch->targets);
      const TraceRecord rec = make_record(
          result, scope == TelemetryScope::all ? monitor.plan_all() : monitor.plan(result.step));
      if (sink != nullptr) sink->write(rec);
      if (monitor.observe(rec)) break;
    }
    return monitor.report(model.config.seed, digest);
  }

 private:
  CheckConfig cfg_;
  std::optional<std::uint64_t> seed_;
  bool allow_parallel_ = false;
  bool built_ = false;
  std::vector<LayerSpec> specs_;
};

// ---------------------------------------------------------------------------
// Running a declarative configuration

/// Throws CheckFailure naming the first error-severity issue of a halted run.
inline void raise_if_halted(const SessionReport& r) {
  if (!r.halted) return;
  for (const auto& i : r.issues) {
    if (i.severity == Severity::error) {
      throw CheckFailure("halted at step " + std::to_string(i.step) + ": " +
                         std::string(to_string(i.check)) + " " + i.locus + ": " + i.message);
    }
  }
  throw CheckFailure("run halted");
}

struct RunOptions {
  std::optional<std::uint64_t> seed;
  bool allow_parallel = false;
  RecordSink* sink = nullptr;
  TelemetryScope scope = TelemetryScope::needed;
  /// Also run the small-sample fit before training (when its hook is on).
  bool preflight = false;
};

struct RunOutcome {
  SessionReport report;
  /// Result of the small-sample preflight, when it ran and fired.
  std::optional<Issue> preflight;
  bool preflight_ran = false;

  std::set<CheckId> fired() const {
    std::set<CheckId> out = report.fired();
    if (preflight) out.insert(preflight->check);
    return out;
  }
  bool has_issues() const { return !report.issues.empty() || preflight.has_value(); }

  /// The session report with the preflight issue, if any, placed first.
  SessionReport combined() const {
    SessionReport r = report;
    if (preflight) {
      r.issues.insert(r.issues.begin(), *preflight);
      ++r.fire_counts[std::string(to_string(preflight->check))];
    }
    return r;
  }
};

inline RunOutcome run_config(const RunConfig& rc, const RunOptions& opt = {}) {
  const Dataset data = make_dataset(rc.data);
  RunOutcome out;
  TrainConfig train = rc.training;
  if (opt.seed) train.seed = *opt.seed;
  const bool small_sample_on = std::any_of(rc.hooks.begin(), rc.hooks.end(), [](const HookSpec& h) {
    return h.routine == Routine::small_sample && h.enabled;
  });
  if (opt.preflight && small_sample_on) {
    out.preflight_ran = true;
    const auto factory = [&](const TrainConfig& t) { return build_model(rc.layers, t); };
    out.preflight = fit_small_sample(factory, train, data, rc.checks);
    if (out.preflight) {
      out.preflight->severity = rc.policy.mode(Routine::small_sample) == Reaction::halt_with_error
                                    ? Severity::error
                                    : Severity::warning;
    }
  }
  Session session(rc.checks);
  session.setup_determinism(train.seed, opt.allow_parallel);
  Model model = session.build_model(rc.layers, train);
  BatchStream stream(data, train.batch_size);
  out.report = session.run_monitored(model, stream, rc.hooks, rc.policy, rc.steps, opt.sink, opt.scope);
  return out;
}

// ---------------------------------------------------------------------------
// Report rendering

enum class ReportFormat { text, structured };

inline ReportFormat report_format_from_string(std::string_view s) {
  if (s == "text") return ReportFormat::text;
  if (s == "json" || s == "structured") return ReportFormat::structured;
  throw UsageError("unknown report format: " + std::string(s));
}

inline json to_json(const Issue& i) {
  json m = json::object();
  for (const auto& [k, v] : i.measurement) m[k] = encode_number(v);
  return {{"check_id", std::string(to_string(i.check))},
          {"severity", std::string(to_string(i.severity))},
          {"step", i.step},
          {"locus", i.locus},
          {"measurement", std::move(m)},
          {"message", i.message}};
}

inline Issue issue_from_json(const json& j) {
  Issue i;
  i.check = check_id_from_string(j.at("check_id").get<std::string>());
  const std::string sev = j.at("severity").get<std::string>();
  if (sev != "warning" && sev != "error") throw UsageError("unknown severity: " + sev);
  i.severity = sev == "warning" ? Severity::warning : Severity::error;
  i.step = j.at("step").get<std::int64_t>();
  i.locus = j.at("locus").get<std::string>();
  for (const auto& [k, v] : j.at("measurement").items()) i.measurement[k] = decode_number(v);
  i.message = j.at("message").get<std::string>();
  return i;
}

inline json to_json(const SessionReport& r) {
  json issues = json::array();
  for (const auto& i : r.issues) issues.push_back(to_json(i));
  json notices = json::array();
  for (const auto& n : r.notices) {
    notices.push_back({{"routine", std::string(to_string(n.routine))},
                       {"step", n.step},
                       {"locus", n.locus},
                       {"message", n.message}});
  }
  return {{"schema", "nncheck-report"},
          {"version", 1},
          {"seed", r.seed},
          {"config_digest", r.config_digest},
          {"model_digest", r.model_digest},
          {"steps", r.steps},
          {"halted", r.halted},
          {"fire_counts", r.fire_counts},
          {"issues", std::move(issues)},
          {"notices", std::move(notices)}};
}

inline SessionReport report_from_json(const json& j) {
  if (j.value("schema", "") != "nncheck-report") throw UsageError("not an nncheck report");
  SessionReport r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_digest = j.at("config_digest").get<std::string>();
  r.model_digest = j.at("model_digest").get<std::string>();
  r.steps = j.at("steps").get<std::int64_t>();
  r.halted = j.at("halted").get<bool>();
  r.fire_counts = j.at("fire_counts").get<std::map<std::string, std::size_t>>();
  for (const json& i : j.at("issues")) r.issues.push_back(issue_from_json(i));
  for (const json& n : j.at("notices")) {
    r.notices.push_back({routine_from_string(n.at("routine").get<std::string>()),
                         n.at("step").get<std::int64_t>(), n.at("locus").get<std::string>(),
                         n.at("message").get<std::string>()});
  }
  return r;
}

inline std::string summary_line(const SessionReport& r) {
  std::string line = std::to_string(r.issues.size()) + (r.issues.size() == 1 ? " issue" : " issues");
  if (!r.fire_counts.empty()) {
    line += " (";
    bool first = true;
    for (CheckId id : kAllCheckIds) {
      const auto it = r.fire_counts.find(std::string(to_string(id)));
      if (it == r.fire_counts.end()) continue;
      if (!first) line += ", ";
      line += it->first + ": " + std::to_string(it->second);
      first = false;
    }
    line += ")";
  }
  return line;
}

inline std::string emit_report(const SessionReport& r, ReportFormat format) {
  if (format == ReportFormat::structured) return to_json(r).dump(2) + "\n";
  std::ostringstream out;
  for (const auto& i : r.issues) {
    out << "step " << i.step << " " << to_string(i.severity) << " " << to_string(i.check) << " ";
    if (i.message.rfind(i.locus + " ", 0) == 0) {
      out << i.message << "\n";
    } else {
      out << i.locus << ": " << i.message << "\n";
    }
  }
  for (const auto& n : r.notices) {
    out << "notice: " << to_string(n.routine) << " " << n.locus << " (from step " << n.step
        << "): " << n.message << "\n";
  }
  out << summary_line(r);
  out << " in " << r.steps << (r.steps == 1 ? " step" : " steps");
  if (r.halted) out << ", halted";
  out << "\n";
  return out.str();
}

inline SessionReport parse_report(const std::string& text) {
  try {
    return report_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed report: ") + e.what());
  }
}

}  // namespace nncheck
