// SPDX-License-Identifier: Apache-2.0
//
// The verification routines. Every check is a pure function from observed
// quantities plus thresholds to zero or more issues; state that spans steps
// (activation buffers, loss history) lives in small value types that the
// caller owns.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "nncheck/data.hpp"
#include "nncheck/nnengine.hpp"
#include "nncheck/numstat.hpp"

namespace nncheck {

/// Identifier carried by an Issue. Declaration order is the tie-break order
/// for issues raised at the same step.
enum class CheckId {
  untrained_parameters,
  unbreaking_symmetry,
  exploding_parameters,
  unstable_learning_high,
  unstable_learning_slow,
  activation_out_of_range,
  saturated_layer,
  dead_layer,
  cannot_fit_small_sample,
  zero_loss,
  non_decreasing_loss,
  diverging_loss,
  loss_fluctuation,
  nan_gradient,
  inf_gradient,
  vanishing_gradient,
  exploding_gradient,
};

inline constexpr std::array kAllCheckIds = {
    CheckId::untrained_parameters,    CheckId::unbreaking_symmetry,
    CheckId::exploding_parameters,    CheckId::unstable_learning_high,
    CheckId::unstable_learning_slow,  CheckId::activation_out_of_range,
    CheckId::saturated_layer,         CheckId::dead_layer,
    CheckId::cannot_fit_small_sample, CheckId::zero_loss,
    CheckId::non_decreasing_loss,     CheckId::diverging_loss,
    CheckId::loss_fluctuation,        CheckId::nan_gradient,
    CheckId::inf_gradient,            CheckId::vanishing_gradient,
    CheckId::exploding_gradient,
};

inline std::string_view to_string(CheckId id) {
  switch (id) {
    case CheckId::untrained_parameters: return "untrained_parameters";
    case CheckId::unbreaking_symmetry: return "unbreaking_symmetry";
    case CheckId::exploding_parameters: return "exploding_parameters";
    case CheckId::unstable_learning_high: return "unstable_learning_high";
    case CheckId::unstable_learning_slow: return "unstable_learning_slow";
    case CheckId::activation_out_of_range: return "activation_out_of_range";
    case CheckId::saturated_layer: return "saturated_layer";
    case CheckId::dead_layer: return "dead_layer";
    case CheckId::cannot_fit_small_sample: return "cannot_fit_small_sample";
    case CheckId::zero_loss: return "zero_loss";
    case CheckId::non_decreasing_loss: return "non_decreasing_loss";
    case CheckId::diverging_loss: return "diverging_loss";
    case CheckId::loss_fluctuation: return "loss_fluctuation";
    case CheckId::nan_gradient: return "nan_gradient";
    case CheckId::inf_gradient: return "inf_gradient";
    case CheckId::vanishing_gradient: return "vanishing_gradient";
    case CheckId::exploding_gradient: return "exploding_gradient";
  }
  return "?";
}

inline CheckId check_id_from_string(std::string_view s) {
  for (CheckId id : kAllCheckIds) {
    if (to_string(id) == s) return id;
  }
  throw UsageError("unknown check id: " + std::string(s));
}

/// A verification routine, the unit that hooks schedule. One routine may
/// raise several CheckIds (update_ratio raises high and slow).
enum class Routine {
  untrained_parameters,
  weight_symmetry,
  parameter_divergence,
  update_ratio,
  activation_range,
  saturation,
  dead_units,
  small_sample,
  zero_loss,
  slow_loss,
  diverging_loss,
  loss_fluctuation,
  gradient_stability,
};

inline constexpr std::array kAllRoutines = {
    Routine::untrained_parameters, Routine::weight_symmetry, Routine::parameter_divergence,
    Routine::update_ratio,         Routine::activation_range, Routine::saturation,
    Routine::dead_units,           Routine::small_sample,     Routine::zero_loss,
    Routine::slow_loss,            Routine::diverging_loss,   Routine::loss_fluctuation,
    Routine::gradient_stability,
};

inline std::string_view to_string(Routine r) {
  switch (r) {
    case Routine::untrained_parameters: return "untrained_parameters";
    case Routine::weight_symmetry: return "weight_symmetry";
    case Routine::parameter_divergence: return "parameter_divergence";
    case Routine::update_ratio: return "update_ratio";
    case Routine::activation_range: return "activation_range";
    case Routine::saturation: return "saturation";
    case Routine::dead_units: return "dead_units";
    case Routine::small_sample: return "small_sample";
    case Routine::zero_loss: return "zero_loss";
    case Routine::slow_loss: return "slow_loss";
    case Routine::diverging_loss: return "diverging_loss";
    case Routine::loss_fluctuation: return "loss_fluctuation";
    case Routine::gradient_stability: return "gradient_stability";
  }
  return "?";
}

inline Routine routine_from_string(std::string_view s) {
  for (Routine r : kAllRoutines) {
    if (to_string(r) == s) return r;
  }
  throw UsageError("unknown routine: " + std::string(s));
}

inline Routine routine_of(CheckId id) {
  switch (id) {
    case CheckId::untrained_parameters: return Routine::untrained_parameters;
    case CheckId::unbreaking_symmetry: return Routine::weight_symmetry;
    case CheckId::exploding_parameters: return Routine::parameter_divergence;
    case CheckId::unstable_learning_high:
    case CheckId::unstable_learning_slow: return Routine::update_ratio;
    case CheckId::activation_out_of_range: return Routine::activation_range;
    case CheckId::saturated_layer: return Routine::saturation;
    case CheckId::dead_layer: return Routine::dead_units;
    case CheckId::cannot_fit_small_sample: return Routine::small_sample;
    case CheckId::zero_loss: return Routine::zero_loss;
    case CheckId::non_decreasing_loss: return Routine::slow_loss;
    case CheckId::diverging_loss: return Routine::diverging_loss;
    case CheckId::loss_fluctuation: return Routine::loss_fluctuation;
    case CheckId::nan_gradient:
    case CheckId::inf_gradient:
    case CheckId::vanishing_gradient:
    case CheckId::exploding_gradient: return Routine::gradient_stability;
  }
  return Routine::zero_loss;
}

/// Thresholds for every routine. The update-ratio bounds and the bin count
/// come from the usual recommendations; the remaining defaults are tuned so
/// the bundled healthy baseline fires nothing.
struct CheckConfig {
  double symmetry_variance_eps = 1e-8;
  double divergence_p75_threshold = 1e3;
  double update_ratio_low = -4.0;
  double update_ratio_high = -1.0;
  std::size_t saturation_bins = 10;
  double saturation_rho_threshold = 0.95;
  double saturated_layer_ratio_threshold = 0.5;
  double dead_output_eps = 1e-7;
  double dead_layer_ratio_threshold = 0.5;
  std::size_t buffer_size = 50;
  double zero_loss_eps = 1e-8;
  double loss_rate_floor = 0.999;
  std::size_t slow_loss_window = 100;
  double abs_loss_rate_ceiling = 2.0;
  std::size_t fluctuation_window = 10;
  std::size_t fluctuation_min_alternations = 6;
  double grad_ratio_min = -3.0;
  double grad_ratio_max = 3.0;
  double grad_q25_floor = 1e-12;
  double grad_q75_ceiling = 1e6;
  std::size_t untrained_steps = 20;
  std::size_t small_sample_size = 8;
  std::size_t small_sample_max_steps = 2000;
  double small_sample_target_loss = 1e-3;

  void validate() const {
    auto fail = [](const char* what) { throw UsageError(std::string("check config: ") + what); };
    if (!(update_ratio_low < update_ratio_high)) fail("update_ratio_low must be < update_ratio_high");
    if (!(grad_ratio_min < grad_ratio_max)) fail("grad_ratio_min must be < grad_ratio_max");
    if (!(symmetry_variance_eps > 0 && dead_output_eps > 0 && zero_loss_eps > 0 &&
          grad_q25_floor > 0)) {
      fail("epsilons must be > 0");
    }
    if (saturation_bins < 10) fail("saturation_bins must be >= 10");
    if (buffer_size < 1) fail("buffer_size must be >= 1");
    if (slow_loss_window < 1) fail("slow_loss_window must be >= 1");
    if (fluctuation_window < 3) fail("fluctuation_window must be >= 3");
    if (untrained_steps < 1) fail("untrained_steps must be >= 1");
    if (small_sample_size < 1) fail("small_sample_size must be >= 1");
  }
};

/// Name and member of one CheckConfig field; drives config-file I/O and CLI
/// overrides.
struct ThresholdField {
  const char* name;
  std::variant<double CheckConfig::*, std::size_t CheckConfig::*> member;
};

inline const std::vector<ThresholdField>& threshold_fields() {
  static const std::vector<ThresholdField> fields = {
      {"symmetry_variance_eps", &CheckConfig::symmetry_variance_eps},
      {"divergence_p75_threshold", &CheckConfig::divergence_p75_threshold},
      {"update_ratio_low", &CheckConfig::update_ratio_low},
      {"update_ratio_high", &CheckConfig::update_ratio_high},
      {"saturation_bins", &CheckConfig::saturation_bins},
      {"saturation_rho_threshold", &CheckConfig::saturation_rho_threshold},
      {"saturated_layer_ratio_threshold", &CheckConfig::saturated_layer_ratio_threshold},
      {"dead_output_eps", &CheckConfig::dead_output_eps},
      {"dead_layer_ratio_threshold", &CheckConfig::dead_layer_ratio_threshold},
      {"buffer_size", &CheckConfig::buffer_size},
      {"zero_loss_eps", &CheckConfig::zero_loss_eps},
      {"loss_rate_floor", &CheckConfig::loss_rate_floor},
      {"slow_loss_window", &CheckConfig::slow_loss_window},
      {"abs_loss_rate_ceiling", &CheckConfig::abs_loss_rate_ceiling},
      {"fluctuation_window", &CheckConfig::fluctuation_window},
      {"fluctuation_min_alternations", &CheckConfig::fluctuation_min_alternations},
      {"grad_ratio_min", &CheckConfig::grad_ratio_min},
      {"grad_ratio_max", &CheckConfig::grad_ratio_max},
      {"grad_q25_floor", &CheckConfig::grad_q25_floor},
      {"grad_q75_ceiling", &CheckConfig::grad_q75_ceiling},
      {"untrained_steps", &CheckConfig::untrained_steps},
      {"small_sample_size", &CheckConfig::small_sample_size},
      {"small_sample_max_steps", &CheckConfig::small_sample_max_steps},
      {"small_sample_target_loss", &CheckConfig::small_sample_target_loss},
  };
  return fields;
}

enum class Severity { warning, error };

inline std::string_view to_string(Severity s) { return s == Severity::warning ? "warning" : "error"; }

struct Issue {
  CheckId check = CheckId::zero_loss;
  Severity severity = Severity::warning;
  std::int64_t step = 0;
  std::string locus = "global";
  /// Every number quoted in `message`.
  std::map<std::string, double> measurement;
  std::string message;

  friend bool operator==(const Issue& a, const Issue& b) {
    if (a.check != b.check || a.severity != b.severity || a.step != b.step ||
        a.locus != b.locus || a.message != b.message ||
        a.measurement.size() != b.measurement.size()) {
      return false;
    }
    for (auto ia = a.measurement.begin(), ib = b.measurement.begin(); ia != a.measurement.end();
         ++ia, ++ib) {
      if (ia->first != ib->first) return false;
      const double x = ia->second;
      const double y = ib->second;
      if (!(x == y || (std::isnan(x) && std::isnan(y)))) return false;
    }
    return true;
  }
};

/// Fixed-format rendering used in every message: %.6g, with nan/inf spelled
/// out.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

/// Ring buffer holding one neuron's most recent outputs.
class ActivationBuffer {
 public:
  explicit ActivationBuffer(std::size_t capacity = 50) : capacity_(capacity) {
    if (capacity_ < 1) throw UsageError("activation buffer capacity must be >= 1");
    ring_.reserve(capacity_);
  }

  void push(double v) {
    if (ring_.size() < capacity_) {
      ring_.push_back(v);
    } else {
      ring_[head_] = v;
      head_ = (head_ + 1) % capacity_;
    }
  }

  /// Oldest first.
  std::vector<double> values() const {
    std::vector<double> out;
    out.reserve(ring_.size());
    for (std::size_t i = 0; i < ring_.size(); ++i) out.push_back(ring_[(head_ + i) % ring_.size()]);
    return out;
  }

  std::size_t size() const noexcept { return ring_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  bool full() const noexcept { return ring_.size() == capacity_; }
  bool empty() const noexcept { return ring_.empty(); }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<double> ring_;
};

/// Recent loss values plus the lowest loss ever observed. NaN losses enter
/// the history but never the minimum.
class LossTracker {
 public:
  explicit LossTracker(std::size_t capacity = 101) : capacity_(std::max<std::size_t>(capacity, 2)) {}

  void push(double loss) {
    history_.push_back(loss);
    if (history_.size() > capacity_) history_.pop_front();
    if (!std::isnan(loss) && loss < lowest_) lowest_ = loss;
    ++observed_;
  }

  std::size_t size() const noexcept { return history_.size(); }
  std::size_t observed() const noexcept { return observed_; }
  std::size_t capacity() const noexcept { return capacity_; }
  /// +Inf until a non-NaN loss has been observed.
  double lowest_loss_value() const noexcept { return lowest_; }
  double current() const { return history_.back(); }

  /// The last n losses, oldest first.
  std::vector<double> last(std::size_t n) const {
    n = std::min(n, history_.size());
    return {history_.end() - static_cast<std::ptrdiff_t>(n), history_.end()};
  }

 private:
  std::size_t capacity_;
  std::deque<double> history_;
  double lowest_ = std::numeric_limits<double>::infinity();
  std::size_t observed_ = 0;
};

/// Tracker sized for the loss-history windows of `cfg`.
inline LossTracker make_loss_tracker(const CheckConfig& cfg) {
  return LossTracker(std::max(cfg.slow_loss_window, cfg.fluctuation_window) + 1);
}

namespace detail {

inline Issue make_issue(CheckId id, std::int64_t step, std::string locus,
                        std::map<std::string, double> measurement, std::string message) {
  Issue issue;
  issue.check = id;
  issue.step = step;
  issue.locus = std::move(locus);
  issue.measurement = std::move(measurement);
  issue.message = std::move(message);
  return issue;
}

inline bool all_positive_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x) && x > 0.0; });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parameter checks

/// Fires when the last untrained_steps + 1 observations of a tensor carry
/// the same content digest.
inline std::optional<Issue> check_untrained_digests(std::span<const std::uint64_t> observations,
                                                    const std::string& locus,
                                                    const CheckConfig& cfg, std::int64_t step) {
  const std::size_t needed = cfg.untrained_steps + 1;
  if (observations.size() < needed) return std::nullopt;
  const auto window = observations.last(needed);
  for (std::uint64_t d : window) {
    if (d != window.front()) return std::nullopt;
  }
  const auto n = static_cast<double>(needed);
  return detail::make_issue(CheckId::untrained_parameters, step, locus, {{"observations", n}},
                            locus + " unchanged across the last " + format_number(n) +
                                " observations; the tensor is not being trained");
}

/// Snapshot form: fires iff the tensor is bit-identical across
/// `previous` (the last untrained_steps snapshots) and `current`.
inline std::optional<Issue> check_untrained_params(std::span<const Tensor> previous,
                                                   const Tensor& current,
                                                   const std::string& locus,
                                                   const CheckConfig& cfg, std::int64_t step) {
  if (previous.size() < cfg.untrained_steps) return std::nullopt;
  for (const Tensor& snap : previous.last(cfg.untrained_steps)) {
    if (snap.shape() != current.shape()) throw UsageError("snapshot shape mismatch");
    if (!snap.bit_equal(current)) return std::nullopt;
  }
  const auto n = static_cast<double>(cfg.untrained_steps + 1);
  return detail::make_issue(CheckId::untrained_parameters, step, locus, {{"observations", n}},
                            locus + " unchanged across the last " + format_number(n) +
                                " observations; the tensor is not being trained");
}

/// Weight variance at or below the epsilon means neurons were never
/// differentiated. Single-element tensors are skipped.
inline std::optional<Issue> check_symmetry(double weight_variance, std::size_t count,
                                           const std::string& locus, const CheckConfig& cfg,
                                           std::int64_t step) {
  if (count <= 1 || !(weight_variance <= cfg.symmetry_variance_eps)) return std::nullopt;
  return detail::make_issue(
      CheckId::unbreaking_symmetry, step, locus,
      {{"variance", weight_variance}, {"threshold", cfg.symmetry_variance_eps}},
      locus + " variance " + format_number(weight_variance) + " <= " +
          format_number(cfg.symmetry_variance_eps) +
          "; weights are (nearly) identical and cannot break neuron symmetry");
}
inline std::optional<Issue> check_symmetry(const TensorSummary& s, const std::string& locus,
                                           const CheckConfig& cfg, std::int64_t step) {
  return check_symmetry(s.variance, s.count, locus, cfg, step);
}
inline std::optional<Issue> check_symmetry(const Tensor& weights, const std::string& locus,
                                           const CheckConfig& cfg, std::int64_t step) {
  return check_symmetry(variance(weights), weights.size(), locus, cfg, step);
}

/// Upper quartile of |params| above the threshold, or any infinite element.
inline std::optional<Issue> check_divergence(double abs_p75, bool has_inf,
                                             const std::string& locus, const CheckConfig& cfg,
                                             std::int64_t step) {
  if (!(abs_p75 > cfg.divergence_p75_threshold) && !has_inf) return std::nullopt;
  return detail::make_issue(
      CheckId::exploding_parameters, step, locus,
      {{"abs_p75", abs_p75}, {"threshold", cfg.divergence_p75_threshold}},
      locus + " upper quartile of |values| is " + format_number(abs_p75) + " (threshold " +
          format_number(cfg.divergence_p75_threshold) + (has_inf ? ", infinite values present" : "") +
          "); parameters are diverging");
}
inline std::optional<Issue> check_divergence(const TensorSummary& s, const std::string& locus,
                                             const CheckConfig& cfg, std::int64_t step) {
  return check_divergence(s.abs_p75, s.has_inf, locus, cfg, step);
}
inline std::optional<Issue> check_divergence(const Tensor& params, const std::string& locus,
                                             const CheckConfig& cfg, std::int64_t step) {
  const std::vector<double> mags = abs_values(params.values());
  return check_divergence(percentile(mags, 75.0), detail::any_inf(params.values()), locus, cfg,
                          step);
}

/// log10(mean|post - pre| / mean|pre|) must stay strictly inside
/// (update_ratio_low, update_ratio_high).
inline std::optional<Issue> check_update_ratio(const Tensor& pre_update, const Tensor& post_update,
                                               const std::string& locus, const CheckConfig& cfg,
                                               std::int64_t step) {
  if (pre_update.shape() != post_update.shape()) throw UsageError("update ratio: shape mismatch");
  std::vector<double> updates(pre_update.size());
  for (std::size_t k = 0; k < updates.size(); ++k) updates[k] = post_update[k] - pre_update[k];
  const double mean_update = mean_abs(updates);
  const double mean_param = mean_abs(pre_update);
  if (mean_update == 0.0 && mean_param == 0.0) return std::nullopt;
  const double ratio = std::log10(mean_update / mean_param);
  const std::map<std::string, double> m = {
      {"log10_ratio", ratio}, {"mean_abs_update", mean_update}, {"mean_abs_param", mean_param}};
  if (ratio >= cfg.update_ratio_high) {
    return detail::make_issue(CheckId::unstable_learning_high, step, locus, m,
                              locus + " log10 update ratio " + format_number(ratio) +
                                  " (mean |update| " + format_number(mean_update) +
                                  ", mean |param| " + format_number(mean_param) +
                                  "); parameters change too fast");
  }
  if (ratio <= cfg.update_ratio_low) {
    return detail::make_issue(CheckId::unstable_learning_slow, step, locus, m,
                              locus + " log10 update ratio " + format_number(ratio) +
                                  " (mean |update| " + format_number(mean_update) +
                                  ", mean |param| " + format_number(mean_param) +
                                  "); parameters change too slowly");
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Activation checks

struct ActivationRange {
  double lo;
  double hi;
};

/// Declared theoretical output range of an activation.
inline ActivationRange theoretical_range(Activation a) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  switch (a) {
    case Activation::sigmoid: return {0.0, 1.0};
    case Activation::tanh: return {-1.0, 1.0};
    case Activation::relu: return {0.0, inf};
    case Activation::leaky_relu:
    case Activation::elu:
    case Activation::identity: return {-inf, inf};
  }
  return {-inf, inf};
}

inline bool is_bounded(Activation a) { return a == Activation::sigmoid || a == Activation::tanh; }
inline bool is_relu_family(Activation a) {
  return a == Activation::relu || a == Activation::leaky_relu;
}

/// Any output strictly outside the declared closed range (NaN counts as
/// outside every range).
inline std::optional<Issue> check_activation_range(double min, double max, bool has_nan,
                                                   Activation declared, const std::string& locus,
                                                   const CheckConfig&, std::int64_t step) {
  const ActivationRange range = theoretical_range(declared);
  if (!has_nan && min >= range.lo && max <= range.hi) return std::nullopt;
  return detail::make_issue(
      CheckId::activation_out_of_range, step, locus,
      {{"min", min}, {"max", max}, {"range_lo", range.lo}, {"range_hi", range.hi}},
      locus + " outputs span [" + format_number(min) + ", " + format_number(max) +
          "] but " + std::string(to_string(declared)) + " is bounded to [" +
          format_number(range.lo) + ", " + format_number(range.hi) + "]" +
          (has_nan ? " (NaN outputs present)" : ""));
}
inline std::optional<Issue> check_activation_range(const TensorSummary& s, Activation declared,
                                                   const std::string& locus,
                                                   const CheckConfig& cfg, std::int64_t step) {
  return check_activation_range(s.min, s.max, s.has_nan, declared, locus, cfg, step);
}
inline std::optional<Issue> check_activation_range(const Tensor& acts, Activation declared,
                                                   const std::string& locus,
                                                   const CheckConfig& cfg, std::int64_t step) {
  if (acts.empty()) throw UsageError("activation range: empty tensor");
  const auto v = acts.values();
  const bool nan = detail::any_nan(v);
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = lo;
  if (!nan) {
    lo = *std::min_element(v.begin(), v.end());
    hi = *std::max_element(v.begin(), v.end());
  }
  return check_activation_range(lo, hi, nan, declared, locus, cfg, step);
}

/// Binned saturation measure: outputs are mapped affinely from the
/// activation's range onto [-1, 1] (and clamped there), split into B equal
/// bins, and rho = sum_b |mean_b| * N_b / sum_b N_b. NaN input gives NaN.
inline double saturation_rho(std::span<const double> outputs, Activation kind, std::size_t bins) {
  if (outputs.empty()) throw UsageError("saturation_rho: no outputs");
  if (!is_bounded(kind)) throw UsageError("saturation_rho: activation must be bounded");
  if (bins < 10) throw UsageError("saturation_rho: need at least 10 bins");
  std::vector<double> sums(bins, 0.0);
  std::vector<std::size_t> counts(bins, 0);
  const auto b = static_cast<double>(bins);
  for (double g : outputs) {
    if (std::isnan(g)) return std::numeric_limits<double>::quiet_NaN();
    double scaled = kind == Activation::sigmoid ? 2.0 * g - 1.0 : g;
    scaled = std::clamp(scaled, -1.0, 1.0);
    auto idx = static_cast<std::size_t>(std::floor((scaled + 1.0) / 2.0 * b));
    idx = std::min(idx, bins - 1);
    sums[idx] += scaled;
    ++counts[idx];
  }
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < bins; ++i) {
    if (counts[i] == 0) continue;
    const auto n = static_cast<double>(counts[i]);
    num += std::fabs(sums[i] / n) * n;
    den += n;
  }
  return num / den;
}

/// Fraction of neurons with rho at or above the threshold, over neurons
/// whose buffer is full. Fires when the fraction reaches the layer ratio.
inline std::optional<Issue> check_saturation(std::span<const ActivationBuffer> buffers,
                                             Activation kind, const std::string& locus,
                                             const CheckConfig& cfg, std::int64_t step) {
  if (buffers.empty()) throw UsageError("check_saturation: no buffers");
  if (!is_bounded(kind)) throw UsageError("check_saturation: activation must be bounded");
  std::size_t saturated = 0;
  for (const ActivationBuffer& buf : buffers) {
    if (!buf.full()) return std::nullopt;
    const std::vector<double> v = buf.values();
    if (saturation_rho(v, kind, cfg.saturation_bins) >= cfg.saturation_rho_threshold) ++saturated;
  }
  const double ratio = static_cast<double>(saturated) / static_cast<double>(buffers.size());
  if (!(ratio >= cfg.saturated_layer_ratio_threshold)) return std::nullopt;
  return detail::make_issue(
      CheckId::saturated_layer, step, locus,
      {{"saturated_ratio", ratio}, {"threshold", cfg.saturated_layer_ratio_threshold}},
      locus + " saturated-neuron fraction " + format_number(ratio) + " (threshold " +
          format_number(cfg.saturated_layer_ratio_threshold) + ")");
}

/// A neuron is dead when its buffer is full and every stored output is
/// within dead_output_eps of zero.
inline std::optional<Issue> check_dead_units(std::span<const ActivationBuffer> buffers,
                                             Activation kind, const std::string& locus,
                                             const CheckConfig& cfg, std::int64_t step) {
  if (buffers.empty()) throw UsageError("check_dead_units: no buffers");
  if (!is_relu_family(kind)) throw UsageError("check_dead_units: activation must be relu-family");
  std::size_t dead = 0;
  for (const ActivationBuffer& buf : buffers) {
    if (!buf.full()) continue;
    const std::vector<double> v = buf.values();
    if (std::all_of(v.begin(), v.end(),
                    [&](double x) { return std::fabs(x) <= cfg.dead_output_eps; })) {
      ++dead;
    }
  }
  const double ratio = static_cast<double>(dead) / static_cast<double>(buffers.size());
  if (dead == 0 || !(ratio >= cfg.dead_layer_ratio_threshold)) return std::nullopt;
  return detail::make_issue(
      CheckId::dead_layer, step, locus,
      {{"dead_ratio", ratio}, {"threshold", cfg.dead_layer_ratio_threshold}},
      locus + " dead-neuron fraction " + format_number(ratio) + " (threshold " +
          format_number(cfg.dead_layer_ratio_threshold) + ")");
}

// ---------------------------------------------------------------------------
// Loss checks

/// Zero or negative loss.
inline std::optional<Issue> check_zero_loss(double loss, const CheckConfig& cfg,
                                            std::int64_t step) {
  if (!(std::fabs(loss) <= cfg.zero_loss_eps || loss < 0.0)) return std::nullopt;
  return detail::make_issue(CheckId::zero_loss, step, "global", {{"loss", loss}},
                            "loss is " + format_number(loss) +
                                "; a zero or negative training loss is suspicious");
}

/// Geometric mean of current/previous loss over the last slow_loss_window
/// rates. Skipped unless every loss in the window is finite and positive.
inline std::optional<Issue> check_loss_decrease(const LossTracker& tracker,
                                                const CheckConfig& cfg, std::int64_t step) {
  const std::size_t w = cfg.slow_loss_window;
  if (tracker.size() < w + 1) return std::nullopt;
  const std::vector<double> losses = tracker.last(w + 1);
  if (!detail::all_positive_finite(losses)) return std::nullopt;
  double log_sum = 0.0;
  for (std::size_t i = 1; i < losses.size(); ++i) log_sum += std::log(losses[i] / losses[i - 1]);
  const double rate = std::exp(log_sum / static_cast<double>(w));
  if (!(rate >= cfg.loss_rate_floor)) return std::nullopt;
  return detail::make_issue(CheckId::non_decreasing_loss, step, "global",
                            {{"mean_loss_rate", rate}, {"threshold", cfg.loss_rate_floor}},
                            "mean loss rate " + format_number(rate) + " >= " +
                                format_number(cfg.loss_rate_floor) +
                                " over the window; the loss is not decreasing");
}

/// current / lowest_loss_value at or above the ceiling, or a non-finite
/// current loss.
inline std::optional<Issue> check_loss_divergence(const LossTracker& tracker, double current_loss,
                                                  const CheckConfig& cfg, std::int64_t step) {
  if (!std::isfinite(current_loss)) {
    return detail::make_issue(CheckId::diverging_loss, step, "global", {{"loss", current_loss}},
                              "loss is " + format_number(current_loss) + "; training diverged");
  }
  const double lowest = tracker.lowest_loss_value();
  if (!(lowest > 0.0) || !std::isfinite(lowest)) return std::nullopt;
  const double rate = current_loss / lowest;
  if (!(rate >= cfg.abs_loss_rate_ceiling)) return std::nullopt;
  return detail::make_issue(
      CheckId::diverging_loss, step, "global",
      {{"abs_loss_rate", rate}, {"loss", current_loss}, {"lowest_loss", lowest},
       {"threshold", cfg.abs_loss_rate_ceiling}},
      "loss " + format_number(current_loss) + " is " + format_number(rate) +
          " times the lowest loss " + format_number(lowest) + " (threshold " +
          format_number(cfg.abs_loss_rate_ceiling) + "); the loss is diverging");
}

/// Sign alternations of (loss_rate - 1) across consecutive losses. The
/// sign is taken from the difference of successive losses, which agrees
/// with the rate for positive losses and stays defined once a faulty loss
/// has gone negative.
inline std::size_t count_rate_alternations(const std::vector<double>& losses) {
  std::size_t alternations = 0;
  int previous = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) {
    const double change = losses[i] - losses[i - 1];
    const int sign = change > 0.0 ? 1 : (change < 0.0 ? -1 : 0);
    if (sign != 0 && previous != 0 && sign != previous) ++alternations;
    if (sign != 0) previous = sign;
  }
  return alternations;
}

/// Skipped unless the last fluctuation_window losses are all finite.
inline std::optional<Issue> check_loss_fluctuation(const LossTracker& tracker,
                                                   const CheckConfig& cfg, std::int64_t step) {
  const std::size_t w = cfg.fluctuation_window;
  if (tracker.size() < w) return std::nullopt;
  const std::vector<double> losses = tracker.last(w);
  if (!std::all_of(losses.begin(), losses.end(), [](double x) { return std::isfinite(x); })) {
    return std::nullopt;
  }
  const std::size_t alternations = count_rate_alternations(losses);
  if (alternations < cfg.fluctuation_min_alternations) return std::nullopt;
  const auto a = static_cast<double>(alternations);
  const auto t = static_cast<double>(cfg.fluctuation_min_alternations);
  return detail::make_issue(CheckId::loss_fluctuation, step, "global",
                            {{"alternations", a}, {"threshold", t}},
                            "loss direction reversed " + format_number(a) +
                                " times within the window (threshold " + format_number(t) + ")");
}

// ---------------------------------------------------------------------------
// Gradient checks

/// first = input-side layer gradient, last = output-side layer gradient;
/// r = log10(mean|last| / mean|first|). r > grad_ratio_max means gradients
/// shrink toward the input (vanishing); r < grad_ratio_min means they grow
/// toward the input (exploding).
inline std::vector<Issue> check_gradient_stability(const TensorSummary& first,
                                                   const TensorSummary& last,
                                                   const std::string& locus,
                                                   const CheckConfig& cfg, std::int64_t step) {
  std::vector<Issue> out;
  if (std::isnan(first.abs_p25) || std::isnan(last.abs_p25)) {
    out.push_back(detail::make_issue(
        CheckId::nan_gradient, step, locus,
        {{"first_abs_p25", first.abs_p25}, {"last_abs_p25", last.abs_p25}},
        locus + " lower quartile of |gradient| is NaN (first " + format_number(first.abs_p25) +
            ", last " + format_number(last.abs_p25) + ")"));
  }
  if (std::isinf(first.abs_p75) || std::isinf(last.abs_p75)) {
    out.push_back(detail::make_issue(
        CheckId::inf_gradient, step, locus,
        {{"first_abs_p75", first.abs_p75}, {"last_abs_p75", last.abs_p75}},
        locus + " upper quartile of |gradient| is infinite (first " +
            format_number(first.abs_p75) + ", last " + format_number(last.abs_p75) + ")"));
  }
  const double ratio = std::log10(last.mean_abs / first.mean_abs);
  const std::map<std::string, double> m = {{"log10_ratio", ratio},
                                           {"first_mean_abs", first.mean_abs},
                                           {"last_mean_abs", last.mean_abs},
                                           {"first_abs_p25", first.abs_p25},
                                           {"first_abs_p75", first.abs_p75}};
  if (first.abs_p25 < cfg.grad_q25_floor || ratio > cfg.grad_ratio_max) {
    out.push_back(detail::make_issue(
        CheckId::vanishing_gradient, step, locus, m,
        locus + " gradients vanish toward the input: log10(last/first) " + format_number(ratio) +
            ", first-layer |grad| p25 " + format_number(first.abs_p25) + " (mean first " +
            format_number(first.mean_abs) + ", mean last " + format_number(last.mean_abs) +
            ", p75 first " + format_number(first.abs_p75) + ")"));
  }
  if (first.abs_p75 > cfg.grad_q75_ceiling || ratio < cfg.grad_ratio_min) {
    out.push_back(detail::make_issue(
        CheckId::exploding_gradient, step, locus, m,
        locus + " gradients explode toward the input: log10(last/first) " + format_number(ratio) +
            ", first-layer |grad| p75 " + format_number(first.abs_p75) + " (mean first " +
            format_number(first.mean_abs) + ", mean last " + format_number(last.mean_abs) +
            ", p25 first " + format_number(first.abs_p25) + ")"));
  }
  return out;
}

inline std::vector<Issue> check_gradient_stability(const Tensor& first_layer_grad,
                                                   const Tensor& last_layer_grad,
                                                   const std::string& locus,
                                                   const CheckConfig& cfg, std::int64_t step) {
  return check_gradient_stability(summarize(first_layer_grad), summarize(last_layer_grad), locus,
                                  cfg, step);
}

// ---------------------------------------------------------------------------
// Small-sample fit

using ModelFactory = std::function<Model(const TrainConfig&)>;

/// Train a copy of the configuration, with regularization and dropout off,
/// on small_sample_size points per class, full batch, for at most
/// small_sample_max_steps steps. Fires when the final loss stays above
/// small_sample_target_loss.
inline std::optional<Issue> fit_small_sample(const ModelFactory& factory, const TrainConfig& train,
                                             const Dataset& data, const CheckConfig& cfg) {
  const std::size_t classes = std::max<std::size_t>(data.num_classes, 1);
  std::vector<std::vector<std::size_t>> per_class(classes);
  for (std::size_t r = 0; r < data.size(); ++r) {
    auto& bucket = per_class[data.label(r)];
    if (bucket.size() < cfg.small_sample_size) bucket.push_back(r);
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < cfg.small_sample_size; ++i) {
    for (const auto& bucket : per_class) {
      if (bucket.size() < cfg.small_sample_size) {
        throw UsageError("fit_small_sample: too few points in some class");
      }
      rows.push_back(bucket[i]);
    }
  }
  const Dataset tiny = data.subset(rows);

  TrainConfig clone = train;
  clone.regularization = Regularization{};
  clone.dropout_prob = 0.0;
  clone.batch_size = tiny.size();
  Model model = factory(clone);
  for (std::size_t s = 0; s < cfg.small_sample_max_steps; ++s) {
    const StepResult r = train_step(model, tiny.inputs, tiny.targets);
    if (r.loss_value <= cfg.small_sample_target_loss || !std::isfinite(r.loss_value)) break;
  }
  const double final_loss = objective(model, tiny.inputs, tiny.targets);
  if (final_loss <= cfg.small_sample_target_loss) return std::nullopt;
  const auto steps = static_cast<double>(model.steps_done);
  return detail::make_issue(
      CheckId::cannot_fit_small_sample, 0, "global",
      {{"final_loss", final_loss}, {"target", cfg.small_sample_target_loss}, {"steps", steps}},
      "loss " + format_number(final_loss) + " after " + format_number(steps) +
          " steps on a tiny sample (target " + format_number(cfg.small_sample_target_loss) +
          "); the model cannot fit a small sample");
}

}  // namespace nncheck
