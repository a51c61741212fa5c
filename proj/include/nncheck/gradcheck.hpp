// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference audit of the engine's backpropagation.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "nncheck/nnengine.hpp"
#include "nncheck/rng.hpp"

namespace nncheck {

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-5;
  /// Denominator floor of the relative error. Gradients smaller than this
  /// are compared on an absolute scale, where central differences at
  /// epsilon=1e-5 carry roundoff near 1e-11.
  double floor = 1e-4;
  /// Coordinates feeding a kinked unit whose pre-activation lies this close
  /// to zero are skipped, as are l1 weights this close to zero.
  double kink_margin = 1e-4;
};

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double max_rel_error = 0.0;
  /// "layer_i/weights[k]" of the worst coordinate.
  std::string worst;

  bool passed(const GradCheckOptions& opt) const { return max_rel_error <= opt.tolerance; }
};

namespace detail {

inline double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / scale;
}

/// Side of the kink for every kinked pre-activation in a forward pass.
inline std::vector<bool> kink_pattern(const Model& model, const ForwardPass& fp) {
  std::vector<bool> out;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (!has_kink(model.layers[l].spec.activation)) continue;
    for (double z : fp.pre_activations[l].values()) out.push_back(z > 0.0);
  }
  return out;
}

/// True if unit j of layer l has a pre-activation within margin of its kink.
inline bool near_kink(const Model& model, const ForwardPass& fp, std::size_t l, std::size_t j,
                      double margin) {
  if (!has_kink(model.layers[l].spec.activation)) return false;
  const Tensor& z = fp.pre_activations[l];
  for (std::size_t r = 0; r < z.rows(); ++r) {
    if (std::fabs(z.at(r, j)) < margin) return true;
  }
  return false;
}

}  // namespace detail

/// Compare backward() against central differences of objective() for every
/// parameter of every connected layer. Dropout must be off.
inline GradCheckResult gradient_check(const Model& model, const Tensor& batch, const Tensor& targets,
                                      const GradCheckOptions& opt = {}) {
  if (model.config.dropout_prob != 0.0) throw UsageError("gradient_check requires dropout 0");
  const ForwardPass base = forward(model, batch);
  const Gradients g = backward(model, base, targets);
  const std::vector<bool> pattern = detail::kink_pattern(model, base);
  const bool l1 = model.config.regularization.kind == Regularization::Kind::l1;

  GradCheckResult res;
  Model probe = model;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (!model.layers[l].spec.connected) continue;
    for (int which = 0; which < 2; ++which) {
      const bool weights = which == 0;
      Tensor& param = weights ? probe.layers[l].weights : probe.layers[l].biases;
      const Tensor& analytic = weights ? g.weights[l] : g.biases[l];
      for (std::size_t k = 0; k < param.size(); ++k) {
        const std::size_t unit = weights ? k / param.cols() : k;
        const double w = param[k];
        bool skip = detail::near_kink(model, base, l, unit, opt.kink_margin);
        if (weights && l1 && std::fabs(w) < opt.kink_margin) skip = true;

        param[k] = w + opt.epsilon;
        const ForwardPass up = forward(probe, batch);
        const double f_up = detail::evaluate_loss(probe.config, up.predictions(), targets).value +
                            detail::regularization_value(probe);
        if (detail::kink_pattern(probe, up) != pattern) skip = true;
        param[k] = w - opt.epsilon;
        const ForwardPass down = forward(probe, batch);
        const double f_down =
            detail::evaluate_loss(probe.config, down.predictions(), targets).value +
            detail::regularization_value(probe);
        if (detail::kink_pattern(probe, down) != pattern) skip = true;
        param[k] = w;

        if (skip) {
          ++res.skipped;
          continue;
        }
        ++res.checked;
        const double numeric = (f_up - f_down) / (2.0 * opt.epsilon);
        const double err = detail::relative_error(analytic[k], numeric, opt.floor);
        if (!(err <= res.max_rel_error)) {
          res.max_rel_error = err;
          res.worst = "layer_" + std::to_string(l) + (weights ? "/weights[" : "/biases[") +
                      std::to_string(k) + "]";
        }
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Random-model audit

struct GradAuditCase {
  Activation activation = Activation::identity;
  LossKind loss = LossKind::mse;
  Regularization::Kind regularization = Regularization::Kind::none;
  std::vector<std::size_t> widths;  // input width first
  GradCheckResult result;
};

struct GradAudit {
  GradCheckOptions options;
  std::vector<GradAuditCase> cases;

  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(cases.begin(), cases.end(), [&](const auto& c) {
      return !c.result.passed(options);
    }));
  }
  bool passed() const { return !cases.empty() && failures() == 0; }
};

inline constexpr std::array kAllActivations = {Activation::sigmoid,    Activation::tanh,
                                               Activation::relu,       Activation::leaky_relu,
                                               Activation::elu,        Activation::identity};
inline constexpr std::array kAllLosses = {LossKind::mse, LossKind::cross_entropy,
                                          LossKind::mutated_loss};
inline constexpr std::array kAllRegularizations = {
    Regularization::Kind::none, Regularization::Kind::l1, Regularization::Kind::l2,
    Regularization::Kind::anti_regularization};

/// Random model of 1 to 3 layers and 1 to 8 units per layer, every layer
/// using `act`, with a matching random batch and targets.
inline GradAuditCase audit_one(Activation act, LossKind loss, Regularization::Kind reg,
                               SplitMix64& rng, const GradCheckOptions& opt) {
  GradAuditCase c{act, loss, reg, {}, {}};
  const std::size_t depth = 1 + rng.below(3);
  c.widths.push_back(1 + rng.below(8));
  for (std::size_t i = 0; i < depth; ++i) c.widths.push_back(1 + rng.below(8));
  // Softmax over a single logit has zero gradient everywhere.
  if (loss == LossKind::cross_entropy && c.widths.back() < 2) c.widths.back() = 2;

  std::vector<LayerSpec> specs;
  for (std::size_t i = 0; i < depth; ++i) {
    LayerSpec s;
    s.fan_in = c.widths[i];
    s.fan_out = c.widths[i + 1];
    s.activation = act;
    s.weight_init = InitScheme::gaussian(0.0, 0.8);
    s.bias_init = InitScheme::gaussian(0.0, 0.3);
    specs.push_back(s);
  }
  TrainConfig tc;
  tc.loss = loss;
  tc.regularization = {reg, reg == Regularization::Kind::none ? 0.0 : 0.05};
  tc.seed = rng.next();
  const Model model = build_model(specs, tc);

  const std::size_t n = 1 + rng.below(4);
  Tensor batch({n, c.widths.front()});
  for (double& x : batch.values()) x = rng.gaussian(0.0, 1.0);
  Tensor targets({n, c.widths.back()});
  if (loss == LossKind::cross_entropy) {
    for (std::size_t r = 0; r < n; ++r) targets.at(r, rng.below(c.widths.back())) = 1.0;
  } else {
    for (double& y : targets.values()) y = rng.gaussian(0.0, 1.0);
  }
  c.result = gradient_check(model, batch, targets, opt);
  return c;
}

/// `per_combination` random models for every activation, loss and
/// regularization kind.
inline GradAudit run_gradient_audit(std::uint64_t seed, std::size_t per_combination = 1,
                                    const GradCheckOptions& opt = {}) {
  GradAudit audit;
  audit.options = opt;
  SplitMix64 rng(seed);
  for (Activation act : kAllActivations) {
    for (LossKind loss : kAllLosses) {
      for (Regularization::Kind reg : kAllRegularizations) {
        for (std::size_t i = 0; i < per_combination; ++i) {
          audit.cases.push_back(audit_one(act, loss, reg, rng, opt));
        }
      }
    }
  }
  return audit;
}

}  // namespace nncheck
