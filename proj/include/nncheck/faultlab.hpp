// SPDX-License-Identifier: Apache-2.0
//
// Fault-injection scenarios: a healthy baseline plus reconstructions of
// known misconfigurations and code mutations, each paired with the checks
// expected to catch it.

#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "nncheck/config.hpp"
#include "nncheck/session.hpp"

namespace nncheck {

enum class ScenarioId {
  baseline,
  ips4,
  ips5,
  ips15,
  ips17,
  mutant29,
  mutant30,
  mutant43,
  synthetic1,
  synthetic2,
  synthetic3,
  synthetic4,
};

inline constexpr std::array kAllScenarios = {
    ScenarioId::baseline,   ScenarioId::ips4,       ScenarioId::ips5,
    ScenarioId::ips15,      ScenarioId::ips17,      ScenarioId::mutant29,
    ScenarioId::mutant30,   ScenarioId::mutant43,   ScenarioId::synthetic1,
    ScenarioId::synthetic2, ScenarioId::synthetic3, ScenarioId::synthetic4,
};

inline std::string_view to_string(ScenarioId id) {
  switch (id) {
    case ScenarioId::baseline: return "baseline";
    case ScenarioId::ips4: return "ips4";
    case ScenarioId::ips5: return "ips5";
    case ScenarioId::ips15: return "ips15";
    case ScenarioId::ips17: return "ips17";
    case ScenarioId::mutant29: return "mutant29";
    case ScenarioId::mutant30: return "mutant30";
    case ScenarioId::mutant43: return "mutant43";
    case ScenarioId::synthetic1: return "synthetic1";
    case ScenarioId::synthetic2: return "synthetic2";
    case ScenarioId::synthetic3: return "synthetic3";
    case ScenarioId::synthetic4: return "synthetic4";
  }
  return "?";
}

inline ScenarioId scenario_from_string(std::string_view s) {
  for (ScenarioId id : kAllScenarios) {
    if (to_string(id) == s) return id;
  }
  throw UsageError("unknown scenario: " + std::string(s));
}

struct FaultScenario {
  ScenarioId id = ScenarioId::baseline;
  std::string fault;
  RunConfig config;
  std::set<CheckId> expected;
  /// Run the small-sample fit before training.
  bool preflight = false;
};

namespace detail {

inline LayerSpec dense(std::size_t in, std::size_t out, Activation act, double stddev) {
  LayerSpec l;
  l.fan_in = in;
  l.fan_out = out;
  l.activation = act;
  l.weight_init = InitScheme::gaussian(0.0, stddev);
  l.bias_init = InitScheme::constant(0.0);
  return l;
}

/// 16 -> 32 -> 32 -> 4 with He-style scaling.
inline std::vector<LayerSpec> baseline_layers(Activation hidden = Activation::relu) {
  return {dense(16, 32, hidden, std::sqrt(2.0 / 16.0)), dense(32, 32, hidden, std::sqrt(2.0 / 32.0)),
          dense(32, 4, Activation::identity, std::sqrt(1.0 / 32.0))};
}

inline DataSpec blobs_data(std::uint64_t seed) {
  DataSpec d;
  d.kind = DataSpec::Kind::blobs;
  d.classes = 4;
  d.per_class = 32;
  d.features = 16;
  d.separation = 3.0;
  d.noise = 1.0;
  d.seed = seed;
  return d;
}

}  // namespace detail

inline FaultScenario build_scenario(ScenarioId id) {
  FaultScenario s;
  s.id = id;
  RunConfig& rc = s.config;
  rc.data = detail::blobs_data(11);
  rc.layers = detail::baseline_layers();
  rc.training.loss = LossKind::mse;
  rc.training.learning_rate = 0.1;
  rc.training.regularization = {Regularization::Kind::l2, 1e-5};
  rc.training.batch_size = 128;
  rc.training.seed = 7;
  rc.steps = 500;

  switch (id) {
    case ScenarioId::baseline:
      s.fault = "none (healthy reference)";
      s.preflight = true;
      break;

    case ScenarioId::ips4:
      // Softmax cross-entropy stacked on sigmoid outputs: the logits are
      // confined to (0, 1) and the loss barely moves.
      s.fault = "inadequate loss: cross-entropy over sigmoid outputs";
      rc.layers = {detail::dense(16, 32, Activation::relu, std::sqrt(2.0 / 16.0)),
                   detail::dense(32, 4, Activation::sigmoid, std::sqrt(1.0 / 32.0))};
      rc.training.loss = LossKind::cross_entropy;
      rc.training.learning_rate = 0.004;
      rc.steps = 300;
      s.preflight = true;
      s.expected = {CheckId::unstable_learning_slow, CheckId::non_decreasing_loss};
      break;

    case ScenarioId::ips5:
      s.fault = "inefficient optimization: mse on large-magnitude targets, lr 0.1";
      rc.data = DataSpec{};
      rc.data.kind = DataSpec::Kind::regression;
      rc.data.samples = 128;
      rc.data.features = 8;
      rc.data.outputs = 1;
      rc.data.scale = 100.0;
      rc.data.offset = 50.0;
      rc.data.noise = 1.0;
      rc.data.seed = 5;
      rc.layers = {detail::dense(8, 32, Activation::relu, std::sqrt(2.0 / 8.0)),
                   detail::dense(32, 1, Activation::identity, std::sqrt(1.0 / 32.0))};
      rc.training.loss = LossKind::mse;
      rc.training.learning_rate = 0.1;
      rc.training.regularization = {};
      rc.training.batch_size = 32;
      rc.steps = 200;
      rc.hooks = with_cadence(rc.hooks, {Routine::update_ratio, Routine::gradient_stability}, 1);
      s.expected = {CheckId::unstable_learning_high, CheckId::exploding_gradient};
      break;

    case ScenarioId::ips15:
      s.fault = "poor initialization: every weight is the constant 1.0";
      rc.layers = {detail::dense(16, 32, Activation::relu, 0.0),
                   detail::dense(32, 32, Activation::relu, 0.0),
                   detail::dense(32, 32, Activation::relu, 0.0),
                   detail::dense(32, 4, Activation::identity, 0.0)};
      for (auto& l : rc.layers) l.weight_init = InitScheme::constant(1.0);
      rc.training.loss = LossKind::mse;
      rc.training.learning_rate = 0.01;
      rc.training.regularization = {};
      rc.steps = 100;
      rc.hooks = with_cadence(rc.hooks, {Routine::weight_symmetry, Routine::parameter_divergence}, 1);
      s.expected = {CheckId::unbreaking_symmetry, CheckId::exploding_parameters};
      break;

    case ScenarioId::ips17:
      s.fault = "learning rate far too high";
      rc.training.loss = LossKind::mse;
      rc.training.learning_rate = 1.0;
      rc.steps = 300;
      rc.hooks = with_cadence(rc.hooks, {Routine::update_ratio}, 1);
      s.expected = {CheckId::unstable_learning_high, CheckId::diverging_loss};
      break;

    case ScenarioId::mutant29:
      s.fault = "loss operator mutation: squared error replaced by signed error";
      rc.training.loss = LossKind::mutated_loss;
      rc.steps = 100;
      s.expected = {CheckId::zero_loss};
      break;

    case ScenarioId::mutant30:
      s.fault = "regularization sign flipped (anti-regularization)";
      rc.training.loss = LossKind::mse;
      rc.training.learning_rate = 0.1;
      rc.training.regularization = {Regularization::Kind::anti_regularization, 0.02};
      rc.training.batch_size = 16;
      rc.steps = 300;
      s.expected = {CheckId::unstable_learning_high, CheckId::loss_fluctuation};
      break;

    case ScenarioId::mutant43:
      s.fault = "learning-rate schedule grows geometrically with the step";
      rc.layers = {detail::dense(16, 32, Activation::tanh, std::sqrt(1.0 / 16.0)),
                   detail::dense(32, 32, Activation::tanh, std::sqrt(1.0 / 32.0)),
                   detail::dense(32, 32, Activation::tanh, std::sqrt(1.0 / 32.0)),
                   detail::dense(32, 4, Activation::identity, std::sqrt(1.0 / 32.0))};
      rc.training.loss = LossKind::mse;
      rc.training.learning_rate = 0.01;
      rc.training.lr_schedule = LrSchedule::geometric(1.05);
      rc.training.regularization = {};
      rc.steps = 300;
      s.expected = {CheckId::unstable_learning_high, CheckId::vanishing_gradient};
      break;

    case ScenarioId::synthetic1: {
      s.fault = "very deep network of sigmoid layers";
      rc.data = DataSpec{};
      rc.data.kind = DataSpec::Kind::digits;
      rc.data.classes = 10;
      rc.data.per_class = 20;
      rc.data.side = 28;
      rc.data.flip = 0.1;
      rc.data.seed = 3;
      rc.layers.clear();
      std::size_t width = 784;
      for (int i = 0; i < 10; ++i) {
        rc.layers.push_back(detail::dense(width, 100, Activation::sigmoid, 1.5));
        width = 100;
      }
      rc.layers.push_back(detail::dense(100, 10, Activation::identity, 1.5));
      rc.training.loss = LossKind::cross_entropy;
      rc.training.learning_rate = 0.1;
      rc.training.regularization = {};
      rc.training.batch_size = 8;
      rc.steps = 100;
      s.expected = {CheckId::saturated_layer};
      break;
    }

    case ScenarioId::synthetic2:
      s.fault = "huge negative biases in random neurons";
      rc.layers[0].bias_init = InitScheme::negative_outliers(0.0, 0.7, -50.0);
      rc.steps = 100;
      s.expected = {CheckId::dead_layer};
      break;

    case ScenarioId::synthetic3:
      s.fault = "hidden layer disconnected from the optimizer";
      rc.layers[1].connected = false;
      rc.steps = 250;
      s.expected = {CheckId::untrained_parameters};
      break;

    case ScenarioId::synthetic4:
      s.fault = "activation removed from a layer still declared sigmoid";
      rc.layers[0].activation = Activation::identity;
      rc.layers[0].declared_activation = Activation::sigmoid;
      rc.steps = 50;
      s.expected = {CheckId::activation_out_of_range};
      break;
  }
  return s;
}

inline RunOutcome run_scenario(const FaultScenario& s, RunOptions opt = {}) {
  opt.preflight = s.preflight;
  return run_config(s.config, opt);
}

struct CaseStudyRow {
  ScenarioId id = ScenarioId::baseline;
  std::set<CheckId> expected;
  std::set<CheckId> fired;
  std::int64_t steps = 0;
  bool pass = false;
};

struct CaseStudy {
  std::vector<CaseStudyRow> rows;
  bool pass = false;
};

/// Run each scenario and score it: fired must include expected, and the
/// baseline must fire nothing. When `thresholds` is given it replaces every
/// scenario's CheckConfig.
inline CaseStudy run_case_study(const std::vector<FaultScenario>& scenarios,
                                const std::optional<CheckConfig>& thresholds = std::nullopt) {
  CaseStudy study;
  study.pass = !scenarios.empty();
  for (FaultScenario s : scenarios) {
    if (thresholds) s.config.checks = *thresholds;
    const RunOutcome out = run_scenario(s);
    CaseStudyRow row;
    row.id = s.id;
    row.expected = s.expected;
    row.fired = out.fired();
    row.steps = out.report.steps;
    row.pass = std::includes(row.fired.begin(), row.fired.end(), row.expected.begin(),
                             row.expected.end()) &&
               (s.id != ScenarioId::baseline || row.fired.empty());
    study.pass = study.pass && row.pass;
    study.rows.push_back(std::move(row));
  }
  return study;
}

inline std::string join_checks(const std::set<CheckId>& ids) {
  if (ids.empty()) return "-";
  std::string out;
  for (CheckId id : ids) {
    if (!out.empty()) out += ",";
    out += to_string(id);
  }
  return out;
}

/// Scenario x check matrix. "E" = expected and fired, "!" = expected but
/// missing, "x" = fired without being expected.
inline std::string render_case_study(const CaseStudy& study) {
  std::string out;
  char buf[256];
  out += "columns:\n";
  for (std::size_t c = 0; c < kAllCheckIds.size(); ++c) {
    std::snprintf(buf, sizeof buf, "  %2zu %s\n", c + 1, std::string(to_string(kAllCheckIds[c])).c_str());
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%-11s", "scenario");
  out += buf;
  for (std::size_t c = 0; c < kAllCheckIds.size(); ++c) {
    std::snprintf(buf, sizeof buf, " %2zu", c + 1);
    out += buf;
  }
  out += "  result\n";
  for (const auto& row : study.rows) {
    std::snprintf(buf, sizeof buf, "%-11s", std::string(to_string(row.id)).c_str());
    out += buf;
    for (CheckId id : kAllCheckIds) {
      const bool e = row.expected.count(id) != 0;
      const bool f = row.fired.count(id) != 0;
      out += e ? (f ? "  E" : "  !") : (f ? "  x" : "  .");
    }
    out += row.pass ? "  PASS\n" : "  FAIL\n";
  }
  out += study.pass ? "case study: PASS\n" : "case study: FAIL\n";
  return out;
}

inline json to_json(const CaseStudy& study) {
  json rows = json::array();
  for (const auto& row : study.rows) {
    json expected = json::array();
    json fired = json::array();
    for (CheckId id : row.expected) expected.push_back(std::string(to_string(id)));
    for (CheckId id : row.fired) fired.push_back(std::string(to_string(id)));
    rows.push_back({{"scenario", std::string(to_string(row.id))},
                    {"expected", std::move(expected)},
                    {"fired", std::move(fired)},
                    {"steps", row.steps},
                    {"pass", row.pass}});
  }
  return {{"schema", "nncheck-casestudy"}, {"pass", study.pass}, {"rows", std::move(rows)}};
}

}  // namespace nncheck
