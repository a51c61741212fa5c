#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "nncheck/faultlab.hpp"
#include "nncheck/session.hpp"

using namespace nncheck;

namespace {

std::vector<LayerInfo> two_layers() {
  return {{"layer_0", Activation::sigmoid, 3, 4}, {"layer_1", Activation::identity, 4, 2}};
}

TraceRecord loss_only(std::int64_t step, double loss) {
  TraceRecord r;
  r.step = step;
  r.loss = loss;
  return r;
}

bool has_request(const std::vector<TelemetryRequest>& plan, std::size_t layer, TensorKind kind) {
  return std::any_of(plan.begin(), plan.end(), [&](const TelemetryRequest& t) {
    return t.layer == layer && t.kind == kind;
  });
}

}  // namespace

TEST(HookSpec, DueOnCadenceMultiples) {
  const HookSpec h{Routine::update_ratio, 10, true};
  EXPECT_FALSE(h.due(0));
  EXPECT_FALSE(h.due(9));
  EXPECT_TRUE(h.due(10));
  EXPECT_TRUE(h.due(30));
  EXPECT_FALSE((HookSpec{Routine::update_ratio, 10, false}).due(10));
}

TEST(Monitor, RejectsBadCadence) {
  auto hooks = default_hooks();
  hooks[0].cadence = 0;
  EXPECT_THROW(Monitor(two_layers(), {}, hooks, {}), UsageError);
}

TEST(Monitor, PlanFollowsCadence) {
  const Monitor m(two_layers(), {}, default_hooks(), {});
  const auto step1 = m.plan(1);
  EXPECT_TRUE(has_request(step1, 0, TensorKind::activations));
  EXPECT_FALSE(has_request(step1, 0, TensorKind::weights));
  EXPECT_FALSE(has_request(step1, 1, TensorKind::weight_gradients));
  const auto step10 = m.plan(10);
  EXPECT_TRUE(has_request(step10, 0, TensorKind::weights));
  EXPECT_TRUE(has_request(step10, 0, TensorKind::pre_update_weights));
  EXPECT_TRUE(has_request(step10, 0, TensorKind::weight_gradients));
  EXPECT_TRUE(has_request(step10, 1, TensorKind::weight_gradients));
}

TEST(Monitor, MissingTelemetryBecomesNotice) {
  Monitor m(two_layers(), {}, default_hooks(), {});
  for (std::int64_t s = 1; s <= 10; ++s) m.observe(loss_only(s, 1.0 / static_cast<double>(s)));
  EXPECT_TRUE(m.issues().empty());
  ASSERT_FALSE(m.notices().empty());
  for (const auto& n : m.notices()) EXPECT_NE(n.message.find("insufficient telemetry"), std::string::npos);
  const auto count = m.notices().size();
  for (std::int64_t s = 11; s <= 20; ++s) m.observe(loss_only(s, 1.0 / static_cast<double>(s)));
  EXPECT_EQ(m.notices().size(), count);
}

TEST(Monitor, StepsMustIncrease) {
  Monitor m(two_layers(), {}, default_hooks(), {});
  m.observe(loss_only(1, 1.0));
  EXPECT_THROW(m.observe(loss_only(1, 1.0)), UsageError);
}

TEST(Monitor, LossRoutinesOnRawRecords) {
  Monitor m(two_layers(), {}, default_hooks(), {});
  m.observe(loss_only(1, 0.5));
  m.observe(loss_only(2, -0.1));
  ASSERT_EQ(m.issues().size(), 1u);
  EXPECT_EQ(m.issues()[0].check, CheckId::zero_loss);
  EXPECT_EQ(m.issues()[0].step, 2);
  EXPECT_EQ(m.issues()[0].severity, Severity::warning);
}

TEST(Monitor, HaltModeStopsObservation) {
  Monitor m(two_layers(), {}, default_hooks(), ReactionPolicy::halt_on({Routine::zero_loss}));
  EXPECT_FALSE(m.observe(loss_only(1, 0.5)));
  EXPECT_TRUE(m.observe(loss_only(2, 0.0)));
  EXPECT_EQ(m.issues().back().severity, Severity::error);
  EXPECT_THROW(m.observe(loss_only(3, 0.5)), UsageError);
}

TEST(Monitor, IssuesWithinAStepAreOrderedByCheck) {
  Monitor m(two_layers(), {}, default_hooks(), {});
  m.observe(loss_only(1, 0.5));
  m.observe(loss_only(2, -4.0));
  m.observe(loss_only(3, std::numeric_limits<double>::quiet_NaN()));
  const auto& issues = m.issues();
  for (std::size_t i = 1; i < issues.size(); ++i) {
    const bool ordered = issues[i - 1].step < issues[i].step ||
                         (issues[i - 1].step == issues[i].step && issues[i - 1].check <= issues[i].check);
    EXPECT_TRUE(ordered) << i;
  }
  EXPECT_EQ(issues.back().check, CheckId::diverging_loss);
}

TEST(Session, SetupDeterminismAfterBuildIsUsageError) {
  const FaultScenario s = build_scenario(ScenarioId::baseline);
  Session session(s.config.checks);
  session.setup_determinism(5);
  session.build_model(s.config.layers, s.config.training);
  EXPECT_THROW(session.setup_determinism(6), UsageError);
}

TEST(Session, SeedControlsInitialWeights) {
  const FaultScenario s = build_scenario(ScenarioId::baseline);
  auto weights = [&](std::uint64_t seed) {
    Session session;
    session.setup_determinism(seed);
    return session.build_model(s.config.layers, s.config.training).layers[0].weights;
  };
  EXPECT_TRUE(weights(5).bit_equal(weights(5)));
  EXPECT_FALSE(weights(5).bit_equal(weights(6)));
}

TEST(Session, SameSeedSameReport) {
  RunConfig rc = build_scenario(ScenarioId::synthetic2).config;
  rc.steps = 60;
  const SessionReport a = run_config(rc).report;
  const SessionReport b = run_config(rc).report;
  EXPECT_EQ(a, b);
  EXPECT_EQ(emit_report(a, ReportFormat::structured), emit_report(b, ReportFormat::structured));
  RunOptions other;
  other.seed = rc.training.seed + 1;
  const SessionReport c = run_config(rc, other).report;
  EXPECT_NE(a.seed, c.seed);
  EXPECT_EQ(a.config_digest, c.config_digest);
}

TEST(Session, ParallelPathKeepsFiredChecks) {
  RunConfig rc = build_scenario(ScenarioId::synthetic2).config;
  RunOptions par;
  par.allow_parallel = true;
  EXPECT_EQ(run_config(rc).report.fired(), run_config(rc, par).report.fired());
}

TEST(Session, HaltsAtKPlusOneOnDisconnectedLayer) {
  FaultScenario s = build_scenario(ScenarioId::synthetic3);
  s.config.hooks = with_cadence(s.config.hooks, {Routine::untrained_parameters}, 1);
  s.config.policy = ReactionPolicy::halt_on({Routine::untrained_parameters});
  const SessionReport r = run_config(s.config).report;
  EXPECT_TRUE(r.halted);
  const auto k = static_cast<std::int64_t>(s.config.checks.untrained_steps);
  EXPECT_EQ(r.steps, k + 1);
  ASSERT_FALSE(r.issues.empty());
  const Issue& last = r.issues.back();
  EXPECT_EQ(last.check, CheckId::untrained_parameters);
  EXPECT_EQ(last.severity, Severity::error);
  EXPECT_EQ(last.locus.rfind("layer_1/", 0), 0u);
  EXPECT_THROW(raise_if_halted(r), CheckFailure);
}

TEST(Session, RaiseIfHaltedIgnoresWarnings) {
  SessionReport r;
  r.issues.push_back(Issue{});
  EXPECT_NO_THROW(raise_if_halted(r));
  r.halted = true;
  EXPECT_THROW(raise_if_halted(r), CheckFailure);
}

TEST(Session, ExplodingRunOrdersIssuesByStepThenCheck) {
  const RunOutcome out = run_scenario(build_scenario(ScenarioId::ips5));
  const auto& issues = out.report.issues;
  ASSERT_FALSE(issues.empty());
  for (std::size_t i = 1; i < issues.size(); ++i) {
    ASSERT_TRUE(issues[i - 1].step < issues[i].step ||
                (issues[i - 1].step == issues[i].step && issues[i - 1].check <= issues[i].check));
  }
  EXPECT_TRUE(out.fired().count(CheckId::exploding_gradient));
}

TEST(RunOutcome, CombinedPutsPreflightFirst) {
  RunOutcome out;
  Issue late;
  late.check = CheckId::zero_loss;
  late.step = 4;
  out.report.issues.push_back(late);
  out.report.fire_counts["zero_loss"] = 1;
  Issue pre;
  pre.check = CheckId::cannot_fit_small_sample;
  out.preflight = pre;
  const SessionReport c = out.combined();
  ASSERT_EQ(c.issues.size(), 2u);
  EXPECT_EQ(c.issues[0].check, CheckId::cannot_fit_small_sample);
  EXPECT_EQ(c.issues[0].step, 0);
  EXPECT_EQ(c.fire_counts.at("cannot_fit_small_sample"), 1u);
  EXPECT_EQ(out.fired().size(), 2u);
  EXPECT_TRUE(out.has_issues());
}

TEST(Report, StructuredRoundTrip) {
  RunConfig rc = build_scenario(ScenarioId::synthetic2).config;
  const SessionReport r = run_config(rc).report;
  ASSERT_FALSE(r.issues.empty());
  const std::string text = emit_report(r, ReportFormat::structured);
  const SessionReport back = parse_report(text);
  EXPECT_EQ(back, r);
  EXPECT_EQ(emit_report(back, ReportFormat::structured), text);
}

TEST(Report, NonFiniteMeasurementsRoundTrip) {
  SessionReport r;
  Issue i;
  i.check = CheckId::diverging_loss;
  i.measurement = {{"loss", std::numeric_limits<double>::quiet_NaN()},
                   {"ceiling", std::numeric_limits<double>::infinity()}};
  r.issues.push_back(i);
  EXPECT_EQ(parse_report(emit_report(r, ReportFormat::structured)), r);
}

TEST(Report, MalformedIsUsageError) {
  EXPECT_THROW(parse_report("{"), UsageError);
  EXPECT_THROW(parse_report("{\"schema\": \"other\"}"), UsageError);
}

TEST(Report, TextWithoutIssues) {
  SessionReport r;
  r.steps = 500;
  EXPECT_EQ(emit_report(r, ReportFormat::text), "0 issues in 500 steps\n");
}

TEST(Report, TextListsIssuesAndCounts) {
  SessionReport r;
  r.steps = 12;
  Issue a;
  a.check = CheckId::zero_loss;
  a.step = 3;
  a.message = "loss is 0; a zero or negative training loss is suspicious";
  Issue b;
  b.check = CheckId::dead_layer;
  b.severity = Severity::error;
  b.step = 10;
  b.locus = "layer_2/activations";
  b.message = "layer_2/activations dead-neuron fraction 1 (threshold 0.5)";
  r.issues = {a, b};
  r.fire_counts = {{"zero_loss", 1}, {"dead_layer", 1}};
  r.halted = true;
  EXPECT_EQ(emit_report(r, ReportFormat::text),
            "step 3 warning zero_loss global: loss is 0; a zero or negative training loss is "
            "suspicious\n"
            "step 10 error dead_layer layer_2/activations dead-neuron fraction 1 (threshold 0.5)\n"
            "2 issues (dead_layer: 1, zero_loss: 1) in 12 steps, halted\n");
}

TEST(Report, ConfigDigestIsStable) {
  const RunConfig a = build_scenario(ScenarioId::baseline).config;
  RunConfig b = a;
  EXPECT_EQ(check_config_digest(a.checks, a.hooks, a.policy),
            check_config_digest(b.checks, b.hooks, b.policy));
  b.checks.divergence_p75_threshold = 2e3;
  EXPECT_NE(check_config_digest(a.checks, a.hooks, a.policy),
            check_config_digest(b.checks, b.hooks, b.policy));
}
