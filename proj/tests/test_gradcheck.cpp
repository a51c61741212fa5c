#include <gtest/gtest.h>

#include <set>
#include <tuple>

#include "nncheck/gradcheck.hpp"

using namespace nncheck;

namespace {

LayerSpec layer(std::size_t in, std::size_t out, Activation act, InitScheme w, InitScheme b) {
  LayerSpec s;
  s.fan_in = in;
  s.fan_out = out;
  s.activation = act;
  s.weight_init = w;
  s.bias_init = b;
  return s;
}

Tensor batch_of(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Tensor t({rows, cols});
  for (double& x : t.values()) x = rng.gaussian();
  return t;
}

}  // namespace

TEST(RelativeError, FloorAppliesToTinyGradients) {
  EXPECT_NEAR(detail::relative_error(1.0, 1.1, 1e-4), 1.0 / 11.0, 1e-15);
  EXPECT_DOUBLE_EQ(detail::relative_error(1e-9, 2e-9, 1e-4), 1e-9 / 1e-4);
  EXPECT_EQ(detail::relative_error(0.0, 0.0, 1e-4), 0.0);
}

TEST(GradientCheck, SmoothModelChecksEveryCoordinate) {
  TrainConfig tc;
  tc.loss = LossKind::cross_entropy;
  tc.regularization = {Regularization::Kind::l2, 0.1};
  const Model m = build_model({layer(3, 4, Activation::tanh, InitScheme::gaussian(0.0, 0.7),
                                     InitScheme::gaussian(0.0, 0.2)),
                               layer(4, 3, Activation::identity, InitScheme::gaussian(0.0, 0.7),
                                     InitScheme::constant(0.0))},
                              tc);
  Tensor y({2, 3});
  y.at(0, 1) = 1.0;
  y.at(1, 2) = 1.0;
  const GradCheckResult r = gradient_check(m, batch_of(2, 3, 1), y);
  EXPECT_EQ(r.checked, 3u * 4 + 4 + 4 * 3 + 3);
  EXPECT_EQ(r.skipped, 0u);
  EXPECT_TRUE(r.passed(GradCheckOptions{}));
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradientCheck, ReluAtItsKinkIsSkipped) {
  // Zero weights and biases put every pre-activation exactly on the kink.
  const Model m = build_model({layer(2, 3, Activation::relu, InitScheme::constant(0.0),
                                     InitScheme::constant(0.0))},
                              TrainConfig{});
  const GradCheckResult r = gradient_check(m, batch_of(2, 2, 2), Tensor({2, 3}, 0.5));
  EXPECT_EQ(r.checked, 0u);
  EXPECT_EQ(r.skipped, 2u * 3 + 3);
}

TEST(GradientCheck, KinkCrossedByEpsilonIsSkipped) {
  // z = w with x = 1 and b = 0: w = 5e-6 lies outside the 1e-7 margin but
  // changes sign under +-1e-5.
  GradCheckOptions opt;
  opt.kink_margin = 1e-7;
  const Model m = build_model({layer(1, 1, Activation::relu, InitScheme::constant(5e-6),
                                     InitScheme::constant(0.0))},
                              TrainConfig{});
  const GradCheckResult r = gradient_check(m, Tensor({1, 1}, 1.0), Tensor({1, 1}, 1.0), opt);
  EXPECT_EQ(r.skipped, 2u);
  EXPECT_EQ(r.checked, 0u);
}

TEST(GradientCheck, L1SkipsWeightsAtZeroOnly) {
  TrainConfig tc;
  tc.regularization = {Regularization::Kind::l1, 0.05};
  const Model m = build_model({layer(3, 2, Activation::identity, InitScheme::constant(0.0),
                                     InitScheme::constant(0.1))},
                              tc);
  const GradCheckResult r = gradient_check(m, batch_of(2, 3, 3), Tensor({2, 2}, 0.3));
  EXPECT_EQ(r.skipped, 6u);
  EXPECT_EQ(r.checked, 2u);
  EXPECT_TRUE(r.passed(GradCheckOptions{}));
}

TEST(GradientCheck, DisconnectedLayerIsNotChecked) {
  LayerSpec frozen = layer(3, 3, Activation::tanh, InitScheme::gaussian(0.0, 0.5),
                           InitScheme::constant(0.0));
  frozen.connected = false;
  const Model m = build_model({frozen, layer(3, 1, Activation::identity,
                                              InitScheme::gaussian(0.0, 0.5),
                                              InitScheme::constant(0.0))},
                              TrainConfig{});
  const GradCheckResult r = gradient_check(m, batch_of(2, 3, 4), Tensor({2, 1}, 0.2));
  EXPECT_EQ(r.checked, 4u);
}

TEST(GradientCheck, DropoutIsRejected) {
  TrainConfig tc;
  tc.dropout_prob = 0.5;
  const Model m = build_model({layer(2, 2, Activation::tanh, InitScheme::gaussian(0.0, 0.5),
                                     InitScheme::constant(0.0))},
                              tc);
  EXPECT_THROW(gradient_check(m, batch_of(1, 2, 5), Tensor({1, 2})), UsageError);
}

TEST(GradientAudit, CoversEveryCombinationAndPasses) {
  const GradAudit audit = run_gradient_audit(1);
  ASSERT_EQ(audit.cases.size(), kAllActivations.size() * kAllLosses.size() * kAllRegularizations.size());
  std::set<std::tuple<Activation, LossKind, Regularization::Kind>> seen;
  std::size_t checked = 0;
  for (const auto& c : audit.cases) {
    seen.insert({c.activation, c.loss, c.regularization});
    checked += c.result.checked;
    EXPECT_TRUE(c.result.passed(audit.options))
        << to_string(c.activation) << "/" << to_string(c.loss) << "/" << to_string(c.regularization)
        << " " << c.result.max_rel_error << " at " << c.result.worst;
    EXPECT_GE(c.widths.size(), 2u);
    EXPECT_LE(c.widths.size(), 4u);
    for (std::size_t w : c.widths) {
      EXPECT_GE(w, 1u);
      EXPECT_LE(w, 8u);
    }
    if (c.loss == LossKind::cross_entropy) {
      EXPECT_GE(c.widths.back(), 2u);
    }
  }
  EXPECT_EQ(seen.size(), audit.cases.size());
  EXPECT_GT(checked, 1000u);
  EXPECT_TRUE(audit.passed());
}

TEST(GradientAudit, OtherSeedsPass) {
  for (std::uint64_t seed : {2u, 3u}) {
    const GradAudit audit = run_gradient_audit(seed);
    EXPECT_EQ(audit.failures(), 0u) << seed;
  }
}

TEST(GradientAudit, ImpossibleToleranceFails) {
  GradCheckOptions opt;
  opt.tolerance = 0.0;
  EXPECT_FALSE(run_gradient_audit(1, 1, opt).passed());
}
