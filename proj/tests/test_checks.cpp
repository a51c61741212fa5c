#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "nncheck/checks.hpp"
#include "nncheck/data.hpp"
#include "nncheck/rng.hpp"
#include "oracles.hpp"

using namespace nncheck;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

const CheckConfig kCfg{};

Tensor filled(std::size_t n, double v) { return Tensor({n}, v); }

LossTracker tracker_of(const std::vector<double>& losses) {
  LossTracker t = make_loss_tracker(kCfg);
  for (double l : losses) t.push(l);
  return t;
}

std::vector<ActivationBuffer> buffers_of(const std::vector<std::vector<double>>& neurons,
                                         std::size_t capacity) {
  std::vector<ActivationBuffer> out;
  for (const auto& values : neurons) {
    ActivationBuffer b(capacity);
    for (double v : values) b.push(v);
    out.push_back(b);
  }
  return out;
}

}  // namespace

// Untrained parameters

TEST(Untrained, ConstantTensorForKStepsFires) {
  const Tensor w = filled(6, 0.25);
  const std::vector<Tensor> previous(kCfg.untrained_steps, w);
  const auto issue = check_untrained_params(previous, w, "layer_0/weights", kCfg, 20);
  ASSERT_TRUE(issue);
  EXPECT_EQ(issue->check, CheckId::untrained_parameters);
  EXPECT_EQ(issue->locus, "layer_0/weights");
}

TEST(Untrained, ChangeAtStepThreeDoesNotFire) {
  std::vector<Tensor> previous(kCfg.untrained_steps, filled(6, 0.25));
  previous[3][2] = 0.5;
  EXPECT_FALSE(check_untrained_params(previous, filled(6, 0.25), "w", kCfg, 20));
}

TEST(Untrained, TooFewSnapshotsDoesNotFire) {
  const std::vector<Tensor> previous(kCfg.untrained_steps - 1, filled(3, 1.0));
  EXPECT_FALSE(check_untrained_params(previous, filled(3, 1.0), "w", kCfg, 19));
}

TEST(Untrained, DigestFormNeedsKPlusOneEqualObservations) {
  std::vector<std::uint64_t> digests(kCfg.untrained_steps, 42);
  EXPECT_FALSE(check_untrained_digests(digests, "w", kCfg, 19));
  digests.push_back(42);
  EXPECT_TRUE(check_untrained_digests(digests, "w", kCfg, 20));
  digests.push_back(43);
  EXPECT_FALSE(check_untrained_digests(digests, "w", kCfg, 21));
}

// Symmetry

TEST(Symmetry, ConstantInitFires) {
  const auto issue = check_symmetry(filled(100, 0.5), "layer_1/weights", kCfg, 0);
  ASSERT_TRUE(issue);
  EXPECT_EQ(issue->check, CheckId::unbreaking_symmetry);
}

TEST(Symmetry, GaussianInitDoesNotFire) {
  SplitMix64 rng(3);
  std::vector<double> v(100);
  for (double& x : v) x = rng.gaussian(0.0, 0.1);
  EXPECT_GT(oracle::variance(v), 1e-3);
  EXPECT_FALSE(check_symmetry(Tensor::vector(v), "w", kCfg, 0));
}

TEST(Symmetry, SingleElementIsSkipped) {
  EXPECT_FALSE(check_symmetry(Tensor::vector({0.5}), "w", kCfg, 0));
}

// Divergence

TEST(Divergence, SmallParamsDoNotFire) {
  EXPECT_FALSE(check_divergence(filled(10, 0.1), "w", kCfg, 0));
}

TEST(Divergence, InfiniteElementFires) {
  Tensor t = filled(10, 0.1);
  t[4] = kInf;
  EXPECT_TRUE(check_divergence(t, "w", kCfg, 0));
}

TEST(Divergence, InterpolatedUpperQuartileAboveThreshold) {
  const std::vector<double> mags{1.0, 10.0, 100.0, 5000.0};
  EXPECT_DOUBLE_EQ(oracle::percentile(mags, 75.0), 1325.0);
  const auto issue = check_divergence(Tensor::vector({-1.0, 10.0, -100.0, 5000.0}), "w", kCfg, 7);
  ASSERT_TRUE(issue);
  EXPECT_EQ(issue->check, CheckId::exploding_parameters);
  EXPECT_DOUBLE_EQ(issue->measurement.at("abs_p75"), 1325.0);
}

// Update ratio

TEST(UpdateRatio, HundredthIsHealthy) {
  EXPECT_FALSE(check_update_ratio(filled(8, 1.0), filled(8, 1.01), "w", kCfg, 1));
}

TEST(UpdateRatio, HalfIsTooFast) {
  const auto issue = check_update_ratio(filled(8, 1.0), filled(8, 1.5), "w", kCfg, 1);
  ASSERT_TRUE(issue);
  EXPECT_EQ(issue->check, CheckId::unstable_learning_high);
  EXPECT_NEAR(issue->measurement.at("log10_ratio"), std::log10(0.5), 1e-12);
}

TEST(UpdateRatio, TinyIsTooSlow) {
  const auto issue = check_update_ratio(filled(8, 1.0), filled(8, 1.0 + 1e-5), "w", kCfg, 1);
  ASSERT_TRUE(issue);
  EXPECT_EQ(issue->check, CheckId::unstable_learning_slow);
  EXPECT_NEAR(issue->measurement.at("log10_ratio"), -5.0, 1e-6);
}

TEST(UpdateRatio, ScaleInvariant) {
  const Tensor pre = Tensor::vector({0.3, -1.2, 0.8, 2.0});
  const Tensor post = Tensor::vector({0.31, -1.25, 0.7, 2.2});
  const auto base = check_update_ratio(pre, post, "w", kCfg, 1);
  for (double c : {1e-6, 0.5, 3.0, 1e6}) {
    Tensor a = pre;
    Tensor b = post;
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] *= c;
      b[i] *= c;
    }
    const auto scaled = check_update_ratio(a, b, "w", kCfg, 1);
    ASSERT_EQ(base.has_value(), scaled.has_value()) << c;
    if (base) {
      EXPECT_EQ(base->check, scaled->check);
    }
  }
}

TEST(UpdateRatio, ShapeMismatchIsUsageError) {
  EXPECT_THROW(check_update_ratio(filled(3, 1.0), filled(4, 1.0), "w", kCfg, 1), UsageError);
}

// Activation range

TEST(ActivationRange, SigmoidAboveOneFires) {
  const auto issue = check_activation_range(Tensor::vector({0.2, 1.2, 0.5}), Activation::sigmoid,
                                            "layer_0/activations", kCfg, 0);
  ASSERT_TRUE(issue);
  EXPECT_EQ(issue->check, CheckId::activation_out_of_range);
  EXPECT_EQ(issue->measurement.at("max"), 1.2);
}

TEST(ActivationRange, TanhInsideRangeDoesNotFire) {
  EXPECT_FALSE(check_activation_range(Tensor::vector({-0.99, 0.0, 0.99}), Activation::tanh, "a",
                                      kCfg, 0));
}

TEST(ActivationRange, BoundaryValuesAreInside) {
  EXPECT_FALSE(check_activation_range(Tensor::vector({0.0, 1.0}), Activation::sigmoid, "a", kCfg, 0));
  EXPECT_FALSE(check_activation_range(Tensor::vector({0.0, 1e300}), Activation::relu, "a", kCfg, 0));
}

TEST(ActivationRange, NaNAndNegativeReluFire) {
  EXPECT_TRUE(check_activation_range(Tensor::vector({0.5, kNaN}), Activation::sigmoid, "a", kCfg, 0));
  EXPECT_TRUE(check_activation_range(Tensor::vector({-0.1, 2.0}), Activation::relu, "a", kCfg, 0));
}

// Saturation

TEST(SaturationRho, AllMassAtAsymptotesIsOne) {
  const std::vector<double> v{-1.0, -1.0, 1.0, 1.0};
  EXPECT_EQ(saturation_rho(v, Activation::tanh, 10), 1.0);
  EXPECT_EQ(saturation_rho(std::vector{0.0, 1.0, 1.0}, Activation::sigmoid, 10), 1.0);
}

TEST(SaturationRho, UniformIsAboutHalf) {
  std::vector<double> v;
  for (int i = 0; i < 10000; ++i) v.push_back(-1.0 + 2.0 * (i + 0.5) / 10000.0);
  EXPECT_NEAR(saturation_rho(v, Activation::tanh, 10), 0.5, 0.05);
  EXPECT_NEAR(saturation_rho(v, Activation::tanh, 10), oracle::saturation_rho(v, false, 10), 1e-12);
}

TEST(SaturationRho, MixedSampleMatchesReference) {
  const std::vector<double> v{-0.9, -0.1, 0.05, 0.95, 0.95};
  // |-0.9| + |-0.1| + |0.05| + |0.95 + 0.95| over 5
  EXPECT_NEAR(saturation_rho(v, Activation::tanh, 10), 0.59, 1e-15);
  EXPECT_NEAR(saturation_rho(v, Activation::tanh, 10), oracle::saturation_rho(v, false, 10), 1e-15);
}

TEST(SaturationRho, RandomSamplesMatchReferenceAndStayInUnitInterval) {
  SplitMix64 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const bool sigmoid = trial % 2 == 0;
    const std::size_t bins = 10 + rng.below(20);
    std::vector<double> v(1 + rng.below(80));
    for (double& x : v) x = sigmoid ? rng.uniform() : std::tanh(rng.gaussian(0.0, 2.0));
    const double rho = saturation_rho(v, sigmoid ? Activation::sigmoid : Activation::tanh, bins);
    EXPECT_GE(rho, 0.0);
    EXPECT_LE(rho, 1.0);
    EXPECT_NEAR(rho, oracle::saturation_rho(v, sigmoid, bins), 1e-12) << trial;
  }
}

TEST(SaturationRho, AddingZeroDecreases) {
  std::vector<double> v{-0.8, 0.3, 0.9, 0.95};
  const double before = saturation_rho(v, Activation::tanh, 10);
  v.push_back(0.0);
  EXPECT_LT(saturation_rho(v, Activation::tanh, 10), before);
}

TEST(SaturationRho, RejectsUnboundedAndTooFewBins) {
  const std::vector<double> v{0.5};
  EXPECT_THROW(saturation_rho(v, Activation::relu, 10), UsageError);
  EXPECT_THROW(saturation_rho(v, Activation::tanh, 9), UsageError);
  EXPECT_THROW(saturation_rho(std::vector<double>{}, Activation::tanh, 10), UsageError);
}

TEST(Saturation, PinnedNeuronsFire) {
  const auto buffers = buffers_of(std::vector<std::vector<double>>(4, {0.0, 1.0, 1.0, 0.0}), 4);
  const auto issue = check_saturation(buffers, Activation::sigmoid, "layer_0/activations", kCfg, 9);
  ASSERT_TRUE(issue);
  EXPECT_EQ(issue->measurement.at("saturated_ratio"), 1.0);
}

TEST(Saturation, UniformlyActiveLayerDoesNotFire) {
  std::vector<std::vector<double>> neurons(5);
  SplitMix64 rng(8);
  for (auto& n : neurons) {
    for (int i = 0; i < 50; ++i) n.push_back(rng.uniform());
  }
  EXPECT_FALSE(check_saturation(buffers_of(neurons, 50), Activation::sigmoid, "a", kCfg, 50));
}

TEST(Saturation, WaitsForFullBuffers) {
  const auto buffers = buffers_of(std::vector<std::vector<double>>(4, {1.0, 1.0}), 4);
  EXPECT_FALSE(check_saturation(buffers, Activation::sigmoid, "a", kCfg, 2));
}

// Dead units

TEST(DeadUnits, FiftyZerosIsDead) {
  const auto buffers = buffers_of({std::vector<double>(50, 0.0)}, 50);
  const auto issue = check_dead_units(buffers, Activation::relu, "layer_2/activations", kCfg, 50);
  ASSERT_TRUE(issue);
  EXPECT_EQ(issue->check, CheckId::dead_layer);
}

TEST(DeadUnits, OneActiveOutputIsNotDead) {
  std::vector<double> v(50, 0.0);
  v[17] = 0.3;
  EXPECT_FALSE(check_dead_units(buffers_of({v}, 50), Activation::relu, "a", kCfg, 50));
}

TEST(DeadUnits, PartialBufferIsNotDead) {
  EXPECT_FALSE(check_dead_units(buffers_of({std::vector<double>(10, 0.0)}, 50), Activation::relu,
                                "a", kCfg, 10));
}

TEST(DeadUnits, LayerRatioThreshold) {
  std::vector<double> alive(50, 0.0);
  alive[0] = 1.0;
  const std::vector<double> dead(50, 0.0);
  EXPECT_TRUE(check_dead_units(buffers_of({dead, alive}, 50), Activation::relu, "a", kCfg, 50));
  EXPECT_FALSE(
      check_dead_units(buffers_of({dead, alive, alive}, 50), Activation::relu, "a", kCfg, 50));
  EXPECT_THROW(check_dead_units(buffers_of({dead}, 50), Activation::sigmoid, "a", kCfg, 50),
               UsageError);
}

// Loss

TEST(ZeroLoss, ZeroAndNegativeFire) {
  EXPECT_TRUE(check_zero_loss(0.0, kCfg, 1));
  EXPECT_TRUE(check_zero_loss(-0.4, kCfg, 1));
  EXPECT_FALSE(check_zero_loss(0.1, kCfg, 1));
  EXPECT_FALSE(check_zero_loss(kNaN, kCfg, 1));
}

TEST(SlowLoss, ConstantLossFires) {
  const auto t = tracker_of(std::vector<double>(kCfg.slow_loss_window + 1, 1.0));
  const auto issue = check_loss_decrease(t, kCfg, 100);
  ASSERT_TRUE(issue);
  EXPECT_DOUBLE_EQ(issue->measurement.at("mean_loss_rate"), 1.0);
}

TEST(SlowLoss, HalvingLossDoesNotFire) {
  std::vector<double> losses;
  double l = 1.0;
  for (std::size_t i = 0; i <= kCfg.slow_loss_window; ++i, l *= 0.5) losses.push_back(l);
  EXPECT_FALSE(check_loss_decrease(tracker_of(losses), kCfg, 100));
}

TEST(SlowLoss, NeedsFullWindow) {
  EXPECT_FALSE(check_loss_decrease(tracker_of(std::vector<double>(kCfg.slow_loss_window, 1.0)),
                                   kCfg, 99));
}

TEST(SlowLoss, GeometricMeanMatchesDirectProduct) {
  SplitMix64 rng(4);
  std::vector<double> losses{1.0};
  for (std::size_t i = 0; i < kCfg.slow_loss_window; ++i) {
    losses.push_back(losses.back() * (1.0 + rng.gaussian(0.0, 0.01)));
  }
  const double expected = std::pow(losses.back() / losses.front(), 1.0 / kCfg.slow_loss_window);
  const auto issue = check_loss_decrease(tracker_of(losses), kCfg, 100);
  ASSERT_EQ(issue.has_value(), expected >= kCfg.loss_rate_floor);
  if (issue) {
    EXPECT_NEAR(issue->measurement.at("mean_loss_rate"), expected, 1e-12);
  }
}

TEST(DivergingLoss, TwoAndAHalfTimesLowestFires) {
  const LossTracker t = tracker_of({0.4, 0.2, 0.3, 0.5});
  const auto issue = check_loss_divergence(t, 0.5, kCfg, 4);
  ASSERT_TRUE(issue);
  EXPECT_DOUBLE_EQ(issue->measurement.at("abs_loss_rate"), 2.5);
}

TEST(DivergingLoss, CurrentEqualsLowestDoesNotFire) {
  EXPECT_FALSE(check_loss_divergence(tracker_of({0.4, 0.2}), 0.2, kCfg, 2));
}

TEST(DivergingLoss, NonFiniteFires) {
  EXPECT_TRUE(check_loss_divergence(tracker_of({0.4, kNaN}), kNaN, kCfg, 2));
  EXPECT_TRUE(check_loss_divergence(tracker_of({0.4, kInf}), kInf, kCfg, 2));
}

TEST(DivergingLoss, NaNNeverBecomesLowest) {
  const LossTracker t = tracker_of({kNaN, 0.7, kNaN});
  EXPECT_EQ(t.lowest_loss_value(), 0.7);
}

TEST(Fluctuation, AlternatingWindowFires) {
  const std::vector<double> w{1.0, 1.2, 0.9, 1.3, 0.8, 1.25, 0.85, 1.3, 0.8, 1.2};
  EXPECT_EQ(count_rate_alternations(w), 8u);
  const auto issue = check_loss_fluctuation(tracker_of(w), kCfg, 10);
  ASSERT_TRUE(issue);
  EXPECT_EQ(issue->measurement.at("alternations"), 8.0);
}

TEST(Fluctuation, MonotoneWindowDoesNotFire) {
  std::vector<double> w;
  for (int i = 0; i < 10; ++i) w.push_back(1.0 / (i + 1));
  EXPECT_EQ(count_rate_alternations(w), 0u);
  EXPECT_FALSE(check_loss_fluctuation(tracker_of(w), kCfg, 10));
}

TEST(Fluctuation, PlateausDoNotCountAsReversals) {
  EXPECT_EQ(count_rate_alternations({1.0, 1.0, 0.5, 0.5, 0.8}), 1u);
}

TEST(Fluctuation, NegativeLossesUseDifferenceSign) {
  // rate - 1 is meaningless once the loss crosses zero; the difference sign is not.
  EXPECT_EQ(count_rate_alternations({0.1, -0.2, 0.3, -0.4}), 2u);
}

// Gradients

TEST(GradientStability, VanishingRatio) {
  const auto issues =
      check_gradient_stability(filled(10, 1e-9), filled(10, 1.0), "gradients", kCfg, 10);
  ASSERT_EQ(issues.size(), 1u);
  EXPECT_EQ(issues[0].check, CheckId::vanishing_gradient);
  EXPECT_NEAR(issues[0].measurement.at("log10_ratio"), 9.0, 1e-9);
}

TEST(GradientStability, ExplodingRatio) {
  const auto issues =
      check_gradient_stability(filled(10, 1e4), filled(10, 1e-1), "gradients", kCfg, 10);
  ASSERT_EQ(issues.size(), 1u);
  EXPECT_EQ(issues[0].check, CheckId::exploding_gradient);
}

TEST(GradientStability, NaNFirstLayer) {
  Tensor first = filled(10, 0.1);
  first[3] = kNaN;
  const auto issues = check_gradient_stability(first, filled(10, 0.1), "gradients", kCfg, 10);
  ASSERT_FALSE(issues.empty());
  EXPECT_EQ(issues[0].check, CheckId::nan_gradient);
}

TEST(GradientStability, InfiniteUpperQuartile) {
  Tensor last = filled(4, 0.1);
  last[0] = kInf;
  last[1] = kInf;
  const auto issues = check_gradient_stability(filled(4, 0.1), last, "gradients", kCfg, 10);
  ASSERT_FALSE(issues.empty());
  EXPECT_EQ(issues[0].check, CheckId::inf_gradient);
}

TEST(GradientStability, QuartileFloorAloneFires) {
  Tensor first = filled(8, 0.5);
  for (int i = 0; i < 4; ++i) first[i] = 0.0;
  const auto issues = check_gradient_stability(first, filled(8, 0.25), "gradients", kCfg, 10);
  ASSERT_EQ(issues.size(), 1u);
  EXPECT_EQ(issues[0].check, CheckId::vanishing_gradient);
}

TEST(GradientStability, IdenticalTensorsAreHealthy) {
  const Tensor g = Tensor::vector({0.1, -0.3, 0.02, 0.5});
  EXPECT_TRUE(check_gradient_stability(g, g, "gradients", kCfg, 10).empty());
}

// Small-sample fit

namespace {

LayerSpec dense(std::size_t in, std::size_t out, Activation act) {
  LayerSpec s;
  s.fan_in = in;
  s.fan_out = out;
  s.activation = act;
  s.weight_init = InitScheme::gaussian(0.0, 0.5);
  return s;
}

ModelFactory two_layer_factory() {
  return [](const TrainConfig& tc) {
    return build_model({dense(2, 8, Activation::tanh), dense(8, 2, Activation::identity)}, tc);
  };
}

CheckConfig eight_points() {
  CheckConfig cfg;
  cfg.small_sample_size = 4;
  return cfg;
}

}  // namespace

TEST(SmallSample, HealthyNetFitsEightPoints) {
  const Dataset data = make_blobs(2, 20, 2, 3.0, 0.3, 5);
  TrainConfig tc;
  tc.loss = LossKind::cross_entropy;
  tc.learning_rate = 0.5;
  tc.regularization = {Regularization::Kind::l2, 0.1};
  tc.dropout_prob = 0.3;
  EXPECT_FALSE(fit_small_sample(two_layer_factory(), tc, data, eight_points()));
}

TEST(SmallSample, FrozenLearningRateCannotFit) {
  const Dataset data = make_blobs(2, 20, 2, 3.0, 0.3, 5);
  TrainConfig tc;
  tc.loss = LossKind::cross_entropy;
  tc.learning_rate = 0.5;
  tc.lr_schedule = LrSchedule::from([](std::int64_t) { return 0.0; });
  const auto issue = fit_small_sample(two_layer_factory(), tc, data, eight_points());
  ASSERT_TRUE(issue);
  EXPECT_EQ(issue->check, CheckId::cannot_fit_small_sample);
  EXPECT_GT(issue->measurement.at("final_loss"), 1e-3);
}

TEST(SmallSample, TooFewPointsPerClassIsUsageError) {
  const Dataset data = make_blobs(2, 3, 2, 3.0, 0.3, 5);
  TrainConfig tc;
  EXPECT_THROW(fit_small_sample(two_layer_factory(), tc, data, eight_points()), UsageError);
}

// Config and purity

TEST(CheckConfig, ValidateRejectsInvertedBounds) {
  CheckConfig cfg;
  cfg.update_ratio_low = -0.5;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg = CheckConfig{};
  cfg.saturation_bins = 5;
  EXPECT_THROW(cfg.validate(), UsageError);
  EXPECT_NO_THROW(CheckConfig{}.validate());
}

TEST(Checks, PureAndReproducible) {
  const Tensor pre = Tensor::vector({1.0, 2.0, 3.0});
  const Tensor post = Tensor::vector({1.6, 2.6, 3.6});
  const auto a = check_update_ratio(pre, post, "w", kCfg, 3);
  const auto b = check_update_ratio(pre, post, "w", kCfg, 3);
  ASSERT_TRUE(a && b);
  EXPECT_EQ(*a, *b);
  EXPECT_EQ(pre[0], 1.0);
  EXPECT_EQ(post[0], 1.6);
}

TEST(CheckIds, RoundTripThroughStrings) {
  for (CheckId id : kAllCheckIds) EXPECT_EQ(check_id_from_string(to_string(id)), id);
  EXPECT_THROW(check_id_from_string("nope"), UsageError);
}
