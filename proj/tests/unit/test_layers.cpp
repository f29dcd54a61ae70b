#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "radnet/gradient_check.hpp"
#include "radnet/layers.hpp"
#include "radnet/loss.hpp"
#include "support/fixtures.hpp"

using namespace radnet;
using radnet::testing::random_tensor;

namespace {

// Dense layer whose backward reports twice the true gradients.
class DoubledDense final : public Layer<double> {
 public:
  DoubledDense() : Layer<double>("doubled"), inner_("doubled", 3, 2) {
    inner_.weight() = random_tensor<double>({2, 3}, 4);
    inner_.bias() = random_tensor<double>({2}, 5);
  }
  LayerKind kind() const override { return LayerKind::dense; }
  std::span<Parameter<double>> parameters() override { return inner_.parameters(); }
  Tensor<double> forward(const Tensor<double>& x, Mode m) override { return inner_.forward(x, m); }
  GradBundle<double> backward(const Tensor<double>& dy) override {
    auto g = inner_.backward(dy * 2.0);
    for (auto& p : inner_.parameters()) g.grads[p.name] = p.grad;
    return g;
  }

 private:
  Dense<double> inner_;
};

void randomize(Conv2d<double>& c, std::uint64_t seed) {
  c.weight() = random_tensor<double>(c.weight().shape(), seed);
  c.bias() = random_tensor<double>(c.bias().shape(), seed + 1);
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

TEST(Conv2d, DeltaKernelIsIdentity) {
  Conv2d<double> c("c", 1, 1);
  c.weight()(0, 0, 1, 1) = 1.0;
  auto x = random_tensor<double>({2, 1, 5, 4}, 1);
  EXPECT_EQ(c.forward(x, Mode::infer), x);
}

TEST(Conv2d, OnesKernelCountsNeighbours) {
  Conv2d<double> c("c", 1, 1);
  c.weight() = Tensor<double>({1, 1, 3, 3}, 1.0);
  auto y = c.forward(Tensor<double>({1, 1, 3, 3}, 1.0), Mode::infer);
  const double expect[9] = {4, 6, 4, 6, 9, 6, 4, 6, 4};
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y[i], expect[i]);
}

TEST(Conv2d, BiasOnZeroInput) {
  Conv2d<double> c("c", 2, 3);
  c.weight() = random_tensor<double>(c.weight().shape(), 3);
  c.bias() = Tensor<double>({3}, 2.0);
  auto y = c.forward(Tensor<double>({1, 2, 4, 4}), Mode::infer);
  for (auto v : y.data()) EXPECT_EQ(v, 2.0);
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
  Conv2d<double> c("c", 2, 3);
  EXPECT_THROW(c.forward(Tensor<double>({1, 3, 4, 4}), Mode::train), ShapeError);
}

TEST(Conv2d, BackwardBeforeForwardIsStateError) {
  Conv2d<double> c("c", 1, 1);
  EXPECT_THROW(c.backward(Tensor<double>({1, 1, 3, 3})), StateError);
}

TEST(Conv2d, ZeroUpstreamGivesZeroGrads) {
  Conv2d<double> c("conv", 2, 3);
  randomize(c, 10);
  auto x = random_tensor<double>({2, 2, 4, 4}, 11);
  c.forward(x, Mode::train);
  auto g = c.backward(Tensor<double>({2, 3, 4, 4}));
  for (auto& [name, t] : g.grads)
    for (auto v : t.data()) EXPECT_EQ(v, 0.0) << name;
  for (auto v : g.input_grad.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, BiasGradSumsUpstream) {
  Conv2d<double> c("conv", 1, 1);
  randomize(c, 12);
  std::size_t b = 3, h = 4, w = 5;
  c.forward(random_tensor<double>({b, 1, h, w}, 13), Mode::train);
  auto g = c.backward(Tensor<double>({b, 1, h, w}, 1.0));
  EXPECT_DOUBLE_EQ(g.grads.at("conv.bias")[0], static_cast<double>(b * h * w));
}

TEST(Conv2d, GradientCheck) {
  Conv2d<double> c("conv", 2, 3);
  randomize(c, 14);
  auto r = gradient_check<double>(c, random_tensor<double>({1, 2, 4, 4}, 15));
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
  EXPECT_EQ(r.checked, 3u * 2 * 9 + 3 + 2 * 16);
}

TEST(Conv2d, GradientCheckThreeSeeds) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Conv2d<double> c("conv", 3, 2);
  randomize(c, 100 + seed);
    auto r = gradient_check<double>(c, random_tensor<double>({2, 3, 5, 3}, 200 + seed),
                                    Mode::train, 1e-5, seed);
    EXPECT_LT(r.max_rel_error, 1e-5) << "seed " << seed << " " << r.worst;
  }
}

// ---------------------------------------------------------------------------
// maxpool

TEST(MaxPool, ConstantInputHalves) {
  MaxPool2x2<double> p("p");
  auto y = p.forward(Tensor<double>({2, 3, 4, 6}, 1.5), Mode::infer);
  EXPECT_EQ(y, Tensor<double>({2, 3, 2, 3}, 1.5));
}

TEST(MaxPool, RoutesGradientToMax) {
  MaxPool2x2<double> p("p");
  auto y = p.forward(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}), Mode::train);
  EXPECT_EQ(y[0], 4.0);
  auto g = p.backward(Tensor<double>({1, 1, 1, 1}, {0.7}));
  EXPECT_EQ(g.input_grad, (Tensor<double>({1, 1, 2, 2}, {0, 0, 0, 0.7})));
}

TEST(MaxPool, TiesGoToFirstElement) {
  MaxPool2x2<double> p("p");
  p.forward(Tensor<double>({1, 1, 2, 2}, {5, 5, 5, 5}), Mode::train);
  auto g = p.backward(Tensor<double>({1, 1, 1, 1}, {1.0}));
  EXPECT_EQ(g.input_grad, (Tensor<double>({1, 1, 2, 2}, {1, 0, 0, 0})));
}

TEST(MaxPool, OddDimsRejected) {
  MaxPool2x2<double> p("p");
  EXPECT_THROW(p.forward(Tensor<double>({1, 1, 3, 4}), Mode::infer), ShapeError);
  EXPECT_THROW(p.forward(Tensor<double>({1, 1, 4, 5}), Mode::infer), ShapeError);
}

TEST(MaxPool, BackwardConservesMass) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MaxPool2x2<double> p("p");
    p.forward(random_tensor<double>({2, 3, 6, 4}, seed), Mode::train);
    auto up = random_tensor<double>({2, 3, 3, 2}, seed + 50);
    auto g = p.backward(up);
    EXPECT_NEAR(reduce_all(g.input_grad, ReduceKind::sum), reduce_all(up, ReduceKind::sum), 1e-12);
  }
}

TEST(MaxPool, GradientCheck) {
  for (std::uint64_t seed : {1, 2, 3}) {
    MaxPool2x2<double> p("p");
    auto r = gradient_check<double>(p, random_tensor<double>({2, 2, 4, 4}, seed), Mode::train,
                                    1e-5, seed);
    EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
  }
}

TEST(PadEven, AddsZeroRowAndColumn) {
  PadEven<double> p("pad");
  auto x = random_tensor<double>({1, 2, 3, 5}, 4);
  auto y = p.forward(x, Mode::train);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 4, 6}));
  EXPECT_EQ(y(0, 1, 2, 4), x(0, 1, 2, 4));
  EXPECT_EQ(y(0, 1, 3, 2), 0.0);
  EXPECT_EQ(y(0, 0, 1, 5), 0.0);
  auto r = gradient_check<double>(p, x);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

// ---------------------------------------------------------------------------
// batchnorm

TEST(BatchNorm, TrainOutputIsStandardized) {
  BatchNorm2d<double> bn("bn", 3);
  auto x = random_tensor<double>({4, 3, 5, 5}, 7, -30.0, 50.0);
  auto y = bn.forward(x, Mode::train);
  std::size_t count = 4 * 25;
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) s += y[(n * 3 + c) * 25 + i];
    double mean = s / count;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) ss += std::pow(y[(n * 3 + c) * 25 + i] - mean, 2);
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(ss / count, 1.0, 1e-6);
  }
}

TEST(BatchNorm, InferWithUnitStatsScalesByEps) {
  BatchNorm2d<double> bn("bn", 2);
  bn.reset_running_stats();
  auto x = random_tensor<double>({1, 2, 3, 3}, 8);
  auto y = bn.forward(x, Mode::infer);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(1 + 1e-5), 1e-15);
}

TEST(BatchNorm, InferWithoutStatsIsStateError) {
  BatchNorm2d<double> bn("bn", 2);
  EXPECT_THROW(bn.forward(Tensor<double>({1, 2, 2, 2}), Mode::infer), StateError);
}

TEST(BatchNorm, TrainNeedsTwoValuesPerChannel) {
  BatchNorm2d<double> bn("bn", 2);
  EXPECT_THROW(bn.forward(Tensor<double>({1, 2, 1, 1}), Mode::train), ShapeError);
}

TEST(BatchNorm, RunningStatsFollowMomentum) {
  BatchNorm2d<double> bn("bn", 1);
  Tensor<double> x({1, 1, 2, 2}, {1, 3, 5, 7});  // mean 4, biased var 5
  bn.forward(x, Mode::train);
  EXPECT_NEAR(bn.running_mean()[0], 0.1 * 4, 1e-15);
  EXPECT_NEAR(bn.running_var()[0], 0.9 * 1 + 0.1 * 5, 1e-15);
  bn.forward(x, Mode::train);
  EXPECT_NEAR(bn.running_mean()[0], 0.9 * 0.4 + 0.1 * 4, 1e-15);
  // Infer mode leaves the estimates alone.
  bn.forward(x, Mode::infer);
  EXPECT_NEAR(bn.running_mean()[0], 0.76, 1e-15);
  EXPECT_GE(bn.running_var()[0], 0.0);
}

TEST(BatchNorm, InferIndependentOfBatchComposition) {
  BatchNorm2d<double> bn("bn", 2);
  bn.forward(random_tensor<double>({3, 2, 4, 4}, 20), Mode::train);
  auto a = random_tensor<double>({1, 2, 4, 4}, 21);
  auto b = random_tensor<double>({1, 2, 4, 4}, 22, -9, 9);
  Tensor<double> ab({2, 2, 4, 4}), aa({2, 2, 4, 4});
  std::copy(a.data().begin(), a.data().end(), ab.data().begin());
  std::copy(b.data().begin(), b.data().end(), ab.data().begin() + 32);
  std::copy(a.data().begin(), a.data().end(), aa.data().begin());
  std::copy(a.data().begin(), a.data().end(), aa.data().begin() + 32);
  auto y1 = bn.forward(ab, Mode::infer);
  auto y2 = bn.forward(aa, Mode::infer);
  auto y3 = bn.forward(a, Mode::infer);
  for (std::size_t i = 0; i < 32; ++i) {
    EXPECT_EQ(y1[i], y2[i]);
    EXPECT_EQ(y1[i], y3[i]);
  }
}

TEST(BatchNorm, GradientCheck) {
  for (std::uint64_t seed : {1, 2, 3}) {
    BatchNorm2d<double> bn("bn", 3);
    bn.gamma() = random_tensor<double>({3}, seed + 10, 0.5, 1.5);
    bn.beta() = random_tensor<double>({3}, seed + 20);
    auto r = gradient_check<double>(bn, random_tensor<double>({2, 3, 2, 2}, seed), Mode::train,
                                    1e-5, seed);
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
  }
}

TEST(BatchNorm, InferGradientCheck) {
  BatchNorm2d<double> bn("bn", 2);
  bn.set_running_stats(Tensor<double>({2}, {0.3, -0.1}), Tensor<double>({2}, {2.0, 0.5}));
  bn.gamma() = Tensor<double>({2}, {1.5, -0.7});
  auto r = gradient_check<double>(bn, random_tensor<double>({2, 2, 3, 3}, 4), Mode::infer);
  EXPECT_LT(r.max_rel_error, 1e-7) << r.worst;
}

// ---------------------------------------------------------------------------
// dropout

TEST(Dropout, RateZeroIsIdentity) {
  Dropout<double> d("d", 0.0, 1, 0);
  auto x = random_tensor<double>({2, 10}, 1);
  EXPECT_EQ(d.forward(x, Mode::train), x);
  EXPECT_EQ(d.forward(x, Mode::infer), x);
}

TEST(Dropout, InferIsIdentity) {
  Dropout<double> d("d", 0.7, 1, 0);
  auto x = random_tensor<double>({2, 10}, 2);
  EXPECT_EQ(d.forward(x, Mode::infer), x);
  EXPECT_EQ(d.backward(x).input_grad, x);
}

TEST(Dropout, RateOneRejected) {
  EXPECT_THROW(Dropout<double>("d", 1.0, 1, 0), ArgumentError);
  EXPECT_THROW(Dropout<double>("d", -0.1, 1, 0), ArgumentError);
}

TEST(Dropout, HalfRateKeepsMeanOnLargeTensor) {
  Dropout<double> d("d", 0.5, 42, 3);
  auto y = d.forward(Tensor<double>({100000}, 1.0), Mode::train);
  double mean = reduce_all(y, ReduceKind::mean);
  EXPECT_GE(mean, 0.98);
  EXPECT_LE(mean, 1.02);
  for (auto v : y.data()) EXPECT_TRUE(v == 0.0 || v == 2.0);
}

TEST(Dropout, ExpectationMatchesInputOverManyMasks) {
  Dropout<double> d("d", 0.3, 9, 1);
  auto x = random_tensor<double>({8}, 3, 0.5, 2.0);
  Tensor<double> sum({8});
  const int masks = 40000;
  for (int k = 0; k < masks; ++k) {
    d.set_noise_key(static_cast<std::uint64_t>(k));
    sum = sum + d.forward(x, Mode::train);
  }
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(sum[i] / masks, x[i], 0.02 * x[i]);
}

TEST(Dropout, MaskDependsOnlyOnKey) {
  Dropout<double> a("d", 0.5, 5, 2), b("d", 0.5, 5, 2), c("d", 0.5, 5, 3);
  auto x = Tensor<double>({64}, 1.0);
  a.set_noise_key(11);
  b.set_noise_key(11);
  c.set_noise_key(11);
  EXPECT_EQ(a.forward(x, Mode::train), b.forward(x, Mode::train));
  EXPECT_NE(a.forward(x, Mode::train), c.forward(x, Mode::train));
  b.set_noise_key(12);
  EXPECT_NE(a.forward(x, Mode::train), b.forward(x, Mode::train));
}

TEST(Dropout, BackwardAppliesMaskAndChecks) {
  Dropout<double> d("d", 0.4, 3, 0);
  d.set_noise_key(5);
  auto x = random_tensor<double>({3, 7}, 6);
  auto y = d.forward(x, Mode::train);
  auto g = d.backward(Tensor<double>(x.shape(), 1.0)).input_grad;
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g[i] * x[i], y[i], 1e-15);
  EXPECT_LT(gradient_check<double>(d, x).max_rel_error, 1e-9);
}

// ---------------------------------------------------------------------------
// dense

TEST(Dense, IdentityWeights) {
  Dense<double> d("d", 3, 3);
  d.weight() = Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto x = random_tensor<double>({4, 3}, 1);
  EXPECT_EQ(d.forward(x, Mode::infer), x);
}

TEST(Dense, HandEvaluated) {
  Dense<double> d("d", 2, 2);
  d.weight() = Tensor<double>({2, 2}, {1, 1, 0, 1});
  d.bias() = Tensor<double>({2}, {1, 0});
  EXPECT_EQ(d.forward(Tensor<double>({1, 2}, {1, 2}), Mode::infer),
            (Tensor<double>({1, 2}, {4, 2})));
}

TEST(Dense, ShapeMismatch) {
  Dense<double> d("d", 3, 2);
  EXPECT_THROW(d.forward(Tensor<double>({1, 4}), Mode::infer), ShapeError);
}

TEST(Dense, GradientCheck) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Dense<double> d("d", 5, 4);
    d.weight() = random_tensor<double>({4, 5}, seed);
    d.bias() = random_tensor<double>({4}, seed + 9);
    auto r = gradient_check<double>(d, random_tensor<double>({3, 5}, seed + 99), Mode::train,
                                    1e-5, seed);
    EXPECT_LT(r.max_rel_error, 1e-7) << r.worst;
  }
}

TEST(Dense, LinearLayerIsNearExact) {
  Dense<double> d("d", 4, 3);
  d.weight() = random_tensor<double>({3, 4}, 31);
  d.bias() = random_tensor<double>({3}, 32);
  auto r = gradient_check<double>(d, random_tensor<double>({2, 4}, 33));
  EXPECT_LT(r.max_rel_error, 1e-9) << r.worst;
}

// ---------------------------------------------------------------------------
// activations

TEST(Activations, PointValues) {
  Relu<double> relu("r");
  Sigmoid<double> sig("s");
  EXPECT_EQ(relu.forward(Tensor<double>({1}, {-3.0}), Mode::infer)[0], 0.0);
  EXPECT_EQ(relu.forward(Tensor<double>({1}, {2.5}), Mode::infer)[0], 2.5);
  EXPECT_EQ(sig.forward(Tensor<double>({1}, {0.0}), Mode::infer)[0], 0.5);
}

TEST(Activations, SoftmaxUniformLogits) {
  Softmax<double> sm("sm");
  auto y = sm.forward(Tensor<double>({1, 3}, {2.0, 2.0, 2.0}), Mode::infer);
  for (auto v : y.data()) EXPECT_NEAR(v, 1.0 / 3, 1e-15);
}

TEST(Activations, SoftmaxShiftInvariant) {
  auto z = random_tensor<double>({4, 3}, 5, -4, 4);
  auto a = softmax_rows(z);
  auto b = softmax_rows(map(z, [](double v) { return v + 123.4; }));
  EXPECT_LE(max_abs_diff(a, b), 1e-12);
}

TEST(Activations, RangesHoldForExtremeInputs) {
  Tensor<double> z({3, 3}, {-1000, 0, 1000, 700, 710, -710, 1e-300, -1e-300, 5});
  auto p = softmax_rows(z);
  for (std::size_t n = 0; n < 3; ++n) {
    double s = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_GE(p(n, j), 0.0);
      s += p(n, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
  Sigmoid<double> sig("s");
  Relu<double> relu("r");
  auto flat = z.reshaped({9});
  auto s = sig.forward(flat, Mode::infer);
  auto r = relu.forward(flat, Mode::infer);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_TRUE(std::isfinite(s[i]));
    EXPECT_GE(s[i], 0.0);
    EXPECT_LE(s[i], 1.0);
    EXPECT_GE(r[i], 0.0);
  }
  EXPECT_GT(sig.forward(Tensor<double>({1}, {30.0}), Mode::infer)[0], 0.0);
  EXPECT_LT(sig.forward(Tensor<double>({1}, {-30.0}), Mode::infer)[0], 1.0);
}

TEST(Activations, RandomRanges) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto z = random_tensor<double>({5, 3}, seed, -50, 50);
    auto p = softmax_rows(z);
    for (std::size_t n = 0; n < 5; ++n) EXPECT_NEAR(p(n, 0) + p(n, 1) + p(n, 2), 1.0, 1e-9);
  }
}

TEST(Activations, GradientChecks) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Sigmoid<double> s("s");
    Softmax<double> sm("sm");
    Relu<double> r("r");
    Flatten<double> f("f");
    auto x = random_tensor<double>({3, 4}, seed, -3, 3);
    EXPECT_LT(gradient_check<double>(s, x, Mode::train, 1e-5, seed).max_rel_error, 1e-7);
    EXPECT_LT(gradient_check<double>(sm, x, Mode::train, 1e-5, seed).max_rel_error, 1e-7);
    EXPECT_LT(gradient_check<double>(r, x, Mode::train, 1e-5, seed).max_rel_error, 1e-7);
    EXPECT_LT(gradient_check<double>(f, random_tensor<double>({2, 2, 2, 3}, seed)).max_rel_error,
              1e-7);
  }
}

// ---------------------------------------------------------------------------
// losses

TEST(Loss, PerfectBinaryPredictionIsNearZero) {
  EXPECT_NEAR(loss_value(Tensor<double>({1, 1}, {1.0}), Tensor<double>({1, 1}, {1.0}),
                         LossKind::bce),
              0.0, 1e-6);
}

TEST(Loss, CoinFlipIsLnTwo) {
  for (double y : {0.0, 1.0})
    EXPECT_NEAR(loss_value(Tensor<double>({1, 1}, {0.5}), Tensor<double>({1, 1}, {y}),
                           LossKind::bce),
                std::log(2.0), 1e-12);
}

TEST(Loss, MeanOverBatch) {
  Tensor<double> p({2, 1}, {0.8, 0.4});
  Tensor<double> y({2, 1}, {1, 0});
  EXPECT_NEAR(loss_value(p, y, LossKind::bce), -(std::log(0.8) + std::log(0.6)) / 2, 1e-12);
  Tensor<double> q({2, 3}, {0.2, 0.5, 0.3, 0.1, 0.1, 0.8});
  Tensor<double> t({2, 3}, {0, 1, 0, 0, 0, 1});
  EXPECT_NEAR(loss_value(q, t, LossKind::cce), -(std::log(0.5) + std::log(0.8)) / 2, 1e-12);
  EXPECT_EQ(loss(q, t, LossKind::cce).shape(), Shape{1});
}

TEST(Loss, ZeroProbabilityIsClampedNotInfinite) {
  double l = loss_value(Tensor<double>({1, 1}, {0.0}), Tensor<double>({1, 1}, {1.0}), LossKind::bce);
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, -std::log(1e-7), 1e-6);
}

TEST(Loss, BadTargetsRejected) {
  EXPECT_THROW(loss_value(Tensor<double>({1, 1}, {0.5}), Tensor<double>({1, 1}, {0.5}), LossKind::bce),
               ArgumentError);
  EXPECT_THROW(loss_value(Tensor<double>({1, 3}, {0.2, 0.3, 0.5}),
                          Tensor<double>({1, 3}, {1, 1, 0}), LossKind::cce),
               ArgumentError);
  EXPECT_THROW(loss_value(Tensor<double>({1, 3}, {0.2, 0.3, 0.5}),
                          Tensor<double>({1, 3}, {0, 2, 0}), LossKind::cce),
               ArgumentError);
  EXPECT_THROW(loss_value(Tensor<double>({2, 1}), Tensor<double>({1, 1}), LossKind::bce), ShapeError);
}

TEST(Loss, CceGradientThroughSoftmax) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto z = random_tensor<double>({4, 3}, seed, -2, 2);
    Tensor<double> y({4, 3});
    for (std::size_t n = 0; n < 4; ++n) y(n, (n + seed) % 3) = 1.0;
    // Chain rule through the layer and via the fused shortcut must both agree with
    // finite differences of the scalar loss.
    Softmax<double> sm("sm");
    auto p = sm.forward(z, Mode::train);
    auto chained = sm.backward(loss_grad_probs(p, y, LossKind::cce)).input_grad;
    auto fused = loss_grad_logits(p, y, LossKind::cce);
    double worst = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      auto zp = z, zm = z;
      zp[i] += 1e-5;
      zm[i] -= 1e-5;
      double num = (loss_value(softmax_rows(zp), y, LossKind::cce) -
                    loss_value(softmax_rows(zm), y, LossKind::cce)) / 2e-5;
      worst = std::max({worst, relative_error(chained[i], num), relative_error(fused[i], num)});
    }
    EXPECT_LT(worst, 1e-6);
  }
}

TEST(Loss, BceGradientThroughSigmoid) {
  auto z = random_tensor<double>({5, 1}, 8, -3, 3);
  Tensor<double> y({5, 1}, {1, 0, 0, 1, 1});
  auto sig = [](const Tensor<double>& t) { return map(t, [](double v) { return sigmoid(v); }); };
  auto fused = loss_grad_logits(sig(z), y, LossKind::bce);
  for (std::size_t i = 0; i < z.size(); ++i) {
    auto zp = z, zm = z;
    zp[i] += 1e-5;
    zm[i] -= 1e-5;
    double num = (loss_value(sig(zp), y, LossKind::bce) - loss_value(sig(zm), y, LossKind::bce)) / 2e-5;
    EXPECT_LT(relative_error(fused[i], num), 1e-6);
  }
}

// ---------------------------------------------------------------------------
// gradient checker

TEST(GradientCheck, RelativeErrorFormula) {
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-10, 0.0), 1e-2);
}

TEST(GradientCheck, DoubledBackwardIsDetected) {
  // |2n - n| / max(|2n|, |n|) = 1/2 for every non-negligible element.
  DoubledDense d;
  auto r = gradient_check<double>(d, random_tensor<double>({2, 3}, 6));
  EXPECT_NEAR(r.max_rel_error, 0.5, 1e-6);
}

TEST(GradientCheck, NonFiniteRejected) {
  Dense<double> d("d", 2, 1);
  d.weight() = Tensor<double>({1, 2}, {std::numeric_limits<double>::infinity(), 1.0});
  EXPECT_THROW(gradient_check<double>(d, Tensor<double>({1, 2}, {1.0, 1.0})), NumericError);
}
