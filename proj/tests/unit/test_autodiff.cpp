#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "proard/autodiff.hpp"
#include "proard/grad_check.hpp"

using namespace proard;
using namespace proard::ad;

namespace {

Array arr(Shape s, std::vector<double> v) { return Array(std::move(s), std::move(v)); }

// Straight-line softmax for oracles.
std::vector<double> softmax(std::vector<double> z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double s = 0.0;
  for (double& v : z) s += (v = std::exp(v - mx));
  for (double& v : z) v /= s;
  return z;
}

}  // namespace

TEST(Forward, IdentityNetworkRecordsNothing) {
  Tape t;
  Array x = arr({1, 4}, {1, -2, 3, 0.5});
  Var in = t.input(x);
  EXPECT_EQ(t.value(in), x);
  EXPECT_EQ(t.num_ops(), 0u);
}

TEST(Forward, ZeroDenseLayerGivesZeroLogits) {
  Tape t;
  Array w(Shape{3, 4}), b(Shape{3});
  Var x = t.input(arr({2, 4}, {1, 2, 3, 4, -1, -2, -3, -4}));
  Var y = t.add_channel_bias(t.linear(x, t.param(0, w)), t.param(1, b));
  for (double v : t.value(y).data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, TwoLayerReluMatchesStraightLineOracle) {
  const std::vector<double> x{0.5, -1.25, 2.0, 0.75};
  const std::vector<double> w1{0.1, -0.2, 0.3, 0.4, -0.5, 0.6, -0.7, 0.8, 0.9, 1.0, -1.1, 1.2};
  const std::vector<double> b1{0.05, -0.1, 0.2};
  const std::vector<double> w2{1.5, -0.5, 0.25, -1.0, 2.0, 0.5};
  const std::vector<double> b2{0.1, -0.3};

  // oracle
  std::vector<double> h(3), expect(2);
  for (int o = 0; o < 3; ++o) {
    double s = b1[o];
    for (int i = 0; i < 4; ++i) s += w1[o * 4 + i] * x[i];
    h[o] = s > 0 ? s : 0;
  }
  for (int o = 0; o < 2; ++o) {
    double s = b2[o];
    for (int i = 0; i < 3; ++i) s += w2[o * 3 + i] * h[i];
    expect[o] = s;
  }

  Tape t;
  Array W1 = arr({3, 4}, w1), B1 = arr({3}, b1), W2 = arr({2, 3}, w2), B2 = arr({2}, b2);
  Var in = t.input(arr({1, 4}, x));
  Var hid = t.relu(t.add_channel_bias(t.linear(in, t.param(0, W1)), t.param(1, B1)));
  Var out = t.add_channel_bias(t.linear(hid, t.param(2, W2)), t.param(3, B2));
  for (int o = 0; o < 2; ++o) EXPECT_NEAR(t.value(out)[o], expect[o], 1e-14);
  EXPECT_EQ(t.num_ops(), 5u);
}

TEST(Forward, ShapeMismatchThrows) {
  Tape t;
  Var x = t.input(Array(Shape{2, 3}));
  Array w(Shape{4, 5});
  EXPECT_THROW(t.linear(x, t.param(0, w)), Error);
}

TEST(Forward, NonFiniteIntermediateThrows) {
  Tape t;
  Var x = t.variable(arr({2}, {1e308, 1e308}));
  try {
    t.add(x, x);
    FAIL() << "expected numeric error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
  }
}

TEST(Forward, IsBitwiseDeterministic) {
  Rng rng(3);
  auto pt = primitives().at("conv2d").sample_point(rng);
  auto run = [&] {
    Tape t;
    return t.value(t.conv2d(t.variable(pt[0]), t.variable(pt[1]), 1, 1));
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, ConstantOutputHasZeroGradients) {
  Tape t;
  Array w = arr({1, 2}, {3, 4});
  Var p = t.param(0, w);
  Var c = t.constant(Array::scalar(5.0));
  Var zero = t.scale(t.sum(p), 0.0);
  Var out = t.add(zero, c);
  auto g = t.backward(out);
  ASSERT_NE(g.find(0), nullptr);
  for (double v : g.find(0)->data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, LinearInWeightsGivesInput) {
  Tape t;
  Array x = arr({1, 3}, {0.2, -1.5, 4.0});
  Array w = arr({1, 3}, {1, 1, 1});
  Var out = t.linear(t.input(x, false), t.param(7, w));
  auto g = t.backward(out, Array(Shape{1, 1}, 1.0));
  for (int i = 0; i < 3; ++i) EXPECT_EQ((*g.find(7))[i], x[i]);
}

TEST(Backward, InputGradientReported) {
  Tape t;
  Array w = arr({1, 2}, {2, -3});
  Var out = t.linear(t.input(arr({1, 2}, {1, 1})), t.param(0, w));
  auto g = t.backward(out, Array(Shape{1, 1}, 1.0));
  ASSERT_TRUE(g.input.has_value());
  EXPECT_EQ((*g.input)[0], 2.0);
  EXPECT_EQ((*g.input)[1], -3.0);
}

TEST(Backward, TapeCanOnlyBeConsumedOnce) {
  Tape t;
  Var s = t.sum(t.variable(arr({2}, {1, 2})));
  t.backward(s);
  EXPECT_THROW(t.backward(s), Error);
}

TEST(Backward, SeedShapeMustMatch) {
  Tape t;
  Var y = t.relu(t.variable(arr({2}, {1, 2})));
  EXPECT_THROW(t.backward(y, Array(Shape{3})), Error);
}

TEST(Backward, SliceGradientsStayInsideTheSlice) {
  Array full(Shape{4, 5}, 0.5);
  Tape t;
  Var w = t.param_slice(3, full, SliceSpec::leading({2, 3}));
  Var out = t.sum(t.linear(t.input(arr({1, 3}, {1, 2, 3}), false), w));
  auto g = t.backward(out);
  const Array& gw = *g.find(3);
  ASSERT_EQ(gw.shape(), full.shape());
  const auto& mask = g.touched.at(3);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 5; ++c) {
      const bool inside = r < 2 && c < 3;
      EXPECT_EQ(mask[r * 5 + c], inside ? 1 : 0);
      if (!inside) EXPECT_EQ(gw(r, c), 0.0);
      else EXPECT_EQ(gw(r, c), static_cast<double>(c + 1));
    }
}

TEST(Backward, CentredKernelCropScattersToCentre) {
  Array full(Shape{1, 1, 5, 5}, 1.0);
  ad::SliceSpec s{{0, 0, 1, 1}, {1, 1, 3, 3}};
  Tape t;
  Var w = t.param_slice(0, full, s);
  auto g = t.backward(t.sum(w));
  const Array& gw = *g.find(0);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      EXPECT_EQ(gw[i * 5 + j], (i >= 1 && i <= 3 && j >= 1 && j <= 3) ? 1.0 : 0.0);
}

// Every registered primitive at 20 random points against central
// differences with step 1e-5.
TEST(GradCheck, EveryPrimitiveMatchesFiniteDifferences) {
  for (const auto& [name, def] : primitives()) {
    Rng rng(derive_seed(11, name));
    for (int k = 0; k < 20; ++k) {
      auto report = grad_check(name, def.apply, def.sample_point(rng), 1e-4);
      EXPECT_TRUE(report.passed) << name << " point " << k << " rel " << report.max_rel_error;
    }
  }
}

TEST(GradCheck, LinearMapIsExactUpToRounding) {
  Rng rng(5);
  auto pt = primitives().at("linear").sample_point(rng);
  auto report = grad_check("linear", pt, 1e-4);
  EXPECT_TRUE(report.passed);
  EXPECT_LT(report.max_rel_error, 1e-8);
}

TEST(GradCheck, ReluAwayFromZeroPasses) {
  auto report = grad_check("relu", {arr({1, 4}, {0.3, -0.7, 1.2, -0.1})}, 1e-4);
  EXPECT_TRUE(report.passed);
}

TEST(GradCheck, TrainingBatchNormPasses) {
  Rng rng(99);
  auto pt = primitives().at("batch_norm").sample_point(rng);
  auto report = grad_check("batch_norm", pt, 1e-4);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(GradCheck, UnknownPrimitiveIsAConfigError) {
  EXPECT_THROW(grad_check("nope", {}, 1e-4), Error);
}

TEST(Kl, IdenticalDistributionsGiveZero) {
  Tape t;
  Array z = arr({2, 3}, {0.1, 2.0, -1.0, 0.0, 0.0, 3.0});
  EXPECT_EQ(t.value(t.kl_divergence(t.constant(z), t.constant(z))).item(), 0.0);
}

TEST(Kl, TwoPointDistributionsMatchDirectSum) {
  Tape t;
  Var p = t.constant(arr({1, 2}, {std::log(0.5), std::log(0.5)}));
  Var q = t.constant(arr({1, 2}, {std::log(0.25), std::log(0.75)}));
  const double expect = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  EXPECT_NEAR(expect, 0.143841036225890, 1e-12);
  EXPECT_NEAR(t.value(t.kl_divergence(p, q)).item(), expect, 1e-12);
}

TEST(Kl, MeanOverBatchRows) {
  Tape t;
  Var p = t.constant(arr({2, 2}, {0.3, 0.3, std::log(0.5), std::log(0.5)}));
  Var q = t.constant(arr({2, 2}, {0.3, 0.3, std::log(0.25), std::log(0.75)}));
  const double k = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  EXPECT_NEAR(t.value(t.kl_divergence(p, q)).item(), k / 2.0, 1e-12);
}

TEST(Kl, NonNegativeAtRandomPoints) {
  Rng rng(17);
  for (int k = 0; k < 200; ++k) {
    Tape t;
    auto pt = primitives().at("kl_divergence").sample_point(rng);
    EXPECT_GE(t.value(t.kl_divergence(t.constant(pt[0]), t.constant(pt[1]))).item(), 0.0);
  }
}

TEST(Kl, RejectsShapeMismatchAndSingleClass) {
  Tape t;
  EXPECT_THROW(t.kl_divergence(t.constant(Array(Shape{2, 3})), t.constant(Array(Shape{2, 4}))),
               Error);
  EXPECT_THROW(t.kl_divergence(t.constant(Array(Shape{2, 1})), t.constant(Array(Shape{2, 1}))),
               Error);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  for (std::size_t c : {2u, 3u, 10u}) {
    Tape t;
    std::vector<int> labels{0, static_cast<int>(c - 1)};
    Var l = t.cross_entropy(t.constant(Array(Shape{2, c}, 0.7)), labels);
    EXPECT_NEAR(t.value(l).item(), std::log(static_cast<double>(c)), 1e-14);
  }
}

TEST(CrossEntropy, DecreasesAsTrueLogitGrows) {
  double prev = 1e9;
  for (double z = -3.0; z <= 3.0; z += 0.5) {
    Tape t;
    std::vector<int> labels{1};
    double l = t.value(t.cross_entropy(t.constant(arr({1, 3}, {0.2, z, -0.4})), labels)).item();
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(CrossEntropy, MatchesDirectSummationOracle) {
  Rng rng(23);
  Array z(Shape{4, 3});
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = uniform(rng, -3, 3);
  std::vector<int> labels{0, 2, 1, 2};
  double expect = 0.0;
  for (int r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += std::exp(z[r * 3 + k]);
    expect += -std::log(std::exp(z[r * 3 + labels[r]]) / s);
  }
  expect /= 4.0;
  Tape t;
  EXPECT_NEAR(t.value(t.cross_entropy(t.constant(z), labels)).item(), expect, 1e-12);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverBatch) {
  Rng rng(29);
  Array z(Shape{3, 4});
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = uniform(rng, -2, 2);
  std::vector<int> labels{3, 0, 1};
  Tape t;
  Var v = t.variable(z);
  t.backward(t.cross_entropy(v, labels));
  Array g = t.grad(v);
  for (int r = 0; r < 3; ++r) {
    auto p = softmax({z[r * 4], z[r * 4 + 1], z[r * 4 + 2], z[r * 4 + 3]});
    for (int k = 0; k < 4; ++k)
      EXPECT_NEAR(g[r * 4 + k], (p[k] - (k == labels[r] ? 1.0 : 0.0)) / 3.0, 1e-15);
  }
}

TEST(CrossEntropy, RejectsOutOfRangeLabel) {
  Tape t;
  std::vector<int> labels{3};
  EXPECT_THROW(t.cross_entropy(t.constant(Array(Shape{1, 3})), labels), Error);
}

TEST(GradientSet, AccumulationSumsAndUnionsMasks) {
  GradientSet a, b;
  a.params.emplace(0, arr({2}, {1, 2}));
  a.touched.emplace(0, std::vector<std::uint8_t>{1, 0});
  b.params.emplace(0, arr({2}, {1, 2}));
  b.touched.emplace(0, std::vector<std::uint8_t>{0, 1});
  a += b;
  EXPECT_EQ(a.params.at(0), arr({2}, {2, 4}));
  EXPECT_EQ(a.touched.at(0), (std::vector<std::uint8_t>{1, 1}));
}
