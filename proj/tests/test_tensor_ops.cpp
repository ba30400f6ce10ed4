#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradient_suite.hpp"
#include "lidarflow/ops.hpp"
#include "lidarflow/tape.hpp"
#include "oracles.hpp"

using namespace lidarflow;
using oracle::random_tensor;

namespace {

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor<double> impulse(Shape s, std::size_t r, std::size_t c) {
  Tensor<double> t(s);
  t(0, 0, r, c) = 1.0;
  return t;
}

}  // namespace

TEST(Tensor, RejectsMismatchedLength) {
  EXPECT_THROW(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>(3)), DimensionError);
}

TEST(Conv2d, OnesKernelCountsPaddedWindow) {
  Tensor<double> x = Tensor<double>::full(Shape{1, 1, 3, 3}, 1.0);
  Tensor<double> w = Tensor<double>::full(Shape{1, 1, 3, 3}, 1.0);
  const auto y = conv2d<double>(x, w, nullptr, ConvSpec::same(1, 1, 3, 1, false));
  EXPECT_DOUBLE_EQ(y(0, 0, 1, 1), 9.0);
  EXPECT_DOUBLE_EQ(y(0, 0, 0, 0), 4.0);
  EXPECT_DOUBLE_EQ(y(0, 0, 2, 2), 4.0);
  EXPECT_DOUBLE_EQ(y(0, 0, 0, 1), 6.0);
}

TEST(Conv2d, ZeroWeightAnnihilates) {
  std::mt19937_64 rng(1);
  const auto x = random_tensor(Shape{2, 3, 6, 5}, rng);
  const Tensor<double> w(Shape{4, 3, 3, 3});
  const Tensor<double> b(Shape{1, 4, 1, 1});
  const auto y = conv2d(x, w, &b, ConvSpec::same(3, 4, 3, 2, true));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesLoopOracleDilated) {
  std::mt19937_64 rng(7);
  const auto x = random_tensor(Shape{1, 2, 8, 8}, rng);
  const auto w = random_tensor(Shape{4, 2, 3, 3}, rng);
  const auto y = conv2d<double>(x, w, nullptr, ConvSpec{3, 1, 2, 2, 2, 4, false});
  EXPECT_LE(max_abs_diff(y, oracle::conv2d(x, w, nullptr, 1, 2, 2)), 1e-10);
}

TEST(Conv2d, MatchesLoopOracleRandomGeometry) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    std::uniform_int_distribution<int> pick(1, 3);
    const int k = 2 * (pick(rng) - 1) + 1;
    ConvSpec spec{k, pick(rng) % 2 + 1, pick(rng), 0, pick(rng), pick(rng), pick(rng) != 1};
    spec.padding = pick(rng) - 1;
    const Shape in{static_cast<std::size_t>(pick(rng)), static_cast<std::size_t>(spec.in_channels), 9, 7};
    if (spec.dilation * (k - 1) > 7 + 2 * spec.padding - 1) continue;
    const auto x = random_tensor(in, rng);
    const auto w = random_tensor(spec.weight_shape(), rng);
    const auto b = random_tensor(spec.bias_shape(), rng);
    const Tensor<double>* bias = spec.has_bias ? &b : nullptr;
    const auto got = conv2d(x, w, bias, spec);
    const auto want = oracle::conv2d(x, w, bias, spec.stride, spec.dilation, spec.padding);
    EXPECT_LE(max_abs_diff(got, want), 1e-10) << "trial " << trial;
  }
}

TEST(Conv2d, SamePaddingPreservesSize) {
  for (int d : {1, 2, 4}) {
    const ConvSpec spec = ConvSpec::same(16, 16, 3, d, false);
    EXPECT_EQ(spec.padding, d);
    EXPECT_EQ(spec.output_extent(37), 37u);
  }
}

TEST(Conv2d, ChannelMismatchNamesAxis) {
  const Tensor<double> x(Shape{1, 3, 4, 4});
  const Tensor<double> w(Shape{2, 2, 3, 3});
  try {
    conv2d<double>(x, w, nullptr, ConvSpec::same(2, 2, 3, 1, false));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos) << e.what();
  }
}

TEST(GruCell, ZeroKernelsHalveState) {
  std::mt19937_64 rng(3);
  const GruSpec spec{2, 3, 3, 1};
  const auto x = random_tensor(Shape{1, 2, 5, 5}, rng);
  const auto y = random_tensor(Shape{1, 3, 5, 5}, rng);
  GruKernels<double> k{Tensor<double>(spec.input_conv().weight_shape()),
                       Tensor<double>(spec.recurrent_conv().weight_shape()),
                       Tensor<double>(spec.input_conv().weight_shape()),
                       Tensor<double>(spec.recurrent_conv().weight_shape()),
                       Tensor<double>(spec.input_conv().weight_shape()),
                       Tensor<double>(spec.recurrent_conv().weight_shape())};
  const auto out = gru_cell(x, y, k, spec);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_DOUBLE_EQ(out[i], 0.5 * y[i]);
}

TEST(GruCell, ZeroStateAndCandidateInputGivesZero) {
  std::mt19937_64 rng(4);
  const GruSpec spec{2, 2, 3, 2};
  const auto x = random_tensor(Shape{1, 2, 5, 5}, rng);
  const Tensor<double> y(Shape{1, 2, 5, 5});
  GruKernels<double> k{random_tensor(spec.input_conv().weight_shape(), rng),
                       random_tensor(spec.recurrent_conv().weight_shape(), rng),
                       random_tensor(spec.input_conv().weight_shape(), rng),
                       random_tensor(spec.recurrent_conv().weight_shape(), rng),
                       Tensor<double>(spec.input_conv().weight_shape()),
                       random_tensor(spec.recurrent_conv().weight_shape(), rng)};
  const auto out = gru_cell(x, y, k, spec);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(GruCell, MatchesScalarOracle) {
  std::mt19937_64 rng(5);
  for (int d : {1, 2, 3}) {
    const GruSpec spec{2, 2, 3, d};
    const auto x = random_tensor(Shape{1, 2, 5, 5}, rng);
    const auto y = random_tensor(Shape{1, 2, 5, 5}, rng);
    GruKernels<double> k{random_tensor(spec.input_conv().weight_shape(), rng),
                         random_tensor(spec.recurrent_conv().weight_shape(), rng),
                         random_tensor(spec.input_conv().weight_shape(), rng),
                         random_tensor(spec.recurrent_conv().weight_shape(), rng),
                         random_tensor(spec.input_conv().weight_shape(), rng),
                         random_tensor(spec.recurrent_conv().weight_shape(), rng)};
    EXPECT_LE(max_abs_diff(gru_cell(x, y, k, spec), oracle::gru_cell(x, y, k, d)), 1e-12) << "d=" << d;
  }
}

TEST(GruCell, OutputBoundedByStateOrOne) {
  std::mt19937_64 rng(6);
  const GruSpec spec{3, 3, 3, 1};
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor(Shape{1, 3, 6, 6}, rng, -5, 5);
    const auto y = random_tensor(Shape{1, 3, 6, 6}, rng, -3, 3);
    GruKernels<double> k{random_tensor(spec.input_conv().weight_shape(), rng, -2, 2),
                         random_tensor(spec.recurrent_conv().weight_shape(), rng, -2, 2),
                         random_tensor(spec.input_conv().weight_shape(), rng, -2, 2),
                         random_tensor(spec.recurrent_conv().weight_shape(), rng, -2, 2),
                         random_tensor(spec.input_conv().weight_shape(), rng, -2, 2),
                         random_tensor(spec.recurrent_conv().weight_shape(), rng, -2, 2)};
    const auto out = gru_cell(x, y, k, spec);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_LE(std::abs(out[i]), std::max(std::abs(y[i]), 1.0) + 1e-15);
  }
}

TEST(GruCell, RecurrentChannelMismatch) {
  const GruSpec spec{2, 3, 3, 1};
  const Tensor<double> x(Shape{1, 2, 4, 4});
  const Tensor<double> y(Shape{1, 2, 4, 4});
  GruKernels<double> k{Tensor<double>(spec.input_conv().weight_shape()),
                       Tensor<double>(spec.recurrent_conv().weight_shape()),
                       Tensor<double>(spec.input_conv().weight_shape()),
                       Tensor<double>(spec.recurrent_conv().weight_shape()),
                       Tensor<double>(spec.input_conv().weight_shape()),
                       Tensor<double>(spec.recurrent_conv().weight_shape())};
  EXPECT_THROW(gru_cell(x, y, k, spec), DimensionError);
}

TEST(BilinearWarp, ZeroFlowIsIdentity) {
  std::mt19937_64 rng(8);
  const auto src = random_tensor(Shape{2, 3, 7, 6}, rng);
  const Tensor<double> flow(Shape{2, 2, 7, 6});
  EXPECT_EQ(bilinear_warp(src, flow), src);
}

TEST(BilinearWarp, UnitShiftSamplesAhead) {
  const Shape s{1, 1, 10, 10};
  const auto src = impulse(s, 5, 5);
  Tensor<double> flow(Shape{1, 2, 10, 10});
  for (std::size_t i = 0; i < 100; ++i) flow[i] = 1.0;  // dx = 1
  const auto out = bilinear_warp(src, flow);
  EXPECT_EQ(out, impulse(s, 5, 4));
}

TEST(BilinearWarp, HalfShiftSplitsMass) {
  const Shape s{1, 1, 10, 10};
  Tensor<double> flow(Shape{1, 2, 10, 10});
  for (std::size_t i = 0; i < 100; ++i) flow[i] = 0.5;
  const auto out = bilinear_warp(impulse(s, 5, 5), flow);
  double total = 0;
  for (double v : out.values()) total += v;
  EXPECT_DOUBLE_EQ(out(0, 0, 5, 4), 0.5);
  EXPECT_DOUBLE_EQ(out(0, 0, 5, 5), 0.5);
  EXPECT_DOUBLE_EQ(total, 1.0);
}

TEST(BilinearWarp, MatchesSamplingOracle) {
  std::mt19937_64 rng(9);
  const auto src = random_tensor(Shape{2, 2, 6, 7}, rng);
  const auto flow = random_tensor(Shape{2, 2, 6, 7}, rng, -3.5, 3.5);
  EXPECT_LE(max_abs_diff(bilinear_warp(src, flow), oracle::warp(src, flow)), 1e-14);
}

TEST(BilinearWarp, FlowChannelCountChecked) {
  const Tensor<double> src(Shape{1, 1, 4, 4});
  EXPECT_THROW(bilinear_warp(src, Tensor<double>(Shape{1, 3, 4, 4})), DimensionError);
}

TEST(GaussianFilter, SizeOneIsExactIdentity) {
  std::mt19937_64 rng(10);
  const auto m = random_tensor(Shape{1, 2, 9, 9}, rng);
  EXPECT_EQ(gaussian_filter(m, 1), m);
}

TEST(GaussianFilter, UniformInteriorPreserved) {
  const auto m = Tensor<double>::full(Shape{1, 1, 15, 15}, 0.7);
  for (int f : {3, 5, 7, 9}) {
    const auto out = gaussian_filter(m, f);
    EXPECT_NEAR(out(0, 0, 7, 7), 0.7, 1e-12) << "f=" << f;
  }
}

TEST(GaussianFilter, ImpulseGivesKernel) {
  const Shape s{1, 1, 7, 7};
  const auto out = gaussian_filter(impulse(s, 3, 3), 3);
  // Separable taps for sigma = 0.75: e^{-k^2 / (2 sigma^2)} normalized.
  const double e = std::exp(-1.0 / (2 * 0.75 * 0.75));
  const double side = e / (1 + 2 * e), mid = 1 / (1 + 2 * e);
  EXPECT_NEAR(out(0, 0, 3, 3), mid * mid, 1e-15);
  EXPECT_NEAR(out(0, 0, 2, 3), mid * side, 1e-15);
  EXPECT_NEAR(out(0, 0, 2, 2), side * side, 1e-15);
  EXPECT_EQ(out(0, 0, 1, 3), 0.0);
}

TEST(GaussianFilter, MatchesDenseOracle) {
  std::mt19937_64 rng(12);
  const auto m = random_tensor(Shape{2, 1, 11, 8}, rng);
  for (int f : {1, 3, 5, 7, 9})
    EXPECT_LE(max_abs_diff(gaussian_filter(m, f), oracle::gaussian_filter(m, f)), 1e-14) << "f=" << f;
}

TEST(GaussianFilter, InteriorMassPreserved) {
  std::mt19937_64 rng(13);
  Tensor<double> m(Shape{1, 1, 25, 25});
  for (std::size_t r = 10; r < 15; ++r)
    for (std::size_t c = 10; c < 15; ++c) m(0, 0, r, c) = std::uniform_real_distribution<double>(0, 1)(rng);
  double before = 0;
  for (double v : m.values()) before += v;
  for (int f : {3, 5, 7, 9}) {
    double after = 0;
    const auto blurred = gaussian_filter(m, f);
    for (double v : blurred.values()) after += v;
    EXPECT_NEAR(after, before, 1e-6);
  }
}

TEST(GaussianFilter, RejectsEvenOrNonPositive) {
  const Tensor<double> m(Shape{1, 1, 4, 4});
  EXPECT_THROW(gaussian_filter(m, 2), ParameterError);
  EXPECT_THROW(gaussian_filter(m, 0), ParameterError);
  EXPECT_THROW(gaussian_filter(m, -3), ParameterError);
}

TEST(Mse, Examples) {
  const Tensor<double> a(Shape{1, 1, 1, 2}, {0.0, 1.0});
  const Tensor<double> b(Shape{1, 1, 1, 2}, {1.0, 1.0});
  EXPECT_DOUBLE_EQ(mse(a, b), 0.5);
  EXPECT_DOUBLE_EQ(mse(b, b), 0.0);
  EXPECT_DOUBLE_EQ(mse(Tensor<double>(Shape{1, 1, 3, 3}), Tensor<double>::full(Shape{1, 1, 3, 3}, 1.0)), 1.0);
  EXPECT_THROW(mse(a, Tensor<double>(Shape{1, 1, 2, 1})), DimensionError);
}

TEST(Activations, Examples) {
  std::mt19937_64 rng(14);
  const auto x = random_tensor(Shape{1, 2, 3, 3}, rng, -6, 6);
  const auto s = sigmoid(x);
  Tensor<double> neg = x;
  for (auto& v : neg.values()) v = -v;
  const auto sn = sigmoid(neg);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(s[i] + sn[i], 1.0, 1e-15);
  EXPECT_EQ(sigmoid(Tensor<double>::scalar(0.0))[0], 0.5);
  EXPECT_EQ(lidarflow::tanh(Tensor<double>::scalar(0.0))[0], 0.0);
}

TEST(Tape, MseOfSingleValueHasGradientTwoV) {
  Tape<double> tape;
  const auto x = tape.leaf(Tensor<double>::scalar(1.75).set_requires_grad(true));
  const auto loss = mse(x, tape.constant(Tensor<double>::scalar(0.0)));
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 3.5);
}

TEST(Tape, UnusedLeafGetsZeroGradient) {
  Tape<double> tape;
  const auto a = tape.leaf(Tensor<double>::full(Shape{1, 1, 2, 2}, 2.0).set_requires_grad(true));
  const auto b = tape.leaf(Tensor<double>::full(Shape{1, 1, 2, 2}, 3.0).set_requires_grad(true));
  tape.backward(mse(a, tape.constant(Tensor<double>(Shape{1, 1, 2, 2}))));
  const auto gb = tape.grad(b);
  for (double v : gb.values()) EXPECT_EQ(v, 0.0);
}

TEST(Tape, BackwardOnNonScalarIsUsageError) {
  Tape<double> tape;
  const auto a = tape.leaf(Tensor<double>::full(Shape{1, 1, 2, 2}, 2.0).set_requires_grad(true));
  EXPECT_THROW(tape.backward(sigmoid(a)), UsageError);
}

TEST(Tape, TapedOpsMatchPureForward) {
  std::mt19937_64 rng(15);
  const auto src = random_tensor(Shape{1, 1, 6, 6}, rng);
  const auto flow = random_tensor(Shape{1, 2, 6, 6}, rng, -2, 2);
  Tape<double> tape;
  const auto v = bilinear_warp(gaussian_filter(tape.constant(src), 5), tape.constant(flow));
  EXPECT_EQ(v.value(), bilinear_warp(gaussian_filter(src, 5), flow));
}

TEST(GradientCheck, WarpAndCompositeGraphs) {
  // A reduced run of the full suite; the acceptance binary runs 100 each.
  for (const auto& e : oracle::run_gradient_suite(8, 99)) {
    EXPECT_TRUE(e.ok()) << e.name << ": " << e.passed << "/" << e.configs << " worst " << e.worst;
  }
}

TEST(GradientCheck, ConvIntoGruIntoMse) {
  std::mt19937_64 rng(16);
  const ConvSpec cs = ConvSpec::same(2, 3, 3, 1, true);
  const GruSpec gs{3, 3, 3, 2};
  std::vector<Tensor<double>> values{random_tensor(Shape{1, 2, 5, 5}, rng), random_tensor(cs.weight_shape(), rng),
                                     random_tensor(cs.bias_shape(), rng), random_tensor(Shape{1, 3, 5, 5}, rng)};
  for (int g = 0; g < 3; ++g) {
    values.push_back(random_tensor(gs.input_conv().weight_shape(), rng, -0.5, 0.5));
    values.push_back(random_tensor(gs.recurrent_conv().weight_shape(), rng, -0.5, 0.5));
  }
  const auto target = random_tensor(Shape{1, 3, 5, 5}, rng);
  const oracle::LossBuilder build = [&](Tape<double>& tape, const std::vector<Tensor<double>>& v) {
    std::vector<Var<double>> l;
    for (auto t : v) l.push_back(tape.leaf(std::move(t.set_requires_grad(true))));
    const auto h = conv2d(l[0], l[1], std::optional<Var<double>>(l[2]), cs);
    const auto y = gru_cell(h, l[3], GruVars<double>{l[4], l[5], l[6], l[7], l[8], l[9]}, gs);
    return std::pair{mse(y, tape.constant(target)), l};
  };
  const auto g = oracle::check_gradients(build, values, rng);
  EXPECT_TRUE(g.ok()) << g.worst;
  EXPECT_GT(g.coordinates, 300u);
}
