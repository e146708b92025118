#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "mmfusion/ops.hpp"
#include "oracles.hpp"

using namespace mmf;
using TD = Tensor<double>;

namespace {
TD ones(Shape s) {
  NDArray<double> a(std::move(s));
  a.fill(1.0);
  return TD(a);
}
}  // namespace

TEST(Conv, IdentityKernelReturnsInput) {
  std::mt19937_64 rng(1);
  TD x(oracle::random_array({1, 1, 3, 3}, rng));
  TD w = ones({1, 1, 1, 1});
  auto y = conv2d(x, w, TD());
  EXPECT_EQ(y.value(), x.value());
}

TEST(Conv, ConstantSum2x2) {
  auto y = conv2d(ones({1, 1, 3, 3}), ones({1, 1, 2, 2}), TD());
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.value().values()) EXPECT_DOUBLE_EQ(v, 4.0);
}

TEST(Conv, DepthCollapse) {
  auto y = conv3d(ones({1, 1, 4, 3, 3}), ones({1, 1, 4, 1, 1}), TD());
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 3, 3}));
  for (double v : y.value().values()) EXPECT_DOUBLE_EQ(v, 4.0);
}

TEST(Conv, Identity3D) {
  std::mt19937_64 rng(2);
  TD x(oracle::random_array({1, 1, 2, 3, 3}, rng));
  EXPECT_EQ(conv3d(x, ones({1, 1, 1, 1, 1}), TD()).value(), x.value());
}

TEST(Conv, MatchesNaiveOracleOnSpecShapes) {
  std::mt19937_64 rng(3);
  auto x2 = oracle::random_array({2, 3, 9, 7}, rng);
  auto w2 = oracle::random_array({4, 3, 3, 3}, rng);
  auto b2 = oracle::random_array({4}, rng);
  auto y2 = conv2d(TD(x2), TD(w2), TD(b2), {2, 2}, {1, 1});
  auto r2 = oracle::naive_conv(x2, w2, std::vector<double>(b2.data(), b2.data() + 4), {2, 2}, {1, 1});
  ASSERT_EQ(y2.shape(), r2.shape());
  for (int64_t i = 0; i < r2.size(); ++i) EXPECT_NEAR(y2.value()[i], r2[i], 1e-5 * std::max(1.0, std::abs(r2[i])));

  auto x3 = oracle::random_array({2, 2, 6, 5, 5}, rng);
  auto w3 = oracle::random_array({3, 2, 3, 3, 3}, rng);
  auto y3 = conv3d(TD(x3), TD(w3), TD(), {1, 2, 2}, {1, 1, 1});
  auto r3 = oracle::naive_conv(x3, w3, {}, {1, 2, 2}, {1, 1, 1});
  ASSERT_EQ(y3.shape(), r3.shape());
  for (int64_t i = 0; i < r3.size(); ++i) EXPECT_NEAR(y3.value()[i], r3[i], 1e-5 * std::max(1.0, std::abs(r3[i])));
}

namespace {

// Naive max pool over any number of spatial dims; padding cells never win.
NDArray<double> naive_max_pool(const NDArray<double>& x, const std::vector<int64_t>& k,
                               const std::vector<int64_t>& s, const std::vector<int64_t>& p) {
  const size_t d = x.rank() - 2;
  Shape os{x.dim(0), x.dim(1)};
  std::vector<int64_t> in(d), out(d);
  int64_t in_vol = 1, out_vol = 1;
  for (size_t i = 0; i < d; ++i) {
    in[i] = x.dim(i + 2);
    out[i] = (in[i] + 2 * p[i] - k[i]) / s[i] + 1;
    os.push_back(out[i]);
    in_vol *= in[i];
    out_vol *= out[i];
  }
  NDArray<double> y(os);
  for (int64_t nc = 0; nc < x.dim(0) * x.dim(1); ++nc)
    for (int64_t o = 0; o < out_vol; ++o) {
      std::vector<int64_t> oi(d);
      for (size_t a = d, r = static_cast<size_t>(o); a-- > 0;) oi[a] = static_cast<int64_t>(r % static_cast<size_t>(out[a])), r /= static_cast<size_t>(out[a]);
      double best = -std::numeric_limits<double>::infinity();
      for (int64_t f = 0; f < in_vol; ++f) {
        std::vector<int64_t> ii(d);
        bool inside = true;
        for (size_t a = d, r = static_cast<size_t>(f); a-- > 0;) ii[a] = static_cast<int64_t>(r % static_cast<size_t>(in[a])), r /= static_cast<size_t>(in[a]);
        for (size_t a = 0; a < d; ++a) {
          const int64_t lo = oi[a] * s[a] - p[a];
          inside = inside && ii[a] >= lo && ii[a] < lo + k[a];
        }
        if (inside) best = std::max(best, x[nc * in_vol + f]);
      }
      y[nc * out_vol + o] = best;
    }
  return y;
}

void expect_close(const NDArray<double>& got, const NDArray<double>& want, int trial) {
  ASSERT_EQ(got.shape(), want.shape()) << trial;
  for (int64_t i = 0; i < want.size(); ++i)
    ASSERT_NEAR(got[i], want[i], 1e-10 * std::max(1.0, std::abs(want[i]))) << "trial " << trial << " i " << i;
}

}  // namespace

TEST(Conv, RandomCasesMatchNaiveOracle2D) {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int64_t> small(1, 3), ext(1, 9), kk(1, 4), st(1, 3), pd(0, 2);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t N = small(rng), C = small(rng), O = small(rng);
    Ext2 k{kk(rng), kk(rng)}, s{st(rng), st(rng)}, p{pd(rng), pd(rng)};
    Shape xs{N, C};
    for (int a = 0; a < 2; ++a) xs.push_back(std::max(ext(rng), k[a] - 2 * p[a]));
    auto x = oracle::random_array(xs, rng);
    auto w = oracle::random_array({O, C, k[0], k[1]}, rng);
    auto b = oracle::random_array({O}, rng);
    auto y = conv2d(TD(x), TD(w), TD(b), s, p).value();
    expect_close(y, oracle::naive_conv(x, w, std::vector<double>(b.data(), b.data() + O), {s[0], s[1]}, {p[0], p[1]}), trial);
  }
}

TEST(Conv, RandomCasesMatchNaiveOracle3D) {
  std::mt19937_64 rng(32);
  std::uniform_int_distribution<int64_t> small(1, 3), ext(1, 7), kk(1, 3), st(1, 2), pd(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t N = small(rng), C = small(rng), O = small(rng);
    Ext3 k{kk(rng), kk(rng), kk(rng)}, s{st(rng), st(rng), st(rng)}, p{pd(rng), pd(rng), pd(rng)};
    Shape xs{N, C};
    for (int a = 0; a < 3; ++a) xs.push_back(std::max(ext(rng), k[a] - 2 * p[a]));
    auto x = oracle::random_array(xs, rng);
    auto w = oracle::random_array({O, C, k[0], k[1], k[2]}, rng);
    const bool with_bias = trial % 2 == 0;
    auto b = oracle::random_array({O}, rng);
    auto y = conv3d(TD(x), TD(w), with_bias ? TD(b) : TD(), s, p).value();
    std::vector<double> bv = with_bias ? std::vector<double>(b.data(), b.data() + O) : std::vector<double>{};
    expect_close(y, oracle::naive_conv(x, w, bv, {s[0], s[1], s[2]}, {p[0], p[1], p[2]}), trial);
  }
}

TEST(Pooling, RandomCasesMatchNaiveOracle) {
  std::mt19937_64 rng(33);
  std::uniform_int_distribution<int64_t> small(1, 3), ext(2, 9), kk(1, 3), st(1, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t N = small(rng), C = small(rng);
    Ext2 k{kk(rng), kk(rng)}, s{st(rng), st(rng)};
    // Padding below half the kernel keeps every window non-empty.
    Ext2 p{(k[0] - 1) / 2, (k[1] - 1) / 2};
    auto x = oracle::random_array({N, C, std::max(ext(rng), k[0]), std::max(ext(rng), k[1])}, rng);
    expect_close(max_pool2d(TD(x), k, s, p).value(), naive_max_pool(x, {k[0], k[1]}, {s[0], s[1]}, {p[0], p[1]}), trial);

    Ext3 k3{kk(rng), kk(rng), kk(rng)}, s3{st(rng), st(rng), st(rng)}, p3{(k3[0] - 1) / 2, (k3[1] - 1) / 2, (k3[2] - 1) / 2};
    auto x3 = oracle::random_array({N, C, std::max(ext(rng), k3[0]), std::max(ext(rng), k3[1]), std::max(ext(rng), k3[2])}, rng);
    expect_close(max_pool3d(TD(x3), k3, s3, p3).value(),
                 naive_max_pool(x3, {k3[0], k3[1], k3[2]}, {s3[0], s3[1], s3[2]}, {p3[0], p3[1], p3[2]}), trial);
  }
}

TEST(Conv, ChannelMismatchIsConfigError) {
  EXPECT_THROW(conv2d(ones({1, 2, 4, 4}), ones({1, 3, 3, 3}), TD()), ConfigError);
}

TEST(Conv, NonPositiveExtentIsConfigError) {
  EXPECT_THROW(conv2d(ones({1, 1, 2, 2}), ones({1, 1, 3, 3}), TD()), ConfigError);
  EXPECT_THROW(conv_out_extent(4, 3, 0, 0), ConfigError);
  EXPECT_EQ(conv_out_extent(448, 7, 2, 3), 224);
}

TEST(Conv, Linearity) {
  std::mt19937_64 rng(4);
  auto x = oracle::random_array({2, 2, 6, 6}, rng);
  auto y = oracle::random_array({2, 2, 6, 6}, rng);
  TD w(oracle::random_array({3, 2, 3, 3}, rng));
  const double a = 0.7, b = -1.3;
  NDArray<double> mix(x.shape());
  for (int64_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
  auto lhs = conv2d(TD(mix), w, TD(), {1, 1}, {1, 1}).value();
  auto cx = conv2d(TD(x), w, TD(), {1, 1}, {1, 1}).value();
  auto cy = conv2d(TD(y), w, TD(), {1, 1}, {1, 1}).value();
  for (int64_t i = 0; i < lhs.size(); ++i) {
    const double rhs = a * cx[i] + b * cy[i];
    EXPECT_NEAR(lhs[i], rhs, 1e-6 * std::max(1.0, std::abs(rhs)));
  }
}

TEST(Pointwise, Relu) {
  auto y = relu(TD::from({3}, {-1.0, 0.0, 2.0}));
  EXPECT_EQ(y.value().storage(), (std::vector<double>{0.0, 0.0, 2.0}));
}

TEST(Pooling, GlobalAveragePool) {
  auto x = TD::from({1, 2, 2, 2}, {1, 3, 5, 7, 0, 0, 0, 0});
  auto y = global_avg_pool(x);
  ASSERT_EQ(y.shape(), (Shape{1, 2}));
  EXPECT_DOUBLE_EQ(y.value()[0], 4.0);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.0);
}

TEST(Pooling, MaxPoolKernelLargerThanPaddedInputIsConfigError) {
  EXPECT_THROW(max_pool2d(ones({1, 1, 2, 2}), {3, 3}, {1, 1}), ConfigError);
}

TEST(Pooling, MaxPoolPicksWindowMaximum) {
  auto x = TD::from({1, 1, 2, 4}, {1, 5, 2, 0, 3, 4, 8, 7});
  auto y = max_pool2d(x, {2, 2}, {2, 2});
  EXPECT_EQ(y.value().storage(), (std::vector<double>{5, 8}));
}

TEST(BatchNorm, TrainingOutputHasUnitMoments) {
  std::mt19937_64 rng(5);
  TD x(oracle::random_array({4, 3, 8, 8}, rng, -3.0, 5.0));
  TD gamma = ones({3});
  TD beta(NDArray<double>({3}));
  NDArray<double> rm({3}), rv({3});
  rv.fill(1.0);
  auto y = batch_norm(x, gamma, beta, rm, rv, true).value();
  for (int64_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    int64_t cnt = 0;
    for (int64_t n = 0; n < 4; ++n)
      for (int64_t i = 0; i < 64; ++i) {
        m += y[(n * 3 + c) * 64 + i];
        ++cnt;
      }
    m /= static_cast<double>(cnt);
    for (int64_t n = 0; n < 4; ++n)
      for (int64_t i = 0; i < 64; ++i) v += std::pow(y[(n * 3 + c) * 64 + i] - m, 2);
    v /= static_cast<double>(cnt);
    EXPECT_NEAR(m, 0.0, 1e-4);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(BatchNorm, RunningStatsUseMomentumAndUnbiasedVariance) {
  auto x = TD::from({4, 1}, {1, 2, 3, 6});
  NDArray<double> rm({1}), rv({1});
  rv.fill(1.0);
  batch_norm(x, ones({1}), TD(NDArray<double>({1})), rm, rv, true);
  // mean 3, unbiased variance (4 + 1 + 0 + 9) / 3
  EXPECT_NEAR(rm[0], 0.1 * 3.0, 1e-12);
  EXPECT_NEAR(rv[0], 0.9 + 0.1 * 14.0 / 3.0, 1e-12);
}

TEST(BatchNorm, EvalUsesRunningStatsOnly) {
  auto x = TD::from({2, 1}, {10.0, 20.0});
  NDArray<double> rm({1}, {5.0}), rv({1}, {4.0});
  auto y = batch_norm(x, ones({1}), TD(NDArray<double>({1})), rm, rv, false).value();
  EXPECT_NEAR(y[0], (10.0 - 5.0) / std::sqrt(4.0 + 1e-5), 1e-12);
  EXPECT_NEAR(y[1], (20.0 - 5.0) / std::sqrt(4.0 + 1e-5), 1e-12);
  EXPECT_EQ(rm[0], 5.0);
}

TEST(BatchNorm, SingleValuePerChannelInTrainingIsRejected) {
  NDArray<double> rm({1}), rv({1});
  EXPECT_ANY_THROW(batch_norm(ones({1, 1}), ones({1}), TD(NDArray<double>({1})), rm, rv, true));
}

TEST(Concat, ShapeAndOrder) {
  auto a = TD::from({1, 2, 1, 1}, {1, 2});
  auto b = TD::from({1, 3, 1, 1}, {3, 4, 5});
  auto c = concat<double>({a, b}, 1);
  EXPECT_EQ(c.shape(), (Shape{1, 5, 1, 1}));
  EXPECT_EQ(c.value().storage(), (std::vector<double>{1, 2, 3, 4, 5}));
  auto big = concat<double>({ones({1, 2, 4, 4}), ones({1, 3, 4, 4})}, 1);
  EXPECT_EQ(big.shape(), (Shape{1, 5, 4, 4}));
  EXPECT_EQ(concat<double>({a}, 1).value(), a.value());
  EXPECT_THROW(concat<double>({ones({1, 2, 4, 4}), ones({1, 2, 3, 4})}, 1), ConfigError);
}

TEST(Loss, UniformLogitsGiveLogK) {
  auto loss = softmax_cross_entropy(TD(NDArray<double>({2, 3})), std::vector<int64_t>{0, 2});
  EXPECT_NEAR(loss.item(), std::log(3.0), 1e-12);
}

TEST(Loss, SaturatedMargin) {
  auto loss = softmax_cross_entropy(TD::from({1, 2}, {1000.0, 0.0}), std::vector<int64_t>{0});
  EXPECT_NEAR(loss.item(), 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(loss.item()));
}

TEST(Loss, MatchesDirectFormula) {
  std::mt19937_64 rng(6);
  auto logits = oracle::random_array({5, 4}, rng, -3.0, 3.0);
  std::vector<int64_t> labels{0, 3, 1, 2, 3};
  double ref = 0.0;
  for (int64_t n = 0; n < 5; ++n) {
    double z = 0.0;
    for (int64_t k = 0; k < 4; ++k) z += std::exp(logits[n * 4 + k]);
    ref += -(logits[n * 4 + labels[static_cast<size_t>(n)]] - std::log(z));
  }
  ref /= 5.0;
  EXPECT_NEAR(softmax_cross_entropy(TD(logits), labels).item(), ref, 1e-6 * ref);
}

TEST(Loss, LabelOutOfRangeIsInputError) {
  EXPECT_THROW(softmax_cross_entropy(TD(NDArray<double>({1, 2})), std::vector<int64_t>{2}), InputError);
}

TEST(Autodiff, SumGradientIsOnes) {
  TD x(NDArray<double>({2, 3}, {1, 2, 3, 4, 5, 6}), true);
  sum(x).backward();
  for (double g : x.grad()->values()) EXPECT_EQ(g, 1.0);
}

TEST(Autodiff, HalfSquareGradientIsX) {
  TD x(NDArray<double>({4}, {-1.5, 0.0, 2.0, 3.25}), true);
  scale(sum(mul(x, x)), 0.5).backward();
  EXPECT_EQ(x.grad()->storage(), x.value().storage());
}

TEST(Autodiff, BackwardOnNonScalarIsUsageError) {
  TD x(NDArray<double>({2}), true);
  EXPECT_THROW(relu(x).backward(), UsageError);
}

TEST(Autodiff, SecondBackwardIsUsageError) {
  TD x(NDArray<double>({2}, {1, 2}), true);
  auto loss = sum(mul(x, x));
  loss.backward();
  EXPECT_THROW(loss.backward(), UsageError);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  TD x(NDArray<double>({2}, {1, 2}), true);
  NoGradGuard guard;
  auto y = sum(x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

TEST(Autodiff, GradientsAccumulateAcrossUses) {
  TD x(NDArray<double>({1}, {3.0}), true);
  sum(add(x, add(x, x))).backward();
  EXPECT_EQ((*x.grad())[0], 3.0);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(7);
  auto p = softmax(oracle::random_array({6, 5}, rng, -50.0, 50.0));
  for (int64_t n = 0; n < 6; ++n) {
    double s = 0;
    for (int64_t k = 0; k < 5; ++k) s += p[n * 5 + k];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}
