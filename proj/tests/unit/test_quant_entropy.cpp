#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "lbc/quant_entropy.hpp"
#include "test_util.hpp"

namespace lbc {
namespace {

using ad::Var;

long double phi_ld(long double z) { return 0.5L * std::erfc(-z / std::sqrt(2.0L)); }

// Adaptive Simpson on the Gaussian density.
double simpson(const std::function<double(double)>& f, double a, double b, double eps, int depth) {
  const double c = 0.5 * (a + b), fa = f(a), fb = f(b), fc = f(c);
  std::function<double(double, double, double, double, double, double, double, int)> rec =
      [&](double a0, double b0, double fa0, double fb0, double fc0, double whole, double e, int d) {
        const double c0 = 0.5 * (a0 + b0);
        const double l = 0.5 * (a0 + c0), r = 0.5 * (c0 + b0);
        const double fl = f(l), fr = f(r);
        const double left = (c0 - a0) / 6 * (fa0 + 4 * fl + fc0);
        const double right = (b0 - c0) / 6 * (fc0 + 4 * fr + fb0);
        if (d <= 0 || std::abs(left + right - whole) <= 15 * e) return left + right + (left + right - whole) / 15;
        return rec(a0, c0, fa0, fc0, fl, left, e / 2, d - 1) + rec(c0, b0, fc0, fb0, fr, right, e / 2, d - 1);
      };
  return rec(a, b, fa, fb, fc, (b - a) / 6 * (fa + 4 * fc + fb), eps, depth);
}

TEST(Quantize, RoundingConvention) {
  EXPECT_EQ(round_half_away(0.49f), 0.0f);
  EXPECT_EQ(round_half_away(-0.49f), 0.0f);
  EXPECT_EQ(round_half_away(1.5f), 2.0f);
  EXPECT_EQ(round_half_away(-1.5f), -2.0f);
  EXPECT_EQ(round_half_away(2.5f), 3.0f);
  for (float k : {-7.0f, -1.0f, 0.0f, 3.0f, 100.0f}) EXPECT_EQ(round_half_away(k), k);
  LatentGrid g{Tensor<float>(Shape{1, 1, 3}, std::vector<float>{0.2f, -2.5f, 4.7f}), LatentStage::kContinuous};
  auto q = quantize_round(g);
  EXPECT_EQ(q.stage, LatentStage::kQuantized);
  EXPECT_EQ(q.values.vec(), (std::vector<float>{0.0f, -3.0f, 5.0f}));
}

TEST(Noise, BoundedReproducibleAndZeroMean) {
  Rng a(3), b(3);
  LatentGrid g{Tensor<float>(Shape{2, 4, 4}, 1.25f), LatentStage::kContinuous};
  auto na = add_uniform_noise(g, a);
  auto nb = add_uniform_noise(g, b);
  EXPECT_EQ(na.stage, LatentStage::kNoisy);
  EXPECT_TRUE(bitwise_equal(na.values, nb.values));
  for (float v : na.values.data()) EXPECT_LE(std::abs(v - 1.25f), 0.5f);

  Rng rng(4);
  const auto u = uniform_noise(Shape{1000000}, rng);
  double sum = 0.0;
  for (float v : u.data()) sum += v;
  EXPECT_NEAR(sum / 1e6, 0.0, 3e-3);
}

TEST(Likelihood, StandardBinAgainstErfOracle) {
  const long double oracle = phi_ld(0.5L) - phi_ld(-0.5L);
  EXPECT_NEAR(gaussian_bin_probability(0.0, 0.0, 1.0), static_cast<double>(oracle), 1e-15);
  EXPECT_NEAR(gaussian_bin_probability(0.0, 0.0, 1.0), 0.382925, 1e-6);
  auto p = gaussian_likelihood(ad::constant(Tensor<double>(Shape{1}, 0.0)),
                               ad::constant(Tensor<double>(Shape{1}, 0.0)),
                               ad::constant(Tensor<double>(Shape{1}, 1.0)));
  EXPECT_NEAR(p.value()[0], 0.382925, 1e-6);
}

TEST(Likelihood, SharpLimitAndSymmetry) {
  EXPECT_NEAR(gaussian_bin_probability(3.0, 3.0, kSigmaMin), 1.0, 1e-12);
  auto one = gaussian_likelihood(ad::constant(Tensor<double>(Shape{1}, 2.0)),
                                 ad::constant(Tensor<double>(Shape{1}, 2.0)),
                                 ad::constant(Tensor<double>(Shape{1}, double(kSigmaMin))));
  EXPECT_NEAR(rate_bits(one).value().item(), 0.0, 1e-9);
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const double mu = rng.uniform(-10, 10), d = rng.uniform(0, 6), s = rng.uniform(0.04, 5);
    EXPECT_NEAR(gaussian_bin_probability(mu + d, mu, s), gaussian_bin_probability(mu - d, mu, s), 1e-12);
  }
}

TEST(Likelihood, TailIsStableAndFloored) {
  // Far tail: the direct CDF difference would cancel to zero.
  const double p = gaussian_bin_probability(12.0, 0.0, 1.0);
  const long double oracle = phi_ld(-11.5L) - phi_ld(-12.5L);
  EXPECT_GT(p, 0.0);
  EXPECT_NEAR(p / static_cast<double>(oracle), 1.0, 1e-9);
  auto f = gaussian_likelihood(ad::constant(Tensor<double>(Shape{1}, 50.0)),
                               ad::constant(Tensor<double>(Shape{1}, 0.0)),
                               ad::constant(Tensor<double>(Shape{1}, 1.0)));
  EXPECT_EQ(f.value()[0], kLikelihoodFloor);
}

TEST(Likelihood, MatchesDensityIntegral) {
  Rng rng(6);
  for (int i = 0; i < 30; ++i) {
    const double mu = rng.uniform(-4, 4), s = rng.uniform(0.3, 4);
    const double k = std::round(rng.uniform(-6, 6));
    auto pdf = [&](double t) {
      const double z = (t - mu) / s;
      return std::exp(-0.5 * z * z) / (s * std::sqrt(2 * M_PI));
    };
    const double integral = simpson(pdf, k - 0.5, k + 0.5, 1e-13, 40);
    EXPECT_NEAR(gaussian_bin_probability(k, mu, s), integral, 1e-9);
  }
}

TEST(Likelihood, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  auto v = ad::parameter(test::random_tensor(Shape{2, 3, 2}, rng, -2, 2));
  auto mu = ad::parameter(test::random_tensor(Shape{2, 3, 2}, rng, -1, 1));
  auto sigma = ad::parameter(test::random_tensor(Shape{2, 3, 2}, rng, 0.3, 2));
  std::vector<Var<double>> params{v, mu, sigma};
  auto f = [&] { return rate_bits(gaussian_likelihood(v, mu, sigma)); };
  EXPECT_LT(ad::grad_check(f, params), 1e-5);
}

TEST(Likelihood, FloorPassesOnlyHelpfulGradient) {
  auto v = ad::parameter(Tensor<double>(Shape{1}, 40.0));
  auto mu = ad::parameter(Tensor<double>(Shape{1}, 0.0));
  auto sigma = ad::parameter(Tensor<double>(Shape{1}, 1.0));
  ad::backward(rate_bits(gaussian_likelihood(v, mu, sigma)));
  // Rate falls when mu moves toward v and sigma grows.
  EXPECT_LT(mu.grad()[0], 0.0);
  EXPECT_LT(sigma.grad()[0], 0.0);
  EXPECT_GT(v.grad()[0], 0.0);
  // d rate / d mu = -(inverse Mills ratio at 39.5) / ln 2.
  const double lam = 39.5 + 1.0 / 39.5;
  EXPECT_NEAR(mu.grad()[0], -lam / std::log(2.0), 0.05);
  EXPECT_NEAR(v.grad()[0], lam / std::log(2.0), 0.05);
}

TEST(Rate, SimpleValuesAndOracle) {
  auto ones = ad::constant(Tensor<double>(Shape{5}, 1.0));
  EXPECT_EQ(rate_bits(ones).value().item(), 0.0);
  auto halves = ad::constant(Tensor<double>(Shape{7}, 0.5));
  EXPECT_DOUBLE_EQ(rate_bits(halves).value().item(), 7.0);
  Rng rng(8);
  auto p = test::random_tensor(Shape{1000}, rng, 1e-6, 1.0);
  long double oracle = 0;
  for (double x : p.data()) oracle -= std::log2(static_cast<long double>(x));
  const double got = rate_bits(ad::constant(p)).value().item();
  EXPECT_NEAR(got / static_cast<double>(oracle), 1.0, 1e-9);
  EXPECT_THROW(rate_bits(ad::constant(Tensor<double>(Shape{2}, 0.0))), NumericError);
}

void expect_valid(const CdfTable& t) {
  ASSERT_EQ(t.cdf.front(), 0u);
  ASSERT_EQ(t.cdf.back(), t.total());
  for (std::size_t i = 0; i < t.symbol_count(); ++i) ASSERT_GE(t.freq(i), 1u);
  EXPECT_NO_THROW(t.validate());
}

TEST(CdfTable, StandardNormalMassAndRange) {
  auto t = build_cdf_table(0.0, 1.0, 16);
  expect_valid(t);
  EXPECT_EQ(t.symbol_min, -7);
  EXPECT_EQ(t.symbol_max, 7);
  const double mass0 = t.freq(static_cast<std::size_t>(0 - t.symbol_min)) / 65536.0;
  EXPECT_NEAR(mass0, 0.382925, 1e-3);
}

TEST(CdfTable, DegenerateSigma) {
  auto t = build_cdf_table(0.0, kSigmaMin, 16);
  expect_valid(t);
  const double mass0 = t.freq(static_cast<std::size_t>(-t.symbol_min)) / 65536.0;
  EXPECT_GT(mass0, 0.999);
}

TEST(CdfTable, Errors) {
  EXPECT_THROW(build_cdf_table(0, 1, 7), Error);
  EXPECT_THROW(build_cdf_table(0, 1, 17), Error);
  EXPECT_THROW(build_cdf_table(0, 0.01, 16), Error);
  EXPECT_THROW(build_cdf_table(std::nan(""), 1, 16), NumericError);
  EXPECT_THROW(build_cdf_table(0, std::numeric_limits<double>::infinity(), 16), NumericError);
}

TEST(CdfTable, RandomTablesValidAndDeterministic) {
  Rng rng(9);
  for (int i = 0; i < 2000; ++i) {
    const double mu = rng.uniform(-300, 300);
    const double s = std::exp(rng.uniform(std::log(0.04), std::log(5000.0)));
    const int prec = 8 + static_cast<int>(rng.below(9));
    auto a = build_cdf_table(mu, s, prec);
    expect_valid(a);
    auto b = build_cdf_table(mu, s, prec);
    EXPECT_EQ(a.cdf, b.cdf);
    EXPECT_EQ(a.symbol_min, b.symbol_min);
  }
}

// Interior masses equal the model's bin probabilities up to table rounding.
TEST(CdfTable, MassesMatchModelProbabilities) {
  Rng rng(10);
  for (int i = 0; i < 200; ++i) {
    const double mu = rng.uniform(-20, 20), s = rng.uniform(0.04, 60);
    const auto t = build_cdf_table(mu, s, 16);
    for (std::int64_t k = t.symbol_min + 1; k < t.symbol_max; ++k) {
      const double p = gaussian_bin_probability(static_cast<double>(k), mu, s);
      const double q = t.freq(static_cast<std::size_t>(k - t.symbol_min)) / 65536.0;
      ASSERT_NEAR(q, p, std::max(2.0 / 65536.0, 0.01 * p)) << mu << " " << s << " " << k;
    }
  }
}

// Expected code-length difference between the training rate term at integer
// latents and the coder tables, for scales typical of trained latents.
TEST(CdfTable, ExpectedLogMassGapBelowTwoMillibits) {
  Rng rng(11);
  for (int i = 0; i < 300; ++i) {
    const double mu = rng.uniform(-20, 20), s = std::exp(rng.uniform(std::log(0.04), std::log(10.0)));
    const auto t = build_cdf_table(mu, s, 16);
    double gap = 0.0;
    for (std::int64_t k = t.symbol_min; k <= t.symbol_max; ++k) {
      const double p = gaussian_bin_probability(static_cast<double>(k), mu, s);
      const double q = t.freq(static_cast<std::size_t>(k - t.symbol_min)) / 65536.0;
      if (p > 0) gap += p * std::abs(std::log2(p) - std::log2(q));
    }
    EXPECT_LT(gap, 2e-3) << mu << " " << s;
  }
}

TEST(CdfTable, EscapeCostIncludesRawBits) {
  const auto t = build_cdf_table(0.0, 1.0, 16);
  const double edge = -std::log2(t.freq(t.symbol_count() - 1) / 65536.0);
  EXPECT_NEAR(symbol_cost_bits(t, t.symbol_max + 5), edge + 16, 1e-12);
  EXPECT_NEAR(symbol_cost_bits(t, t.symbol_max + 70000), edge + 32, 1e-12);
  const double low = -std::log2(t.freq(0) / 65536.0);
  EXPECT_NEAR(symbol_cost_bits(t, t.symbol_min), low + 16, 1e-12);
  EXPECT_NEAR(symbol_cost_bits(t, 0), -std::log2(t.freq(static_cast<std::size_t>(-t.symbol_min)) / 65536.0), 1e-12);
}

}  // namespace
}  // namespace lbc
