#include "lbc/quant_entropy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lbc/layers.hpp"

namespace lbc {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kLn2 = 0.69314718055994530942;
// Bits per raw escape chunk; a chunk equal to kEscapeChunkMax continues.
constexpr int kEscapeChunkBits = 16;
constexpr std::int64_t kEscapeChunkMax = (1 << kEscapeChunkBits) - 1;
constexpr std::int64_t kMaxCenter = std::int64_t{1} << 40;

double normal_pdf(double z) { return kInvSqrt2Pi * std::exp(-0.5 * z * z); }

// pdf(z) / (1 - cdf(z)); asymptotic form once the tail underflows.
double inverse_mills(double z) {
  if (z > 37.0) return z + 1.0 / z;
  return normal_pdf(z) / (0.5 * std::erfc(z * kInvSqrt2));
}
}  // namespace

float round_half_away(float v) { return std::round(v); }

LatentGrid quantize_round(const LatentGrid& y) {
  LatentGrid out{y.values, LatentStage::kQuantized};
  for (auto& v : out.values.data()) v = round_half_away(v);
  return out;
}

Tensor<float> uniform_noise(const Shape& shape, Rng& rng) {
  Tensor<float> t(shape);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform() - 0.5);
  return t;
}

LatentGrid add_uniform_noise(const LatentGrid& y, Rng& rng) {
  LatentGrid out{y.values, LatentStage::kNoisy};
  const auto noise = uniform_noise(y.values.shape(), rng);
  for (std::size_t i = 0; i < noise.numel(); ++i) out.values[i] += noise[i];
  return out;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z * kInvSqrt2); }

double gaussian_bin_probability(double v, double mu, double sigma) {
  const double d = std::abs(v - mu);
  return normal_cdf((0.5 - d) / sigma) - normal_cdf((-0.5 - d) / sigma);
}

template <typename T>
ad::Var<T> gaussian_likelihood(const ad::Var<T>& v, const ad::Var<T>& mu, const ad::Var<T>& sigma) {
  if (v.shape() != mu.shape() || v.shape() != sigma.shape()) {
    throw DimensionError("gaussian_likelihood: shape mismatch " + shape_str(v.shape()) + ", " +
                         shape_str(mu.shape()) + ", " + shape_str(sigma.shape()));
  }
  const std::size_t n = v.numel();
  Tensor<T> p(v.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double s = static_cast<double>(sigma.value()[i]);
    if (!(s > 0.0)) throw NumericError("gaussian_likelihood: nonpositive sigma");
    const double raw = gaussian_bin_probability(v.value()[i], mu.value()[i], s);
    p[i] = static_cast<T>(std::max(raw, kLikelihoodFloor));
  }
  return ad::make_op<T>("gaussian_likelihood", std::move(p), {v, mu, sigma},
                        [v, mu, sigma](const Tensor<T>& g) {
    const std::size_t n = g.numel();
    const bool gv = v.requires_grad(), gm = mu.requires_grad(), gs = sigma.requires_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double s = sigma.value()[i];
      const double d = static_cast<double>(v.value()[i]) - mu.value()[i];
      const double raw = gaussian_bin_probability(v.value()[i], mu.value()[i], s);
      double dd, ds;
      if (raw < kLikelihoodFloor) {
        if (!(g[i] < T(0))) continue;
        // Deep tail: the bin mass is dominated by its nearer edge, so take the
        // derivative of log p there and scale by the floored value. The pdf
        // itself may underflow, which would silence the gradient.
        const double a = std::abs(d), l = (a - 0.5) / s;
        if (!(l > 0.0)) continue;
        const double lam = inverse_mills(l);
        dd = (d < 0 ? 1.0 : -1.0) * kLikelihoodFloor * lam / s;
        ds = kLikelihoodFloor * lam * l / s;
      } else {
        const double u = (d + 0.5) / s, l = (d - 0.5) / s;
        const double pu = normal_pdf(u), pl = normal_pdf(l);
        dd = (pu - pl) / s;
        ds = -(pu * u - pl * l) / s;
      }
      const double gi = g[i];
      if (gv) v.node()->grad_buffer()[i] += static_cast<T>(gi * dd);
      if (gm) mu.node()->grad_buffer()[i] -= static_cast<T>(gi * dd);
      if (gs) sigma.node()->grad_buffer()[i] += static_cast<T>(gi * ds);
    }
  });
}

template <typename T>
ad::Var<T> rate_bits(const ad::Var<T>& p) {
  return ad::scale(ad::sum(ad::log(p)), static_cast<T>(-1.0 / kLn2));
}

void CdfTable::validate() const {
  if (precision < 1 || precision > 16 || cdf.size() < 2 || cdf.front() != 0 ||
      cdf.back() != total() || symbol_max - symbol_min + 2 != static_cast<std::int64_t>(cdf.size())) {
    throw Error("invalid CDF table layout");
  }
  for (std::size_t i = 1; i < cdf.size(); ++i) {
    if (cdf[i] <= cdf[i - 1]) throw Error("CDF table is not strictly increasing");
  }
}

CdfTable build_cdf_table(double mu, double sigma, int precision) {
  if (precision < 8 || precision > 16) {
    throw Error("CDF precision must be in [8, 16], got " + std::to_string(precision));
  }
  if (!std::isfinite(mu) || !std::isfinite(sigma)) throw NumericError("non-finite Gaussian parameters");
  if (sigma < static_cast<double>(kSigmaMin)) throw Error("sigma below the scale floor");

  const std::int64_t center =
      std::clamp(static_cast<std::int64_t>(std::round(std::clamp(mu, -1e15, 1e15))), -kMaxCenter,
                 kMaxCenter);
  const std::int64_t max_half = ((std::int64_t{1} << (precision - 1)) - 3) / 2;
  const std::int64_t half =
      std::min(static_cast<std::int64_t>(std::ceil(std::min(kTailFactor * sigma, 1e9))), max_half);

  CdfTable t;
  t.precision = precision;
  t.symbol_min = center - half - 1;
  t.symbol_max = center + half + 1;
  const std::size_t count = static_cast<std::size_t>(t.symbol_max - t.symbol_min + 1);

  std::vector<double> prob(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double k = static_cast<double>(t.symbol_min + static_cast<std::int64_t>(i));
    if (i == 0) {
      prob[i] = normal_cdf((k + 0.5 - mu) / sigma);
    } else if (i + 1 == count) {
      prob[i] = normal_cdf((mu - (k - 0.5)) / sigma);
    } else {
      prob[i] = gaussian_bin_probability(k, mu, sigma);
    }
  }

  const std::int64_t total = std::int64_t{1} << precision;
  std::vector<std::int64_t> freq(count);
  std::int64_t sum = 0;
  for (std::size_t i = 0; i < count; ++i) {
    freq[i] = std::max<std::int64_t>(1, static_cast<std::int64_t>(
                                            std::floor(prob[i] * static_cast<double>(total) + 0.5)));
    sum += freq[i];
  }
  if (sum != total) {
    // Proportional share first (integer arithmetic), then +-1 round robin
    // over symbols by decreasing mass. Shrinking never takes a symbol below 1.
    const std::int64_t diff = total - sum;
    const bool shrink = diff < 0;
    std::int64_t base = 0;
    for (std::int64_t f : freq) base += shrink ? f - 1 : f;
    std::int64_t rest = diff;
    for (std::size_t i = 0; i < count; ++i) {
      const std::int64_t share = diff * (shrink ? freq[i] - 1 : freq[i]) / base;
      freq[i] += share;
      rest -= share;
    }
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return freq[a] > freq[b]; });
    while (rest != 0) {
      for (std::size_t i : order) {
        if (rest == 0) break;
        if (rest > 0) {
          ++freq[i];
          --rest;
        } else if (freq[i] > 1) {
          --freq[i];
          ++rest;
        }
      }
    }
  }

  t.cdf.resize(count + 1);
  t.cdf[0] = 0;
  for (std::size_t i = 0; i < count; ++i) {
    t.cdf[i + 1] = t.cdf[i] + static_cast<std::uint32_t>(freq[i]);
  }
  return t;
}

double symbol_cost_bits(const CdfTable& table, std::int64_t symbol) {
  std::size_t index;
  double extra = 0.0;
  if (table.symbol_count() == 1) {
    index = 0;
  } else if (symbol <= table.symbol_min || symbol >= table.symbol_max) {
    const std::int64_t offset =
        symbol <= table.symbol_min ? table.symbol_min - symbol : symbol - table.symbol_max;
    extra = kEscapeChunkBits * static_cast<double>(offset / kEscapeChunkMax + 1);
    index = symbol <= table.symbol_min ? 0 : table.symbol_count() - 1;
  } else {
    index = static_cast<std::size_t>(symbol - table.symbol_min);
  }
  return table.precision - std::log2(static_cast<double>(table.freq(index))) + extra;
}

template ad::Var<float> gaussian_likelihood(const ad::Var<float>&, const ad::Var<float>&,
                                            const ad::Var<float>&);
template ad::Var<double> gaussian_likelihood(const ad::Var<double>&, const ad::Var<double>&,
                                             const ad::Var<double>&);
template ad::Var<float> rate_bits(const ad::Var<float>&);
template ad::Var<double> rate_bits(const ad::Var<double>&);

}  // namespace lbc
