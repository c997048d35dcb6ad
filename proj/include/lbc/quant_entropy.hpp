#pragma once

// Quantization, the discretized Gaussian likelihood used as the rate model,
// and the integer CDF tables that carry that likelihood to the rANS coder.

#include <cstdint>
#include <vector>

#include "lbc/autodiff.hpp"
#include "lbc/random.hpp"

namespace lbc {

enum class LatentStage { kContinuous, kQuantized, kNoisy };

struct LatentGrid {
  Tensor<float> values;  // M x Hb x Wb
  LatentStage stage = LatentStage::kContinuous;
};

// Floor applied to training likelihoods before the log.
inline constexpr double kLikelihoodFloor = 0x1.0p-24;
inline constexpr int kCdfPrecision = 16;
// Tables span round(mu) +- ceil(kTailFactor * sigma), plus one escape bucket per side.
inline constexpr double kTailFactor = 6.0;

// Round half away from zero (std::round).
float round_half_away(float v);
LatentGrid quantize_round(const LatentGrid& y);

// iid U[-1/2, 1/2] of the given shape.
Tensor<float> uniform_noise(const Shape& shape, Rng& rng);
LatentGrid add_uniform_noise(const LatentGrid& y, Rng& rng);

// Standard normal CDF via erfc (accurate in both tails).
double normal_cdf(double z);

// P(v - 1/2 < Y < v + 1/2) for Y ~ N(mu, sigma^2), evaluated on |v - mu| so
// both CDF arguments are nonpositive and the difference does not cancel.
double gaussian_bin_probability(double v, double mu, double sigma);

// Elementwise bin probability, floored at kLikelihoodFloor. Differentiable in
// all three inputs. At the floor the gradient is the floor times the slope of
// log p at the bin's nearer edge, and passes only when it would raise p.
template <typename T>
ad::Var<T> gaussian_likelihood(const ad::Var<T>& v, const ad::Var<T>& mu, const ad::Var<T>& sigma);

// Sum of -log2 p. Throws NumericError on nonpositive p.
template <typename T>
ad::Var<T> rate_bits(const ad::Var<T>& p);

// Discrete CDF over [symbol_min, symbol_max]. The two end symbols are escape
// buckets: the low one stands for every value <= symbol_min and the high one
// for every value >= symbol_max. A one-symbol table codes only its value.
struct CdfTable {
  std::int64_t symbol_min = 0;
  std::int64_t symbol_max = 0;
  int precision = kCdfPrecision;
  std::vector<std::uint32_t> cdf;  // size = symbol count + 1; cdf[0] = 0, back = 2^precision

  std::size_t symbol_count() const { return cdf.size() - 1; }
  std::uint32_t freq(std::size_t index) const { return cdf[index + 1] - cdf[index]; }
  std::uint32_t total() const { return std::uint32_t{1} << precision; }

  // Throws Error unless strictly increasing from 0 to 2^precision.
  void validate() const;
};

// Table for N(mu, sigma^2) discretized to integer bins. Every symbol gets mass
// >= 1; the rounding surplus or deficit is spread in proportion to mass, so
// the largest symbols absorb most of it.
// Throws Error for precision outside [8, 16] or sigma < kSigmaMin, and
// NumericError for non-finite parameters. Bitwise deterministic.
CdfTable build_cdf_table(double mu, double sigma, int precision = kCdfPrecision);

// Ideal code length of `symbol` under `table`, including escape raw bits.
double symbol_cost_bits(const CdfTable& table, std::int64_t symbol);

}  // namespace lbc
