#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace lbc {

// mt19937_64 with platform-independent conversions to floating point
// (std::uniform_real_distribution is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  // Seeded from several words through std::seed_seq, e.g. (run seed, step).
  static Rng from_words(std::initializer_list<std::uint64_t> words) {
    std::vector<std::uint32_t> v;
    for (auto w : words) {
      v.push_back(static_cast<std::uint32_t>(w));
      v.push_back(static_cast<std::uint32_t>(w >> 32));
    }
    std::seed_seq seq(v.begin(), v.end());
    Rng r;
    r.eng_.seed(seq);
    return r;
  }

  std::uint64_t next() { return eng_(); }
  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // [0, n); n > 0.
  std::uint64_t below(std::uint64_t n) { return eng_() % n; }
  // Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace lbc
