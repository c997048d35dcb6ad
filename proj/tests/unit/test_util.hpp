#pragma once

#include <functional>
#include <vector>

#include "lbc/autodiff.hpp"
#include "lbc/blocks.hpp"
#include "lbc/layers.hpp"
#include "lbc/random.hpp"

namespace lbc::test {

template <typename T>
std::vector<T> vec(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

inline Tensor<double> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor<float> random_tensor_f(const Shape& shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<float> t(shape);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

inline ImageRGB random_image(std::int64_t h, std::int64_t w, Rng& rng) {
  return ImageRGB(random_tensor_f(Shape{3, h, w}, rng));
}

// Direct-summation cross-correlation, zero padding, stride 1. Masked taps
// (mask[ky*kw+kx] == 0) contribute nothing.
inline Tensor<double> naive_conv(const Tensor<double>& in, const Tensor<double>& w,
                                 const Tensor<double>* bias, int pad,
                                 const std::vector<std::uint8_t>& mask = {}) {
  const auto cin = in.dim(0), h = in.dim(1), wd = in.dim(2);
  const auto cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const auto oh = h + 2 * pad - kh + 1, ow = wd + 2 * pad - kw + 1;
  Tensor<double> out(Shape{cout, oh, ow});
  for (std::int64_t o = 0; o < cout; ++o)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t x = 0; x < ow; ++x) {
        double acc = bias ? (*bias)[static_cast<std::size_t>(o)] : 0.0;
        for (std::int64_t c = 0; c < cin; ++c)
          for (std::int64_t ky = 0; ky < kh; ++ky)
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              if (!mask.empty() && !mask[static_cast<std::size_t>(ky * kw + kx)]) continue;
              const auto iy = y + ky - pad, ix = x + kx - pad;
              if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
              acc += w[static_cast<std::size_t>(((o * cin + c) * kh + ky) * kw + kx)] * in.at(c, iy, ix);
            }
        out.at(o, y, x) = acc;
      }
  return out;
}

// Central differences of a scalar function of one parameter tensor.
inline Tensor<double> fd_gradient(const std::function<double()>& f, Tensor<double>& x, double eps = 1e-6) {
  Tensor<double> g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double fp = f();
    x[i] = keep - eps;
    const double fm = f();
    x[i] = keep;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

inline double max_rel_err(const Tensor<double>& a, const Tensor<double>& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return scale == 0.0 ? diff : diff / scale;
}

inline HyperParams tiny_hps(int block = 4, int n = 8, int m = 2, int k2 = 1) {
  HyperParams h;
  h.block = block;
  h.n = n;
  h.m = m;
  h.k2 = k2;
  h.lambda = 0.01;
  return h;
}

}  // namespace lbc::test
