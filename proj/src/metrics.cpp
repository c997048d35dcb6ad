#include "lbc/metrics.hpp"

#include <cmath>

namespace lbc {

double mse_255(const ImageRGB& a, const ImageRGB& b) {
  if (a.data.shape() != b.data.shape()) {
    throw DimensionError("image size mismatch: " + shape_str(a.data.shape()) + " vs " +
                         shape_str(b.data.shape()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.numel(); ++i) {
    const double d = (static_cast<double>(a.data[i]) - b.data[i]) * 255.0;
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.numel());
}

double psnr(const ImageRGB& a, const ImageRGB& b) {
  const double mse = mse_255(a, b);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

}  // namespace lbc
