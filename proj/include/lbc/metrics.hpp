#pragma once

#include <limits>

#include "lbc/blocks.hpp"

namespace lbc {

// Mean squared error over all RGB samples on the [0, 255] scale.
double mse_255(const ImageRGB& a, const ImageRGB& b);

// 10 log10(255^2 / MSE). Identical images give +infinity.
double psnr(const ImageRGB& a, const ImageRGB& b);

inline bool is_infinite_psnr(double v) { return v == std::numeric_limits<double>::infinity(); }

}  // namespace lbc
