#pragma once

// Block-grid geometry: packing B x B RGB pixel blocks into channel vectors and
// back, and padding images to block multiples.
//
// Intra-block scan order (frozen; checkpoints and bitstreams depend on it):
//   channel index = color * B*B + row_in_block * B + col_in_block

#include <cstdint>
#include <utility>

#include "lbc/tensor.hpp"

namespace lbc {

// Identifier of the scan order above, recorded in checkpoints.
inline constexpr std::uint8_t kScanOrderColorRowCol = 1;

// 3 x H x W, values in [0, 1].
struct ImageRGB {
  Tensor<float> data;

  ImageRGB() = default;
  explicit ImageRGB(Tensor<float> t);
  static ImageRGB filled(std::int64_t height, std::int64_t width, float value);

  std::int64_t height() const { return data.dim(1); }
  std::int64_t width() const { return data.dim(2); }
  std::int64_t pixels() const { return height() * width(); }
  float& at(std::int64_t c, std::int64_t y, std::int64_t x) { return data.at(c, y, x); }
  float at(std::int64_t c, std::int64_t y, std::int64_t x) const { return data.at(c, y, x); }
};

// C x Hb x Wb grid; each site holds one B x B block (C = 3B^2 in the pixel
// domain, M for latents).
struct BlockTensor {
  Tensor<float> data;
  int block = 0;

  std::int64_t channels() const { return data.dim(0); }
  std::int64_t rows() const { return data.dim(1); }
  std::int64_t cols() const { return data.dim(2); }
};

struct PadInfo {
  std::int64_t orig_h = 0, orig_w = 0;
  std::int64_t padded_h = 0, padded_w = 0;

  bool operator==(const PadInfo&) const = default;
};

// Smallest multiple of `block` that is >= n.
std::int64_t round_up_to_block(std::int64_t n, int block);

// Right/bottom edge replication up to the next block multiple.
std::pair<ImageRGB, PadInfo> pad_to_block_multiple(const ImageRGB& img, int block);

// Top-left orig_h x orig_w window of a padded image.
ImageRGB crop_to_original(const ImageRGB& img, const PadInfo& pad);

// Throws DimensionError unless H and W are multiples of `block`.
BlockTensor b2c(const ImageRGB& img, int block);

// Throws DimensionError unless C == 3 * block^2.
ImageRGB c2b(const BlockTensor& bt);
ImageRGB c2b(const Tensor<float>& blocks, int block);

}  // namespace lbc
