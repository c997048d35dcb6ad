#include "lbc/blocks.hpp"

#include <algorithm>
#include <string>

namespace lbc {

ImageRGB::ImageRGB(Tensor<float> t) : data(std::move(t)) {
  if (data.rank() != 3 || data.dim(0) != 3 || data.dim(1) < 1 || data.dim(2) < 1) {
    throw DimensionError("ImageRGB expects 3 x H x W with H, W >= 1, got " +
                         shape_str(data.shape()));
  }
  for (float v : data.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw Error("ImageRGB values must lie in [0, 1]");
  }
}

ImageRGB ImageRGB::filled(std::int64_t height, std::int64_t width, float value) {
  return ImageRGB(Tensor<float>(Shape{3, height, width}, value));
}

std::int64_t round_up_to_block(std::int64_t n, int block) {
  return (n + block - 1) / block * block;
}

std::pair<ImageRGB, PadInfo> pad_to_block_multiple(const ImageRGB& img, int block) {
  if (block < 1) throw DimensionError("block size must be >= 1");
  PadInfo info;
  info.orig_h = img.height();
  info.orig_w = img.width();
  info.padded_h = round_up_to_block(info.orig_h, block);
  info.padded_w = round_up_to_block(info.orig_w, block);
  if (info.padded_h == info.orig_h && info.padded_w == info.orig_w) return {img, info};

  ImageRGB out = ImageRGB::filled(info.padded_h, info.padded_w, 0.0f);
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < info.padded_h; ++y) {
      const std::int64_t sy = std::min(y, info.orig_h - 1);
      for (std::int64_t x = 0; x < info.padded_w; ++x) {
        out.at(c, y, x) = img.at(c, sy, std::min(x, info.orig_w - 1));
      }
    }
  }
  return {std::move(out), info};
}

ImageRGB crop_to_original(const ImageRGB& img, const PadInfo& pad) {
  if (img.height() != pad.padded_h || img.width() != pad.padded_w || pad.orig_h > pad.padded_h ||
      pad.orig_w > pad.padded_w) {
    throw DimensionError("crop_to_original: image does not match pad info");
  }
  if (pad.orig_h == pad.padded_h && pad.orig_w == pad.padded_w) return img;
  ImageRGB out = ImageRGB::filled(pad.orig_h, pad.orig_w, 0.0f);
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < pad.orig_h; ++y) {
      for (std::int64_t x = 0; x < pad.orig_w; ++x) out.at(c, y, x) = img.at(c, y, x);
    }
  }
  return out;
}

BlockTensor b2c(const ImageRGB& img, int block) {
  const std::int64_t h = img.height(), w = img.width(), b = block;
  if (block < 1 || h % b != 0 || w % b != 0) {
    throw DimensionError("b2c: " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible by block size " + std::to_string(block));
  }
  const std::int64_t hb = h / b, wb = w / b;
  BlockTensor out{Tensor<float>(Shape{3 * b * b, hb, wb}), block};
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t ch = c * b * b + (y % b) * b + (x % b);
        out.data.at(ch, y / b, x / b) = img.at(c, y, x);
      }
    }
  }
  return out;
}

ImageRGB c2b(const Tensor<float>& blocks, int block) {
  const std::int64_t b = block;
  if (blocks.rank() != 3 || block < 1 || blocks.dim(0) != 3 * b * b) {
    throw DimensionError("c2b: expected " + std::to_string(3 * b * b) +
                         " channels for block size " + std::to_string(block) + ", got " +
                         shape_str(blocks.shape()));
  }
  const std::int64_t hb = blocks.dim(1), wb = blocks.dim(2);
  ImageRGB out = ImageRGB::filled(hb * b, wb * b, 0.0f);
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < hb * b; ++y) {
      for (std::int64_t x = 0; x < wb * b; ++x) {
        out.at(c, y, x) = blocks.at(c * b * b + (y % b) * b + (x % b), y / b, x / b);
      }
    }
  }
  return out;
}

ImageRGB c2b(const BlockTensor& bt) { return c2b(bt.data, bt.block); }

}  // namespace lbc
