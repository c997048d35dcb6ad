#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lbc/blocks.hpp"

namespace lbc {

// 8-bit PNG (gray, RGB, with or without alpha) or binary PPM/PGM. Gray input
// is replicated to three channels; alpha is dropped. Throws DataError.
ImageRGB read_image(const std::string& path);

// Format chosen by extension: .ppm writes P6, anything else PNG.
void write_image(const std::string& path, const ImageRGB& img);

// round(255 x) with ties away from zero, clamped to [0, 255]; planar RGB order
// converted to interleaved.
std::vector<std::uint8_t> to_rgb8(const ImageRGB& img);
ImageRGB from_rgb8(const std::vector<std::uint8_t>& rgb, std::int64_t height, std::int64_t width);

// The image as it would be after an 8-bit write and re-read.
ImageRGB quantize_8bit(const ImageRGB& img);

// Sorted paths of *.png / *.ppm / *.pgm files directly inside `dir`.
std::vector<std::string> list_images(const std::string& dir);

// Deterministic natural-looking test content: smooth gradients, soft shapes,
// oriented texture and mild grain.
ImageRGB synthetic_image(std::int64_t height, std::int64_t width, std::uint64_t seed);

}  // namespace lbc
