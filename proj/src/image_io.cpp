#include "lbc/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lbc/bytes.hpp"
#include "lbc/random.hpp"

namespace lbc {

namespace fs = std::filesystem;

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw DataError("write failed for " + path);
}

std::vector<std::uint8_t> to_rgb8(const ImageRGB& img) {
  const std::int64_t h = img.height(), w = img.width();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(3 * h * w));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) {
        const float v = std::round(255.0f * img.at(c, y, x));
        out[static_cast<std::size_t>((y * w + x) * 3 + c)] =
            static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
      }
    }
  }
  return out;
}

ImageRGB from_rgb8(const std::vector<std::uint8_t>& rgb, std::int64_t height, std::int64_t width) {
  if (rgb.size() != static_cast<std::size_t>(3 * height * width)) {
    throw DimensionError("from_rgb8: buffer size does not match dimensions");
  }
  ImageRGB img = ImageRGB::filled(height, width, 0.0f);
  for (std::int64_t y = 0; y < height; ++y) {
    for (std::int64_t x = 0; x < width; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<float>(rgb[static_cast<std::size_t>((y * width + x) * 3 + c)]) / 255.0f;
      }
    }
  }
  return img;
}

ImageRGB quantize_8bit(const ImageRGB& img) {
  return from_rgb8(to_rgb8(img), img.height(), img.width());
}

namespace {

ImageRGB read_pnm(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  std::size_t pos = 0;
  auto token = [&]() {
    std::string t;
    while (pos < bytes.size()) {
      const char ch = static_cast<char>(bytes[pos]);
      if (ch == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        ++pos;
      } else {
        t.push_back(ch);
        ++pos;
      }
    }
    return t;
  };
  const std::string magic = token();
  const bool color = magic == "P6";
  if (!color && magic != "P5") throw DataError(path + ": only binary P5/P6 PNM is supported");
  long w = 0, h = 0, maxval = 0;
  try {
    w = std::stol(token());
    h = std::stol(token());
    maxval = std::stol(token());
  } catch (const std::exception&) {
    throw DataError(path + ": malformed PNM header");
  }
  if (w < 1 || h < 1 || maxval != 255) throw DataError(path + ": unsupported PNM dimensions or depth");
  ++pos;  // single whitespace after maxval
  const std::size_t channels = color ? 3 : 1;
  const std::size_t need = static_cast<std::size_t>(w * h) * channels;
  if (bytes.size() < pos + need) throw DataError(path + ": truncated PNM data");
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(w * h) * 3);
  for (std::size_t i = 0; i < static_cast<std::size_t>(w * h); ++i) {
    for (std::size_t c = 0; c < 3; ++c) rgb[i * 3 + c] = bytes[pos + i * channels + (color ? c : 0)];
  }
  return from_rgb8(rgb, h, w);
}

ImageRGB read_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError(path + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgb.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError(path + ": " + msg);
  }
  return from_rgb8(rgb, image.height, image.width);
}

std::string lower_ext(const std::string& path) {
  std::string ext = fs::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

}  // namespace

ImageRGB read_image(const std::string& path) {
  const std::string ext = lower_ext(path);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return read_pnm(read_file(path), path);
  return read_png(path);
}

void write_image(const std::string& path, const ImageRGB& img) {
  const auto rgb = to_rgb8(img);
  if (lower_ext(path) == ".ppm") {
    std::ostringstream hdr;
    hdr << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
    ByteWriter w;
    w.raw(hdr.str());
    w.raw(rgb);
    write_file(path, w.bytes());
    return;
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, rgb.data(), 0, nullptr)) {
    throw DataError(path + ": " + image.message);
  }
}

std::vector<std::string> list_images(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string ext = lower_ext(e.path().string());
    if (ext == ".png" || ext == ".ppm" || ext == ".pgm") out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

ImageRGB synthetic_image(std::int64_t height, std::int64_t width, std::uint64_t seed) {
  Rng rng(seed);
  ImageRGB img = ImageRGB::filled(height, width, 0.0f);
  const double hs = static_cast<double>(height), ws = static_cast<double>(width);

  // Background: two-corner color gradient.
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.1, 0.9);
    c1[c] = rng.uniform(0.1, 0.9);
  }
  const double angle = rng.uniform(0.0, 6.283185307179586);
  const double gx = std::cos(angle), gy = std::sin(angle);

  struct Blob {
    double cy, cx, ry, rx, rot, soft;
    double color[3];
    bool box;
  };
  std::vector<Blob> blobs(4 + rng.below(5));
  for (auto& b : blobs) {
    b.cy = rng.uniform(0.0, hs);
    b.cx = rng.uniform(0.0, ws);
    b.ry = rng.uniform(0.08, 0.35) * hs;
    b.rx = rng.uniform(0.08, 0.35) * ws;
    b.rot = rng.uniform(0.0, 3.141592653589793);
    b.soft = rng.uniform(0.02, 0.15);
    b.box = rng.below(3) == 0;
    for (double& c : b.color) c = rng.uniform(0.0, 1.0);
  }
  const double tex_freq = rng.uniform(0.15, 0.6);
  const double tex_amp = rng.uniform(0.0, 0.08);
  const double tex_dir = rng.uniform(0.0, 3.141592653589793);

  for (std::int64_t y = 0; y < height; ++y) {
    for (std::int64_t x = 0; x < width; ++x) {
      const double u = static_cast<double>(x) / ws - 0.5, v = static_cast<double>(y) / hs - 0.5;
      const double t = std::clamp(0.5 + gx * u + gy * v, 0.0, 1.0);
      double px[3];
      for (int c = 0; c < 3; ++c) px[c] = c0[c] * (1.0 - t) + c1[c] * t;
      for (const auto& b : blobs) {
        const double dy = static_cast<double>(y) - b.cy, dx = static_cast<double>(x) - b.cx;
        const double ry = (std::cos(b.rot) * dy - std::sin(b.rot) * dx) / b.ry;
        const double rx = (std::sin(b.rot) * dy + std::cos(b.rot) * dx) / b.rx;
        const double d = b.box ? std::max(std::abs(ry), std::abs(rx)) : std::sqrt(ry * ry + rx * rx);
        const double a = std::clamp((1.0 - d) / b.soft, 0.0, 1.0);
        for (int c = 0; c < 3; ++c) px[c] = px[c] * (1.0 - a) + b.color[c] * a;
      }
      const double tex = tex_amp * std::sin(tex_freq * (std::cos(tex_dir) * static_cast<double>(x) +
                                                        std::sin(tex_dir) * static_cast<double>(y)));
      for (int c = 0; c < 3; ++c) {
        const double grain = 0.01 * (rng.uniform() - 0.5);
        const double val = std::clamp(px[c] + tex + grain, 0.0, 1.0);
        img.at(c, y, x) = static_cast<float>(std::round(val * 255.0) / 255.0);
      }
    }
  }
  return img;
}

}  // namespace lbc
