#pragma once

// Closed-loop block-by-block encoder and decoder.
//
// Blocks are visited in raster order. For block j the entropy network and the
// synthesis transform see only reconstructions already in the buffer, so the
// decoder can repeat exactly the encoder's computation. Encoder and decoder
// run the same ClosedLoopEngine code, which makes their reconstructions
// bitwise identical on a given build.
//
// Bitstream (little-endian):
//   "LBC1" | version u8 | hps id u8 | lambda index u8 | B u16 |
//   orig_h u32 | orig_w u32 | padded_h u32 | padded_w u32 |
//   model checksum u64 | payload length u64 | rANS payload

#include <cstdint>
#include <span>
#include <vector>

#include "lbc/blocks.hpp"
#include "lbc/layers.hpp"

namespace lbc {

struct BitstreamHeader {
  static constexpr std::size_t kSize = 41;
  static constexpr std::uint8_t kVersion = 1;

  std::uint8_t version = kVersion;
  std::uint8_t hps_id = 0;
  std::uint8_t lambda_index = 0;
  std::uint16_t block = 0;
  std::uint32_t orig_h = 0, orig_w = 0;
  std::uint32_t padded_h = 0, padded_w = 0;
  std::uint64_t model_checksum = 0;
  std::uint64_t payload_length = 0;

  std::vector<std::uint8_t> serialize() const;
  // Validates magic, version and dimension consistency. Does not look past
  // the header.
  static BitstreamHeader parse(std::span<const std::uint8_t> bytes);

  bool operator==(const BitstreamHeader&) const = default;
};

// Reconstructed-block grid. A site reads as zeros until it has been written.
// In strict mode writes must follow raster order.
class ReconBuffer {
 public:
  ReconBuffer(std::int64_t channels, std::int64_t rows, std::int64_t cols, int block,
              bool strict = true);

  bool filled(std::int64_t r, std::int64_t c) const;
  void write(std::int64_t r, std::int64_t c, std::span<const float> block);
  // C x (r1 - r0) x (c1 - c0) window; outside the grid and unfilled sites are zero.
  Tensor<float> window(std::int64_t r0, std::int64_t r1, std::int64_t c0, std::int64_t c1) const;

  const BlockTensor& blocks() const { return data_; }

 private:
  BlockTensor data_;
  std::vector<std::uint8_t> filled_;
  std::int64_t next_ = 0;
  bool strict_;
};

// One block step of the closed loop, shared by encoder and decoder. Each call
// evaluates the networks on the smallest causal window around the block.
class ClosedLoopEngine {
 public:
  ClosedLoopEngine(const Model& model, std::int64_t rows, std::int64_t cols, bool strict = true);

  struct Entropy {
    std::vector<float> mu, sigma;
  };
  Entropy entropy_params(std::int64_t r, std::int64_t c) const;
  std::vector<float> analyze(std::int64_t r, std::int64_t c, std::span<const float> x_block) const;
  // Clamped to [0, 1].
  std::vector<float> synthesize(std::int64_t r, std::int64_t c, std::span<const float> y_hat) const;
  void store(std::int64_t r, std::int64_t c, std::span<const float> x_hat) { buffer_.write(r, c, x_hat); }

  const ReconBuffer& buffer() const { return buffer_; }
  std::int64_t rows() const { return rows_; }
  std::int64_t cols() const { return cols_; }

 private:
  const Model& model_;
  std::int64_t rows_, cols_;
  ReconBuffer buffer_;
};

struct EncodeStats {
  double bpp = 0.0;            // 8 * file bytes / original pixels
  double estimated_bpp = 0.0;  // model rate at the rounded latents / original pixels
  double psnr = 0.0;           // cropped reconstruction vs source
  std::size_t symbols = 0;
  std::vector<double> block_bits;  // ideal table cost per block, raster order
};

// Per-block record of what went into the entropy coder.
struct BlockTrace {
  std::vector<std::int64_t> symbols;
  std::vector<float> mu, sigma;
  std::vector<float> y;  // unrounded analysis output
};

struct EncodeResult {
  std::vector<std::uint8_t> bytes;
  EncodeStats stats;
  BlockTensor recon;         // padded block grid as held by the buffer
  ImageRGB recon_image;      // cropped to the source size
  std::vector<BlockTrace> trace;  // filled when requested
};

struct EncodeOptions {
  bool keep_trace = false;
};

// Throws NumericError naming the block when a network produces NaN/Inf.
EncodeResult encode_image(const ImageRGB& img, const Model& model, const EncodeOptions& opts = {});

struct DecodeResult {
  BitstreamHeader header;
  ImageRGB image;  // cropped
  BlockTensor recon;
};

// Refuses (DataError) on bad magic/version or a model checksum mismatch
// before decoding anything.
DecodeResult decode_image(std::span<const std::uint8_t> bytes, const Model& model);

struct RoundtripReport {
  EncodeStats stats;
  bool bitwise_match = false;
  double rate_gap_bits = 0.0;  // file bits minus estimated bits
};

// Encode then decode; throws Error if the reconstructions differ in any bit.
RoundtripReport roundtrip_check(const ImageRGB& img, const Model& model);

}  // namespace lbc
