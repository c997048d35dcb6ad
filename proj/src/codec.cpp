#include "lbc/codec.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lbc/bytes.hpp"
#include "lbc/metrics.hpp"
#include "lbc/quant_entropy.hpp"
#include "lbc/rans.hpp"

namespace lbc {

namespace {
constexpr char kMagic[] = "LBC1";

std::string site_str(std::int64_t r, std::int64_t c) {
  return "block (" + std::to_string(r) + ", " + std::to_string(c) + ")";
}

// Single-site tensor placed at (row, col) of a zero window.
Tensor<float> place(std::span<const float> v, std::int64_t rows, std::int64_t cols,
                    std::int64_t row, std::int64_t col) {
  Tensor<float> t(Shape{static_cast<std::int64_t>(v.size()), rows, cols});
  for (std::size_t ch = 0; ch < v.size(); ++ch) t.at(static_cast<std::int64_t>(ch), row, col) = v[ch];
  return t;
}

std::vector<float> pick(const Tensor<float>& t, std::int64_t row, std::int64_t col) {
  std::vector<float> out(static_cast<std::size_t>(t.dim(0)));
  for (std::int64_t ch = 0; ch < t.dim(0); ++ch) out[static_cast<std::size_t>(ch)] = t.at(ch, row, col);
  return out;
}
}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> BitstreamHeader::serialize() const {
  ByteWriter w;
  w.raw(std::string_view(kMagic, 4));
  w.u8(version);
  w.u8(hps_id);
  w.u8(lambda_index);
  w.u16(block);
  w.u32(orig_h);
  w.u32(orig_w);
  w.u32(padded_h);
  w.u32(padded_w);
  w.u64(model_checksum);
  w.u64(payload_length);
  return w.take();
}

BitstreamHeader BitstreamHeader::parse(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < kSize || r.str(4) != std::string_view(kMagic, 4)) {
    throw DataError("not an LBC1 bitstream");
  }
  BitstreamHeader h;
  h.version = r.u8();
  if (h.version != kVersion) throw DataError("unsupported bitstream version " + std::to_string(h.version));
  h.hps_id = r.u8();
  h.lambda_index = r.u8();
  h.block = r.u16();
  h.orig_h = r.u32();
  h.orig_w = r.u32();
  h.padded_h = r.u32();
  h.padded_w = r.u32();
  h.model_checksum = r.u64();
  h.payload_length = r.u64();
  if (h.block == 0 || h.orig_h == 0 || h.orig_w == 0 ||
      h.padded_h != round_up_to_block(h.orig_h, h.block) ||
      h.padded_w != round_up_to_block(h.orig_w, h.block)) {
    throw DataError("inconsistent bitstream dimensions");
  }
  return h;
}

// ---------------------------------------------------------------------------

ReconBuffer::ReconBuffer(std::int64_t channels, std::int64_t rows, std::int64_t cols, int block,
                         bool strict)
    : data_{Tensor<float>(Shape{channels, rows, cols}), block},
      filled_(static_cast<std::size_t>(rows * cols), 0),
      strict_(strict) {}

bool ReconBuffer::filled(std::int64_t r, std::int64_t c) const {
  if (r < 0 || c < 0 || r >= data_.rows() || c >= data_.cols()) return false;
  return filled_[static_cast<std::size_t>(r * data_.cols() + c)] != 0;
}

void ReconBuffer::write(std::int64_t r, std::int64_t c, std::span<const float> block) {
  if (r < 0 || c < 0 || r >= data_.rows() || c >= data_.cols()) {
    throw DimensionError("ReconBuffer: " + site_str(r, c) + " outside the grid");
  }
  if (static_cast<std::int64_t>(block.size()) != data_.channels()) {
    throw DimensionError("ReconBuffer: block has wrong channel count");
  }
  const std::int64_t index = r * data_.cols() + c;
  if (strict_ && index != next_) {
    throw Error("ReconBuffer: " + site_str(r, c) + " written out of raster order");
  }
  for (std::int64_t ch = 0; ch < data_.channels(); ++ch) {
    data_.data.at(ch, r, c) = block[static_cast<std::size_t>(ch)];
  }
  filled_[static_cast<std::size_t>(index)] = 1;
  next_ = std::max(next_, index + 1);
}

Tensor<float> ReconBuffer::window(std::int64_t r0, std::int64_t r1, std::int64_t c0,
                                  std::int64_t c1) const {
  Tensor<float> t(Shape{data_.channels(), r1 - r0, c1 - c0});
  for (std::int64_t r = r0; r < r1; ++r) {
    for (std::int64_t c = c0; c < c1; ++c) {
      if (!filled(r, c)) continue;
      for (std::int64_t ch = 0; ch < data_.channels(); ++ch) {
        t.at(ch, r - r0, c - c0) = data_.data.at(ch, r, c);
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------

ClosedLoopEngine::ClosedLoopEngine(const Model& model, std::int64_t rows, std::int64_t cols,
                                   bool strict)
    : model_(model),
      rows_(rows),
      cols_(cols),
      buffer_(model.hps().pixel_channels(), rows, cols, model.hps().block, strict) {}

ClosedLoopEngine::Entropy ClosedLoopEngine::entropy_params(std::int64_t r, std::int64_t c) const {
  ad::NoGradGuard no_grad;
  const std::int64_t rad = model_.hps().entropy_context_radius();
  // Clipped to the grid: with a 3x3 interior layer, hidden features at
  // off-grid sites must be zero padding, not the response to zero context.
  const std::int64_t r0 = std::max<std::int64_t>(0, r - rad), c0 = std::max<std::int64_t>(0, c - rad);
  const std::int64_t c1 = std::min(cols_, c + rad + 1);
  auto ctx = ad::constant(buffer_.window(r0, r + 1, c0, c1));
  auto gp = entropy_net_n(ctx, model_);
  return {pick(gp.mu.value(), r - r0, c - c0), pick(gp.sigma.value(), r - r0, c - c0)};
}

std::vector<float> ClosedLoopEngine::analyze(std::int64_t r, std::int64_t c,
                                             std::span<const float> x_block) const {
  ad::NoGradGuard no_grad;
  auto ctx = ad::constant(buffer_.window(r - 1, r + 1, c - 1, c + 2));
  auto x = ad::constant(place(x_block, 2, 3, 1, 1));
  return pick(analysis_ta(x, ctx, model_).value(), 1, 1);
}

std::vector<float> ClosedLoopEngine::synthesize(std::int64_t r, std::int64_t c,
                                                std::span<const float> y_hat) const {
  ad::NoGradGuard no_grad;
  auto ctx = ad::constant(buffer_.window(r - 1, r + 1, c - 1, c + 2));
  auto y = ad::constant(place(y_hat, 2, 3, 1, 1));
  return pick(synthesis_ts(y, ctx, model_, true).value(), 1, 1);
}

// ---------------------------------------------------------------------------

EncodeResult encode_image(const ImageRGB& img, const Model& model, const EncodeOptions& opts) {
  const auto& hps = model.hps();
  auto [padded, pad] = pad_to_block_multiple(img, hps.block);
  const BlockTensor x = b2c(padded, hps.block);
  const std::int64_t rows = x.rows(), cols = x.cols(), channels = x.channels();
  const std::size_t m = static_cast<std::size_t>(hps.m);

  ClosedLoopEngine engine(model, rows, cols);
  std::vector<std::int64_t> symbols;
  std::vector<float> mus, sigmas;
  symbols.reserve(static_cast<std::size_t>(rows * cols) * m);
  EncodeResult result;
  double estimated_bits = 0.0;

  std::vector<float> x_block(static_cast<std::size_t>(channels));
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      try {
        for (std::int64_t ch = 0; ch < channels; ++ch) x_block[static_cast<std::size_t>(ch)] = x.data.at(ch, r, c);
        const auto ent = engine.entropy_params(r, c);
        const auto y = engine.analyze(r, c, x_block);
        std::vector<float> y_hat(m);
        BlockTrace tr;
        for (std::size_t i = 0; i < m; ++i) {
          y_hat[i] = round_half_away(y[i]);
          const auto s = static_cast<std::int64_t>(y_hat[i]);
          symbols.push_back(s);
          mus.push_back(ent.mu[i]);
          sigmas.push_back(ent.sigma[i]);
          estimated_bits -= std::log2(std::max(
              gaussian_bin_probability(y_hat[i], ent.mu[i], ent.sigma[i]), kLikelihoodFloor));
          if (opts.keep_trace) tr.symbols.push_back(s);
        }
        engine.store(r, c, engine.synthesize(r, c, y_hat));
        if (opts.keep_trace) {
          tr.mu = ent.mu;
          tr.sigma = ent.sigma;
          tr.y = y;
          result.trace.push_back(std::move(tr));
        }
      } catch (const NumericError& e) {
        throw NumericError(site_str(r, c) + ": " + e.what());
      }
    }
  }

  RansEncoder enc;
  result.stats.block_bits.assign(static_cast<std::size_t>(rows * cols), 0.0);
  for (std::size_t i = symbols.size(); i-- > 0;) {
    const CdfTable table = build_cdf_table(mus[i], sigmas[i]);
    result.stats.block_bits[i / m] += symbol_cost_bits(table, symbols[i]);
    enc.put(symbols[i], table);
  }
  const auto payload = enc.finish();

  BitstreamHeader header;
  header.hps_id = hps.hps_id;
  header.lambda_index = hps.lambda_index;
  header.block = static_cast<std::uint16_t>(hps.block);
  header.orig_h = static_cast<std::uint32_t>(pad.orig_h);
  header.orig_w = static_cast<std::uint32_t>(pad.orig_w);
  header.padded_h = static_cast<std::uint32_t>(pad.padded_h);
  header.padded_w = static_cast<std::uint32_t>(pad.padded_w);
  header.model_checksum = model_checksum(model);
  header.payload_length = payload.size();
  result.bytes = header.serialize();
  result.bytes.insert(result.bytes.end(), payload.begin(), payload.end());

  result.recon = engine.buffer().blocks();
  result.recon_image = crop_to_original(c2b(result.recon), pad);
  const double pixels = static_cast<double>(img.pixels());
  result.stats.bpp = 8.0 * static_cast<double>(result.bytes.size()) / pixels;
  result.stats.estimated_bpp = estimated_bits / pixels;
  result.stats.psnr = psnr(img, result.recon_image);
  result.stats.symbols = symbols.size();
  return result;
}

DecodeResult decode_image(std::span<const std::uint8_t> bytes, const Model& model) {
  DecodeResult out;
  out.header = BitstreamHeader::parse(bytes);
  const auto& h = out.header;
  const auto& hps = model.hps();
  if (h.model_checksum != model_checksum(model)) {
    throw DataError("bitstream was produced with a different model (checksum mismatch)");
  }
  if (h.block != hps.block) throw DataError("bitstream block size does not match the model");
  if (bytes.size() - BitstreamHeader::kSize != h.payload_length) {
    throw DataError("bitstream payload length mismatch");
  }

  const std::int64_t rows = h.padded_h / h.block, cols = h.padded_w / h.block;
  const std::size_t m = static_cast<std::size_t>(hps.m);
  ClosedLoopEngine engine(model, rows, cols);
  RansDecoder dec(bytes.subspan(BitstreamHeader::kSize));
  std::vector<float> y_hat(m);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      try {
        const auto ent = engine.entropy_params(r, c);
        for (std::size_t i = 0; i < m; ++i) {
          y_hat[i] = static_cast<float>(dec.get(build_cdf_table(ent.mu[i], ent.sigma[i])));
        }
        engine.store(r, c, engine.synthesize(r, c, y_hat));
      } catch (const NumericError& e) {
        throw NumericError(site_str(r, c) + ": " + e.what());
      }
    }
  }
  dec.finish();

  out.recon = engine.buffer().blocks();
  PadInfo pad{h.orig_h, h.orig_w, h.padded_h, h.padded_w};
  out.image = crop_to_original(c2b(out.recon), pad);
  return out;
}

RoundtripReport roundtrip_check(const ImageRGB& img, const Model& model) {
  const auto enc = encode_image(img, model);
  const auto dec = decode_image(enc.bytes, model);
  RoundtripReport rep;
  rep.stats = enc.stats;
  rep.bitwise_match = bitwise_equal(enc.recon.data, dec.recon.data) &&
                      bitwise_equal(enc.recon_image.data, dec.image.data);
  const double pixels = static_cast<double>(img.pixels());
  rep.rate_gap_bits = (enc.stats.bpp - enc.stats.estimated_bpp) * pixels;
  if (!rep.bitwise_match) throw Error("decoder reconstruction differs from encoder reconstruction");
  return rep;
}

}  // namespace lbc
