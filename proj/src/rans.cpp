#include "lbc/rans.hpp"

#include <algorithm>

namespace lbc {

namespace {
constexpr int kRawBits = 16;
constexpr std::uint32_t kRawContinue = (1u << kRawBits) - 1;
constexpr std::int64_t kMaxEscapeOffset = std::int64_t{1} << 40;
}  // namespace

void RansEncoder::put_slot(std::uint32_t start, std::uint32_t freq, int precision) {
  const std::uint64_t x_max = ((kRansLowerBound >> precision) << 8) * freq;
  std::uint64_t x = state_;
  while (x >= x_max) {
    reversed_.push_back(static_cast<std::uint8_t>(x & 0xFF));
    x >>= 8;
  }
  state_ = ((x / freq) << precision) + (x % freq) + start;
}

void RansEncoder::put(std::int64_t symbol, const CdfTable& table) {
  table.validate();
  std::size_t index;
  if (table.symbol_count() == 1) {
    // Degenerate table: one certain value, no escape bucket.
    if (symbol != table.symbol_min) throw Error("symbol outside a single-value table");
    index = 0;
  } else if (symbol <= table.symbol_min || symbol >= table.symbol_max) {
    const bool low = symbol <= table.symbol_min;
    std::int64_t offset = low ? table.symbol_min - symbol : symbol - table.symbol_max;
    if (offset < 0 || offset > kMaxEscapeOffset) throw Error("escape offset out of range");
    // Chunks in decode order, then pushed newest-first.
    std::vector<std::uint32_t> chunks;
    while (offset >= kRawContinue) {
      chunks.push_back(kRawContinue);
      offset -= kRawContinue;
    }
    chunks.push_back(static_cast<std::uint32_t>(offset));
    for (auto it = chunks.rbegin(); it != chunks.rend(); ++it) put_slot(*it, 1, kRawBits);
    index = low ? 0 : table.symbol_count() - 1;
  } else {
    index = static_cast<std::size_t>(symbol - table.symbol_min);
  }
  put_slot(table.cdf[index], table.freq(index), table.precision);
}

std::vector<std::uint8_t> RansEncoder::finish() const {
  std::vector<std::uint8_t> out;
  out.reserve(8 + reversed_.size());
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(state_ >> (8 * i)));
  out.insert(out.end(), reversed_.rbegin(), reversed_.rend());
  return out;
}

RansDecoder::RansDecoder(std::span<const std::uint8_t> payload) : data_(payload) {
  if (data_.size() < 8) throw DataError("rANS payload shorter than its state header");
  for (int i = 0; i < 8; ++i) state_ |= static_cast<std::uint64_t>(data_[i]) << (8 * i);
  pos_ = 8;
  if (state_ < kRansLowerBound || state_ >= (kRansLowerBound << 8)) {
    throw DataError("rANS initial state out of range");
  }
}

std::uint32_t RansDecoder::get_slot(const CdfTable* table, int precision, std::size_t* index) {
  const std::uint32_t mask = (1u << precision) - 1;
  const std::uint32_t slot = static_cast<std::uint32_t>(state_ & mask);
  std::uint32_t start = slot, freq = 1;
  if (table) {
    const auto it = std::upper_bound(table->cdf.begin(), table->cdf.end(), slot);
    *index = static_cast<std::size_t>(it - table->cdf.begin()) - 1;
    start = table->cdf[*index];
    freq = table->freq(*index);
  }
  state_ = freq * (state_ >> precision) + slot - start;
  while (state_ < kRansLowerBound) {
    if (pos_ >= data_.size()) throw DataError("rANS stream exhausted");
    state_ = (state_ << 8) | data_[pos_++];
  }
  return slot;
}

std::int64_t RansDecoder::get(const CdfTable& table) {
  table.validate();
  std::size_t index = 0;
  get_slot(&table, table.precision, &index);
  if (table.symbol_count() == 1) return table.symbol_min;
  if (index != 0 && index + 1 != table.symbol_count()) {
    return table.symbol_min + static_cast<std::int64_t>(index);
  }
  std::int64_t offset = 0;
  for (;;) {
    const std::uint32_t chunk = get_slot(nullptr, kRawBits, nullptr);
    offset += chunk;
    if (offset > kMaxEscapeOffset) throw DataError("rANS escape offset out of range");
    if (chunk != kRawContinue) break;
  }
  return index == 0 ? table.symbol_min - offset : table.symbol_max + offset;
}

void RansDecoder::finish() const {
  if (pos_ != data_.size()) throw DataError("rANS payload has unconsumed bytes");
  if (state_ != kRansLowerBound) throw DataError("rANS final state mismatch (corrupt stream)");
}

std::vector<std::uint8_t> rans_encode(const SymbolStream& stream) {
  if (stream.symbols.size() != stream.tables.size()) {
    throw Error("symbol stream has " + std::to_string(stream.symbols.size()) + " symbols but " +
                std::to_string(stream.tables.size()) + " tables");
  }
  RansEncoder enc;
  for (std::size_t i = stream.symbols.size(); i-- > 0;) enc.put(stream.symbols[i], stream.tables[i]);
  return enc.finish();
}

std::vector<std::int64_t> rans_decode(std::span<const std::uint8_t> payload,
                                      std::span<const CdfTable> tables, std::size_t count) {
  if (tables.size() < count) throw Error("rans_decode: fewer tables than symbols");
  RansDecoder dec(payload);
  std::vector<std::int64_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = dec.get(tables[i]);
  dec.finish();
  return out;
}

}  // namespace lbc
