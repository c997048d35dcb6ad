#pragma once

// Byte-oriented rANS over per-symbol CdfTables.
//
// State is 64 bits and kept in [2^32, 2^40); renormalization moves one byte at
// a time. rANS is LIFO, so the encoder must receive symbols in reverse decode
// order. Payload layout: final encoder state (8 bytes, little-endian), then the
// renormalization bytes in the order the decoder consumes them.
//
// Values outside a table's interior are sent as the matching edge bucket
// followed by the distance to that edge in 16-bit raw chunks; a chunk of
// 0xFFFF means another chunk follows.

#include <cstdint>
#include <span>
#include <vector>

#include "lbc/quant_entropy.hpp"

namespace lbc {

inline constexpr std::uint64_t kRansLowerBound = std::uint64_t{1} << 32;

struct SymbolStream {
  std::vector<std::int64_t> symbols;
  std::vector<CdfTable> tables;
};

class RansEncoder {
 public:
  // Call in reverse decode order. Throws Error on an invalid table.
  void put(std::int64_t symbol, const CdfTable& table);
  std::vector<std::uint8_t> finish() const;

 private:
  void put_slot(std::uint32_t start, std::uint32_t freq, int precision);

  std::uint64_t state_ = kRansLowerBound;
  std::vector<std::uint8_t> reversed_;  // renormalization bytes, newest last
};

class RansDecoder {
 public:
  // Throws DataError if the payload is shorter than the state header.
  explicit RansDecoder(std::span<const std::uint8_t> payload);

  // Throws DataError when the stream runs dry.
  std::int64_t get(const CdfTable& table);

  // Throws DataError unless every byte was consumed and the state returned to
  // its initial value; catches most truncation and tampering.
  void finish() const;

 private:
  std::uint32_t get_slot(const CdfTable* table, int precision, std::size_t* index);

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::uint64_t state_ = 0;
};

std::vector<std::uint8_t> rans_encode(const SymbolStream& stream);
std::vector<std::int64_t> rans_decode(std::span<const std::uint8_t> payload,
                                      std::span<const CdfTable> tables, std::size_t count);

}  // namespace lbc
