#pragma once

#include <stdexcept>
#include <string>

namespace lbc {

// Base of everything the library throws. The CLI maps DataError to exit
// code 2 and anything else to 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by an op, division by zero, sqrt of a negative value.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Bad input data: unreadable files, malformed bitstreams or checkpoints,
// model checksum mismatches, corrupt entropy-coded payloads.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace lbc
