#pragma once

#include <stdexcept>
#include <string>

namespace itlumm {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Operand shapes or sizes do not agree with an operation's contract.
struct ShapeError : Error {
  using Error::Error;
};

/// Bad argument value (out of range count, invalid configuration, ...).
struct ArgumentError : Error {
  using Error::Error;
};

/// A linear system that has to be solved is singular.
struct SingularSystemError : Error {
  using Error::Error;
};

/// Divergence or non-finite values during fitting or training.
struct NumericalError : Error {
  using Error::Error;
};

/// Malformed or unreadable file.
struct FormatError : Error {
  using Error::Error;
};

}  // namespace itlumm
