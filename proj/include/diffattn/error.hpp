#pragma once

#include <stdexcept>
#include <string>

namespace diffattn {

// Dimension or length mismatch between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Caller supplied a value outside an operation's domain (k >= n, empty store, ...).
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A NaN or infinity surfaced inside a computation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace diffattn
