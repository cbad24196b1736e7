#pragma once

#include <stdexcept>
#include <string>

namespace gradshield {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An argument is out of its admissible range (labels, clamp bounds, configs).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A file or blob could not be decoded.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward from a non-scalar or mutating a frozen model.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent model or experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace gradshield
