#pragma once

#include <stdexcept>
#include <string>

namespace convivit {

// Base for every error the library raises on contract violations.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents do not conform to an op's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration key, value, or combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// File could not be read/written or has a malformed layout.
class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss, failed tolerance check and similar numerical failures.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace convivit
