#pragma once

#include <stdexcept>
#include <string>

namespace uniphy {

// Base class for everything this library throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad arguments, bad configuration, out-of-range material parameters.
// CLI maps these to exit code 2.
struct ValidationError : Error {
  using Error::Error;
};
struct ConfigError : ValidationError {
  using ValidationError::ValidationError;
};

// Numeric failures at runtime. CLI maps these to exit code 3.
struct NumericError : Error {
  using Error::Error;
};
struct DomainError : NumericError {
  using NumericError::NumericError;
};
struct SingularDeformationError : NumericError {
  using NumericError::NumericError;
};
struct OutOfDomainError : NumericError {
  using NumericError::NumericError;
};
struct CflError : NumericError {
  using NumericError::NumericError;
};
struct DivergenceError : NumericError {
  DivergenceError(const std::string& what, long where)
      : NumericError(what + " (step/op " + std::to_string(where) + ")"), index(where) {}
  long index;
};

// File and stream failures. CLI maps these to exit code 4.
struct IoError : Error {
  using Error::Error;
};
struct BadMagicError : IoError {
  using IoError::IoError;
};
struct BadVersionError : IoError {
  using IoError::IoError;
};
struct CrcError : IoError {
  using IoError::IoError;
};
struct TruncatedError : IoError {
  using IoError::IoError;
};

}  // namespace uniphy
