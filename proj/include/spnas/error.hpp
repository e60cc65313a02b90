#pragma once

#include <stdexcept>
#include <string>

namespace spnas {

// Base class for every error raised by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration, schema violation or inconsistent shapes (exit 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor dimension mismatch.
class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Malformed input file (IDX, LUT, checkpoint).
class FormatError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// NaN/Inf produced by a primitive, non-PD covariance, log of a non-positive
// runtime (exit 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

// No architecture satisfies a runtime window (exit 4).
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

}  // namespace spnas
