#pragma once

#include <stdexcept>
#include <string>

namespace lbd {

// Error taxonomy used across the library. The CLI maps ConfigError to exit
// code 2 and NumericError to exit code 3; everything else is a plain failure.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct UnsupportedError : Error {
  using Error::Error;
};

// Thrown when a cached forward pass no longer matches the model.
struct ConsistencyError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace lbd
