#pragma once

#include <stdexcept>
#include <string>

namespace approxcp {

// Base for every error the library raises on purpose. The CLI maps each
// subclass to its own exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or argument combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing input data (CSV cells, missing files).
class IngestionError : public Error {
 public:
  using Error::Error;
};

// Factorization failures, non-finite intermediate values.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Corrupt or incompatible serialized artifact (checkpoint, workspace blob).
class FormatError : public Error {
 public:
  using Error::Error;
};

namespace exit_code {
inline constexpr int kSuccess = 0;
inline constexpr int kOther = 1;
inline constexpr int kConfig = 2;
inline constexpr int kIngestion = 3;
inline constexpr int kNumeric = 4;
inline constexpr int kFormat = 5;
inline constexpr int kNotConverged = 6;
}  // namespace exit_code

}  // namespace approxcp
