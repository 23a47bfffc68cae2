#pragma once

#include <stdexcept>
#include <string>

namespace ccr {

// Bad or unknown configuration values. CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Anything wrong with input files or records. CLI exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class TruncationError : public DataError {
 public:
  using DataError::DataError;
};

// Non-finite losses or parameters during training. CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ccr
