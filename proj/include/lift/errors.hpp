#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lift {

// Error hierarchy. The CLI maps ValidationError (and subclasses) to exit code 1
// and IoError / FormatError to exit code 2.

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed binary payload; `offset` is the byte position where decoding failed.
class FormatError : public IoError {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : IoError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace lift
