#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lidarflow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape disagreement between operands. `axis()` names the offending axis
// ("batch", "channels", "rows", "cols", "length", ...).
class DimensionError : public Error {
 public:
  DimensionError(const std::string& where, const std::string& axis,
                 std::size_t expected, std::size_t actual)
      : Error(where + ": mismatch on axis '" + axis + "' (expected " +
              std::to_string(expected) + ", got " + std::to_string(actual) + ")"),
        axis_(axis) {}

  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file contents.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

// A metric with nothing to average over.
class UndefinedResultError : public Error {
 public:
  using Error::Error;
};

// Checkpoint and dataset disagree (grid dims, architecture).
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace lidarflow
