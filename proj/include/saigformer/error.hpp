#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace saig {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shape violation. Carries the operation and the offending dimension.
class ShapeError : public Error {
 public:
  ShapeError(std::string op, std::string dimension, long expected, long actual)
      : Error(op + ": dimension '" + dimension + "' expected " + std::to_string(expected) +
              ", got " + std::to_string(actual)),
        op_(std::move(op)),
        dimension_(std::move(dimension)),
        expected_(expected),
        actual_(actual) {}

  ShapeError(std::string op, std::string message)
      : Error(op + ": " + message), op_(std::move(op)) {}

  const std::string& op() const noexcept { return op_; }
  const std::string& dimension() const noexcept { return dimension_; }
  long expected() const noexcept { return expected_; }
  long actual() const noexcept { return actual_; }

 private:
  std::string op_;
  std::string dimension_;
  long expected_ = 0;
  long actual_ = 0;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unsupported file contents (checkpoints, PNGs, config files).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Configuration rejected. `fields()` lists every offending key or field.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, std::vector<std::string> fields)
      : Error(what + join(fields)), fields_(std::move(fields)) {}

  const std::vector<std::string>& fields() const noexcept { return fields_; }

 private:
  static std::string join(const std::vector<std::string>& f) {
    std::string out;
    for (size_t i = 0; i < f.size(); ++i) {
      out += (i ? ", " : "") + f[i];
    }
    return out;
  }
  std::vector<std::string> fields_;
};

/// An internal invariant was broken (non-finite loss, corrupted gradients).
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace saig
