#pragma once

#include <stdexcept>
#include <string>

namespace vshgp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes disagree.
class DimensionError : public Error {
public:
  DimensionError(const std::string &what, long expected, long actual)
      : Error(what + ": expected " + std::to_string(expected) + ", got " +
              std::to_string(actual)),
        expected_(expected), actual_(actual) {}

  long expected() const { return expected_; }
  long actual() const { return actual_; }

private:
  long expected_;
  long actual_;
};

/// A factorization or evaluation could not be completed in floating point.
class NumericalError : public Error {
public:
  using Error::Error;
};

/// Invalid user-supplied configuration or argument.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Malformed input file. Row and column are 1-based; 0 means "not applicable".
class ParseError : public Error {
public:
  ParseError(const std::string &what, long row, long column = 0)
      : Error(what + " (row " + std::to_string(row) +
              (column > 0 ? ", column " + std::to_string(column) : "") + ")"),
        row_(row), column_(column) {}

  long row() const { return row_; }
  long column() const { return column_; }

private:
  long row_;
  long column_;
};

inline void require_dims(const char *what, long expected, long actual) {
  if (expected != actual) {
    throw DimensionError(what, expected, actual);
  }
}

} // namespace vshgp
