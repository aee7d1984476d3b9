#pragma once

#include <stdexcept>
#include <string>

namespace cfx {

// Base for every error raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed input files. Carries the 1-based line (row) and column name when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t row = 0, std::string column = {})
      : Error(row ? what + " (row " + std::to_string(row) + (column.empty() ? "" : ", column '" + column + "'") + ")"
                  : what),
        row_(row),
        column_(std::move(column)) {}

  std::size_t row() const noexcept { return row_; }
  const std::string& column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::string column_;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace cfx
