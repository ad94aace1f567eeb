#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pgc {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file (JSON syntax, bad checkpoint bytes).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t byte_offset)
      : Error(what + " (at byte " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}

  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

/// Well-formed input whose content violates a structural rule.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Shape mismatch, out-of-range index or non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Bad command-line usage or configuration.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace pgc
