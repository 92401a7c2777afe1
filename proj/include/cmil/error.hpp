#pragma once

#include <stdexcept>
#include <string>

namespace cmil {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed input file. `line` is 1-based when known, 0 otherwise.
struct ParseError : Error {
  ParseError(const std::string& msg, int line_number = 0)
      : Error(msg), line(line_number) {}
  int line;
};

struct ValidationError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

/// Batch conditions cannot be met (e.g. fewer than two labels).
struct SamplerError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace cmil
