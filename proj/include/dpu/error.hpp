#pragma once

#include <stdexcept>
#include <string>

namespace dpu {

// Base for everything thrown by the library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user input: config files, CLI arguments, malformed specs.
struct ValidationError : Error {
  using Error::Error;
};

struct ShapeError : ValidationError {
  using ValidationError::ValidationError;
};

struct LabelError : ValidationError {
  using ValidationError::ValidationError;
};

struct InvalidRateError : ValidationError {
  using ValidationError::ValidationError;
};

struct DegenerateError : ValidationError {
  using ValidationError::ValidationError;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
  using Error::Error;
};

// Malformed file contents (IDX, CSV, checkpoints).
struct FormatError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace dpu
