#pragma once

#include <stdexcept>
#include <string>

namespace snl {

// Base class for every error raised by the library. The CLI maps the
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A referenced route, sample or parameter does not exist.
class NotFoundError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Corrupt, truncated or mismatched binary file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Too few measurements or samples to proceed.
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

}  // namespace snl
