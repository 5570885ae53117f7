#pragma once

#include <stdexcept>
#include <string>

namespace vpnet {

/// Base for every error this library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operator.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent file contents, or a missing file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or configuration supplied by a caller.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace vpnet
