#pragma once

#include <stdexcept>
#include <string>

namespace robart {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A distribution or configuration parameter is out of range. The message
/// names the offending field.
class InvalidParameter : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// Malformed or unusable input data (bad CSV cells, single-class labels,
/// degenerate outcomes, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// An iterative fit failed to converge or diverged.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace robart
