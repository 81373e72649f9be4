#pragma once

#include <stdexcept>
#include <string>

namespace zipmap {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents or view counts that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Inputs that leave an estimator undefined (empty masks, collinear points, ...).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

// Malformed or version-mismatched files on disk.
class FormatError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace zipmap
