#pragma once

#include <stdexcept>
#include <string>

namespace stseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad shapes, channel counts, or extents handed to an op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed serialized data.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or argument values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered, or a gradient check failed.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace stseg
