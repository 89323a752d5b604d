#pragma once

#include <stdexcept>
#include <string>

namespace mdm {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inputs violate a documented range or invariant (bad config, bad index...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Tensor / matrix dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or mismatching file (motion container, checkpoint, index).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace mdm
