#pragma once

#include <stdexcept>
#include <string>

namespace rawshield {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite or otherwise unusable input samples.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Image tagged with a color domain the operation does not accept.
class DomainMismatchError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of the operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Camera profile violating its invariants (singular CCM, non-positive gains).
class ProfileError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced inside the autodiff engine or the optimizer.
class NumericFault : public Error {
 public:
  using Error::Error;
};

/// Malformed file: bad magic, truncation, impossible dimensions.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Index outside a fixed range (feature stage, tensor slot).
class IndexError : public Error {
 public:
  using Error::Error;
};

}  // namespace rawshield
