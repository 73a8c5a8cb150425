#pragma once

#include <stdexcept>
#include <string>

namespace periopt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class CalculatorError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public CalculatorError {
 public:
  using CalculatorError::CalculatorError;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

/// Network or observation dimensions that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Diverged training (non-finite losses); the message carries diagnostics.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace periopt
