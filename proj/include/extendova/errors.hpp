#pragma once

#include <stdexcept>
#include <string>

namespace extendova {

/// Root of every error raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidArgument : Error {
  using Error::Error;
};

/// Input that is well-typed but mathematically degenerate (e.g. a zero vector
/// handed to a normalization).
struct DegenerateInput : Error {
  using Error::Error;
};

/// Operation not valid in the object's current state (inactive class,
/// untrained head, empty class range).
struct StateError : Error {
  using Error::Error;
};

struct InvariantViolation : Error {
  using Error::Error;
};

struct NumericalFailure : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace extendova
