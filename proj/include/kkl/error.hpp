#pragma once

#include <stdexcept>
#include <string>

namespace kkl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents or layer dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN/Inf appeared, an integrator failed, or training diverged.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration values or an unknown name.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A required artifact (dataset, checkpoint) is absent.
class MissingPrerequisite : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace kkl
