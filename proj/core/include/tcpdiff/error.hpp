#pragma once

#include <stdexcept>
#include <string>

namespace tcpdiff {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or precondition, detected before any work starts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Array shapes disagree with each other or with a declared contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Index outside the valid range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// On-disk data disagrees with its manifest.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure; the message carries the path.
class IoError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or consumed somewhere it must not be.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace tcpdiff
