#pragma once

#include <stdexcept>
#include <string>

namespace moco {

// All library failures derive from Error so callers (the CLI in particular)
// can map them onto exit codes with a single catch.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with a primitive or layer.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced, divergence, singular or degenerate statistics.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed configuration (unknown key, unparsable value, invalid range).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or format problems outside the checkpoint container.
class IoError : public Error {
 public:
  using Error::Error;
};

enum class CheckpointErrorCode {
  kIo = 1,
  kBadMagic = 2,
  kBadVersion = 3,
  kTruncated = 4,
  kShapeMismatch = 5,
  kMissingArray = 6,
  kBadDtype = 7,
  kConversion = 8,
};

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrorCode code, const std::string& what)
      : Error(what), code_(code) {}
  CheckpointErrorCode code() const noexcept { return code_; }

 private:
  CheckpointErrorCode code_;
};

}  // namespace moco
