#pragma once

#include <stdexcept>
#include <string>

namespace treediff {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed configuration input (bad key, bad type, unparsable file).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A value parsed fine but violates a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A stored artifact is truncated or corrupted.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint was produced under a different configuration.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

/// NaN/inf or an out-of-domain numeric input.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed external data file (e.g. IDX header).
class FormatError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Tree growth refused (depth or leaf cap reached).
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// A structural or probabilistic invariant would be broken.
class InvariantError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

}  // namespace treediff
