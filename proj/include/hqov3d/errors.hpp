// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace hqov3d {

// Root of every error the library throws. Validation-type errors (bad
// configs, schemas, weights) derive from ValidationError so the CLI can map
// them to a distinct exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class EmptyCluster : public Error {
 public:
  EmptyCluster() : Error("empty cluster: at least one point is required") {}
  using Error::Error;
};

class PlacementFailure : public Error {
 public:
  using Error::Error;
};

class SchemaError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class UnsupportedVersion : public SchemaError {
 public:
  using SchemaError::SchemaError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class WeightError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class UnknownCategory : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

// Raised when a tensor op produces NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace hqov3d
