#pragma once

#include <stdexcept>
#include <string>

namespace qkvae {

// Each error class maps to one CLI exit code (see tools/qkvae.cpp).

/// Bad flags or an invalid configuration value.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed, missing or incompatible input data (files, shapes, checkpoints).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape contract violated by a tensor operation.
class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

/// A computation produced NaN/Inf or hit a numerically undefined case.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace qkvae
