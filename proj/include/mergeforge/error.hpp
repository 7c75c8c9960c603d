// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mergeforge {

// Base class for everything the library throws. The CLI maps subclasses to
// exit codes: ConfigError -> 2, NumericError -> 3, anything else -> 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible shapes, bad axes, out-of-range indices.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf appeared, or a training loop diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration, recipe or hyperparameter.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Models that cannot be merged with each other.
class IncompatibleModelsError : public Error {
 public:
  using Error::Error;
};

}  // namespace mergeforge
