// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace umv2 {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or hyperparameters that cannot be satisfied.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a numerical routine that failed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward without a forward cache.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent checkpoint.
class LoadError : public Error {
 public:
  using Error::Error;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class VerificationError : public Error {
 public:
  using Error::Error;
};

}  // namespace umv2
