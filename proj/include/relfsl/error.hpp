// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace relfsl {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition of an operation was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A NaN/Inf appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or file-format problem (dataset images, checkpoints, heatmaps).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent run configuration. The CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace relfsl
