// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The dynsparse Authors

#ifndef DYNSPARSE_ERROR_HPP
#define DYNSPARSE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace dynsparse {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes that do not line up, or that are not divisible by the block size.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A mask would end up with no active block.
class DegenerateSparsityError : public Error {
 public:
  using Error::Error;
};

/// A non-finite loss, gradient or parameter update.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Coordinates that are missing from, or inconsistent with, a mask.
class MaskError : public Error {
 public:
  using Error::Error;
};

/// Argument outside of its documented domain.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Invalid or incomplete experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace dynsparse

#endif  // DYNSPARSE_ERROR_HPP
