// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace sclab {

using TokenId = std::uint32_t;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad arguments or an inconsistent request (CLI exit code 2).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Unreadable, malformed or mismatched model / data files (CLI exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A tensor in a checkpoint whose shape differs from the config-derived one.
class ShapeMismatch : public DataError {
 public:
  ShapeMismatch(std::string tensor, const std::string& what)
      : DataError(what), tensor_(std::move(tensor)) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

/// A non-finite activation or state (CLI exit code 4).
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::size_t layer, std::size_t head,
               std::size_t position)
      : Error(what + " (layer " + std::to_string(layer) + ", head " +
              std::to_string(head) + ", position " + std::to_string(position) +
              ")"),
        layer_(layer),
        head_(head),
        position_(position) {}

  std::size_t layer() const noexcept { return layer_; }
  std::size_t head() const noexcept { return head_; }
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t layer_;
  std::size_t head_;
  std::size_t position_;
};

}  // namespace sclab
