// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

// Per-head building blocks of the scalar-gated recurrence.
//
// Conventions: a head state h is an N x P matrix (state_dim rows, head_dim
// columns). B, C and B_bar are N-vectors, x and o are P-vectors. The update
// is h <- alpha * h + B_bar x^T, the readout is o = h^T C + D .* x.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <type_traits>

#include <Eigen/Dense>

#include "sclab/config.hpp"
#include "sclab/types.hpp"

namespace sclab {

/// Elementwise v * sigmoid(v).
template <typename Derived>
auto silu(const Eigen::MatrixBase<Derived>& v) {
  using S = typename Derived::Scalar;
  return (v.array() / (S(1) + (-v.array()).exp())).matrix();
}

template <typename S>
  requires std::is_floating_point_v<S>
S silu(S v) {
  return v / (S(1) + std::exp(-v));
}

/// log(1 + exp(z)) without overflow; clamped away from zero so the result is
/// always a strictly positive step size.
template <typename S>
S softplus(S z) {
  S r = z > S(0) ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
  return r > std::numeric_limits<S>::min() ? r : std::numeric_limits<S>::min();
}

/// Delta = softplus(u . w_delta + b_delta).
template <typename DerivedU, typename DerivedW>
typename DerivedU::Scalar softplus_delta(const Eigen::MatrixBase<DerivedU>& u,
                                         const Eigen::MatrixBase<DerivedW>& w_delta,
                                         typename DerivedU::Scalar b_delta) {
  return softplus(u.dot(w_delta) + b_delta);
}

/// v / sqrt(mean(v^2) + eps) .* weight, with the mean accumulated in double.
template <typename DerivedV, typename DerivedW>
auto rms_normalize(const Eigen::MatrixBase<DerivedV>& v,
                   const Eigen::MatrixBase<DerivedW>& weight) {
  using S = typename DerivedV::Scalar;
  double ms = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double e = static_cast<double>(v(i));
    ms += e * e;
  }
  ms /= static_cast<double>(v.size());
  const S scale = static_cast<S>(1.0 / std::sqrt(ms + kNormEps));
  return ((v.array() * scale) * weight.array()).matrix().eval();
}

/// One step of the depthwise short convolution over a row of channels.
///
/// `tail` holds the previous pre-convolution rows, oldest first: k-1 rows for
/// causal alignment, k rows for shifted alignment. `kernel` is k x channels;
/// row k-1 multiplies the newest input in the window. The tail is advanced by
/// one row in place.
template <typename S, typename DerivedX>
RowVector<S> causal_conv_step(Eigen::Ref<Matrix<S>> tail,
                              const Eigen::MatrixBase<DerivedX>& current,
                              const Matrix<S>& kernel, const RowVector<S>& bias,
                              ConvAlignment alignment) {
  const Eigen::Index k = kernel.rows();
  RowVector<S> out = bias;
  if (alignment == ConvAlignment::kCausal) {
    for (Eigen::Index m = 0; m + 1 < k; ++m) {
      out.array() += kernel.row(m).array() * tail.row(m).array();
    }
    out.array() += kernel.row(k - 1).array() * current.array();
  } else {
    for (Eigen::Index m = 0; m < k; ++m) {
      out.array() += kernel.row(m).array() * tail.row(m).array();
    }
  }
  const Eigen::Index rows = tail.rows();
  if (rows > 0) {
    for (Eigen::Index m = 0; m + 1 < rows; ++m) tail.row(m) = tail.row(m + 1);
    tail.row(rows - 1) = current;
  }
  return out;
}

/// alpha = exp(-Delta * exp(A)), B_bar = Delta * B.
template <typename S>
struct Discretized {
  S alpha;
  Vector<S> b_bar;
};

template <typename DerivedB>
Discretized<typename DerivedB::Scalar> discretize(typename DerivedB::Scalar delta,
                                                  typename DerivedB::Scalar a_log,
                                                  const Eigen::MatrixBase<DerivedB>& b) {
  return {std::exp(-delta * std::exp(a_log)), (delta * b).eval()};
}

/// h <- alpha * h + outer(B_bar, x), in place.
template <typename DerivedH, typename DerivedB, typename DerivedX>
void head_step_inplace(Eigen::MatrixBase<DerivedH>& h, typename DerivedH::Scalar alpha,
                       const Eigen::MatrixBase<DerivedB>& b_bar,
                       const Eigen::MatrixBase<DerivedX>& x) {
  h *= alpha;
  h.noalias() += b_bar * x.transpose();
}

template <typename DerivedH, typename DerivedB, typename DerivedX>
Matrix<typename DerivedH::Scalar> head_step(const Eigen::MatrixBase<DerivedH>& h,
                                            typename DerivedH::Scalar alpha,
                                            const Eigen::MatrixBase<DerivedB>& b_bar,
                                            const Eigen::MatrixBase<DerivedX>& x) {
  Matrix<typename DerivedH::Scalar> out = h;
  head_step_inplace(out, alpha, b_bar, x);
  return out;
}

/// o = C h + D .* x, returned as a P column vector.
template <typename DerivedH, typename DerivedC, typename DerivedD, typename DerivedX>
Vector<typename DerivedH::Scalar> head_readout(const Eigen::MatrixBase<DerivedH>& h,
                                               const Eigen::MatrixBase<DerivedC>& c,
                                               const Eigen::MatrixBase<DerivedD>& d_skip,
                                               const Eigen::MatrixBase<DerivedX>& x) {
  Vector<typename DerivedH::Scalar> o = h.transpose() * c;
  o.array() += d_skip.array() * x.array();
  return o;
}

/// Gated, normalized and projected output of one head:
/// y = Norm(o .* silu(u W_gate)) W_o, with o from head_readout.
template <typename S>
RowVector<S> head_output(const Matrix<S>& h, const Vector<S>& c, const Vector<S>& d_skip,
                         const Vector<S>& x, const RowVector<S>& u,
                         const Matrix<S>& w_gate, const Vector<S>& norm_weight,
                         const Matrix<S>& w_out) {
  const Vector<S> o = head_readout(h, c, d_skip, x);
  const Vector<S> z = (u * w_gate).transpose();
  const Vector<S> gated = (o.array() * silu(z).array()).matrix();
  return rms_normalize(gated, norm_weight).transpose() * w_out;
}

/// Explicit weighted sum h_t = sum_i alpha_{i+1:t} outer(B_bar_i, x_i) with
/// the cumulative decays summed in log space (double) and then exponentiated.
/// Token i is inserted at step i and decayed by every later step only, so the
/// newest term carries weight 1.
///
/// `alphas` has one entry per step, `b_bars` is N x T, `xs` is P x T; `t` is a
/// 1-based step count (t = 0 gives the zero state).
template <typename S>
Matrix<S> weighted_sum_oracle(std::span<const S> alphas, const Matrix<S>& b_bars,
                              const Matrix<S>& xs, std::size_t t) {
  if (t > alphas.size() || static_cast<Eigen::Index>(t) > b_bars.cols() ||
      static_cast<Eigen::Index>(t) > xs.cols()) {
    throw UsageError("weighted_sum_oracle: t exceeds sequence length");
  }
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(b_bars.rows(), xs.rows());
  double log_decay = 0.0;
  for (std::size_t i = t; i-- > 0;) {
    const double w = std::exp(log_decay);
    acc.noalias() += w * (b_bars.col(static_cast<Eigen::Index>(i)).template cast<double>() *
                          xs.col(static_cast<Eigen::Index>(i)).template cast<double>().transpose());
    log_decay += std::log(static_cast<double>(alphas[i]));
  }
  return acc.cast<S>();
}

/// alpha_{i:t} = prod_{j=i..t} alpha_j for 1-based i <= t, via a log-space sum.
template <typename S>
double cumulative_decay(std::span<const S> alphas, std::size_t i, std::size_t t) {
  if (i < 1 || i > t) throw UsageError("cumulative_decay: requires 1 <= i <= t");
  if (t > alphas.size()) throw UsageError("cumulative_decay: t exceeds sequence length");
  double log_sum = 0.0;
  for (std::size_t j = i; j <= t; ++j) log_sum += std::log(static_cast<double>(alphas[j - 1]));
  return std::exp(log_sum);
}

}  // namespace sclab
