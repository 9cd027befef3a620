// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <vector>

#include "sclab/mitigation.hpp"
#include "sclab/params.hpp"
#include "sclab/types.hpp"

namespace sclab {

template <typename S>
struct LayerState {
  std::vector<Matrix<S>> h;  // one N x P state per head
  Matrix<S> tail_x;          // tail_len x HP, pre-convolution rows, oldest first
  Matrix<S> tail_b;          // tail_len x N
  Matrix<S> tail_c;          // tail_len x N
  /// Running sum of log alpha per head since stream start; exp() of it is the
  /// cumulative decay of the first token.
  Eigen::VectorXd log_decay;
};

/// Lagging sub-stream of the sliding-window mitigation for one layer.
template <typename S>
struct WindowLayer {
  std::vector<Matrix<S>> h_lag;  // state after token t - r
  Matrix<S> tail_x;              // conv tails of the lagging stream
  Matrix<S> tail_b;
  Matrix<S> tail_c;
  std::vector<CompensatedSum> delta_acc;  // sum of Delta over steps t-r+1 .. t
  /// Normalized layer inputs of the last r tokens (slot = position mod r).
  /// Empty for layer 0, whose input is recomputed from the token ring.
  Matrix<S> input_ring;
};

template <typename S>
struct WindowState {
  std::size_t window = 0;        // r
  std::size_t position = 0;      // tokens consumed by the leading stream
  std::vector<TokenId> token_ring;  // slot = position mod r
  std::vector<WindowLayer<S>> layers;

  /// True once the lagging stream has started (t > r).
  bool lag_active() const { return position > window; }
};

/// Everything a single stream mutates. All-zero at stream start.
template <typename S>
struct StreamState {
  std::vector<LayerState<S>> layers;
  std::size_t position = 0;  // tokens consumed so far
  std::optional<WindowState<S>> window;
};

/// Zero state for `params`; allocates the window sub-stream when the
/// mitigation asks for a bounded window.
template <typename S>
StreamState<S> make_stream_state(const ModelParams<S>& params,
                                 const MitigationConfig& mitigation = {});

/// Effective state of one head under the window mitigation, or the plain
/// state when no window is active yet.
template <typename S>
Matrix<S> window_read(const ModelParams<S>& params, const StreamState<S>& state,
                      std::size_t layer, std::size_t head);

/// Versioned binary blob of a stream (including any window sub-stream), for
/// checkpoint / resume of a generation session.
template <typename S>
void save_stream_state(std::ostream& os, const StreamState<S>& state);
template <typename S>
StreamState<S> load_stream_state(std::istream& is, const ModelParams<S>& params);

inline constexpr std::uint32_t kStreamStateVersion = 1;

}  // namespace sclab
