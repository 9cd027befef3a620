// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

// Forward pass of the full stack:
//
//   r_0 = Embed(token)
//   r_l = r_{l-1} + Mixer_l(Norm(r_{l-1}))
//   logits = Norm(r_L) Embed^T
//
// Each mixer runs H heads of the scalar-gated recurrence and sums their
// projected outputs.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sclab/mitigation.hpp"
#include "sclab/params.hpp"
#include "sclab/state.hpp"
#include "sclab/types.hpp"

namespace sclab {

/// Work done by the recurrent layer stack. `macs` counts multiply-accumulates
/// of projections, convolutions, state updates and readouts (the gated output
/// projection and logits are excluded: no mitigation changes them).
struct OpCounters {
  std::uint64_t tokens = 0;
  std::uint64_t projections = 0;    // layer-token input projections
  std::uint64_t conv_steps = 0;     // layer-token convolution steps
  std::uint64_t head_updates = 0;   // N x P state updates
  std::uint64_t head_readouts = 0;  // N x P state readouts
  std::uint64_t normalizations = 0; // state rescales under kNormalize
  std::uint64_t lag_steps = 0;      // layer-token steps of the window's lagging stream
  double macs = 0.0;

  void reset() { *this = OpCounters{}; }
};

/// Activations of one head at one step, handed to probes.
template <typename S>
struct HeadActivations {
  std::size_t layer;
  std::size_t head;
  std::size_t position;  // 1-based: tokens consumed including this one
  S delta;               // after any Delta scaling
  S alpha;               // decay actually applied
  const Vector<S>& b_bar;  // insertion vector actually applied
  const Vector<S>& x;
  /// State after the update, or null when the chunked scan skips per-step
  /// states.
  const Matrix<S>* state;
};

/// Optional per-step observers. Observation only: they never alter results.
template <typename S>
struct StepProbe {
  std::function<void(std::size_t layer, std::size_t position, const RowVector<S>& u)> on_layer_input;
  std::function<void(const HeadActivations<S>&)> on_head;
};

/// Snapshot of one layer at a sample position.
template <typename S>
struct LayerSample {
  std::vector<Matrix<S>> h;   // per-head state (window-read state under kWindow)
  Eigen::VectorXd delta;      // per head
  Eigen::VectorXd alpha;      // per head
  Eigen::VectorXd log_decay;  // per head, log alpha_{1:t}
  RowVector<S> x;             // HP, post-conv x
  RowVector<S> b;             // N, post-conv B
  Matrix<S> conv_state;       // tail_len x (HP + 2N) pre-conv rows (x | B | C)
};

/// Receives layer snapshots every `sample_stride` tokens.
template <typename S>
class SampleSink {
 public:
  virtual ~SampleSink() = default;
  virtual void on_sample(std::size_t position, const std::vector<LayerSample<S>>& layers) = 0;
};

enum class LogitsMode { kAll, kLast, kNone };

template <typename S>
struct ForwardOptions {
  /// Tokens per chunk. 1 runs the plain step-by-step loop; larger chunks batch
  /// the projections and, for linear updates, use the chunked scan.
  std::size_t chunk_size = 64;
  LogitsMode logits = LogitsMode::kAll;
  /// When false a non-finite state or output throws NumericError; when true it
  /// propagates so collapsed trajectories stay inspectable.
  bool allow_nonfinite = false;
  const StepProbe<S>* probe = nullptr;
  SampleSink<S>* sampler = nullptr;
  std::size_t sample_stride = 256;
  OpCounters* counters = nullptr;
};

/// Called with (index into the token span, logits predicting the next token).
template <typename S>
using LogitSink = std::function<void(std::size_t, const RowVector<S>&)>;

/// Streams `tokens` through the model, advancing `state`.
template <typename S>
void forward_sequence(const ModelParams<S>& params, StreamState<S>& state,
                      std::span<const TokenId> tokens, const MitigationConfig& mitigation,
                      const ForwardOptions<S>& options, const LogitSink<S>& sink);

/// Convenience form returning a T x V logits matrix.
template <typename S>
Matrix<S> forward_sequence(const ModelParams<S>& params, StreamState<S>& state,
                           std::span<const TokenId> tokens, const MitigationConfig& mitigation,
                           const ForwardOptions<S>& options = {});

/// One token through the stack; returns the V logits.
template <typename S>
RowVector<S> model_step(const ModelParams<S>& params, StreamState<S>& state, TokenId token,
                        const MitigationConfig& mitigation,
                        const ForwardOptions<S>& options = {});

/// Depthwise convolution of a chunk of pre-convolution rows (Q x C) against
/// the stored tail; advances the tail. Row j of the result equals
/// causal_conv_step applied to row j.
template <typename S>
Matrix<S> conv_chunk(const Matrix<S>& pre, Matrix<S>& tail, const Matrix<S>& kernel,
                     const RowVector<S>& bias);

/// Per-head thresholds from a calibration run: the q-quantile of ||h_t||_F
/// observed per (layer, head), layer-major. The stream must be non-empty and
/// no longer than the configured training length. Use the chunk size of the
/// run the thresholds are meant for; at q = 1 that run then never rescales.
template <typename S>
std::vector<double> calibrate_norm_threshold(const ModelParams<S>& params,
                                             std::span<const TokenId> stream, double q = 1.0,
                                             std::size_t chunk_size = 64);

}  // namespace sclab
