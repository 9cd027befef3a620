// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "sclab/config.hpp"
#include "sclab/types.hpp"

namespace sclab {

/// Trained weights of one layer. Per-head matrices are stored with the heads
/// concatenated along the head-dimension axis: head h owns columns
/// [h*P, (h+1)*P) of w_gate / w_x, rows [h*P, (h+1)*P) of w_out, and the same
/// slice of d_skip, gate_norm and the x conv channels.
template <typename S>
struct LayerParams {
  Vector<S> in_norm;    // d, pre-layer RMS norm weight
  Matrix<S> w_gate;     // d x HP
  Matrix<S> w_x;        // d x HP
  Matrix<S> w_b;        // d x N, shared across heads
  Matrix<S> w_c;        // d x N, shared across heads
  Matrix<S> w_delta;    // d x H
  Vector<S> b_delta;    // H
  Vector<S> a_log;      // H; decay rate is exp(a_log)
  Vector<S> d_skip;     // HP
  Matrix<S> conv_x;     // k x HP
  Matrix<S> conv_b;     // k x N
  Matrix<S> conv_c;     // k x N
  RowVector<S> conv_x_bias;  // HP (zeros when the config has no conv bias)
  RowVector<S> conv_b_bias;  // N
  RowVector<S> conv_c_bias;  // N
  Vector<S> gate_norm;  // HP
  Matrix<S> w_out;      // HP x d

  template <typename T>
  LayerParams<T> cast() const {
    return {in_norm.template cast<T>(),     w_gate.template cast<T>(),
            w_x.template cast<T>(),         w_b.template cast<T>(),
            w_c.template cast<T>(),         w_delta.template cast<T>(),
            b_delta.template cast<T>(),     a_log.template cast<T>(),
            d_skip.template cast<T>(),      conv_x.template cast<T>(),
            conv_b.template cast<T>(),      conv_c.template cast<T>(),
            conv_x_bias.template cast<T>(), conv_b_bias.template cast<T>(),
            conv_c_bias.template cast<T>(), gate_norm.template cast<T>(),
            w_out.template cast<T>()};
  }

  bool operator==(const LayerParams& o) const {
    return in_norm == o.in_norm && w_gate == o.w_gate && w_x == o.w_x && w_b == o.w_b &&
           w_c == o.w_c && w_delta == o.w_delta && b_delta == o.b_delta &&
           a_log == o.a_log && d_skip == o.d_skip && conv_x == o.conv_x &&
           conv_b == o.conv_b && conv_c == o.conv_c && conv_x_bias == o.conv_x_bias &&
           conv_b_bias == o.conv_b_bias && conv_c_bias == o.conv_c_bias &&
           gate_norm == o.gate_norm && w_out == o.w_out;
  }
};

/// Full model. The output projection is tied to `embedding` (V x d).
/// Immutable once built; share it across streams by const reference.
template <typename S>
struct ModelParams {
  ModelConfig config;
  Matrix<S> embedding;
  std::vector<LayerParams<S>> layers;
  Vector<S> final_norm;

  template <typename T>
  ModelParams<T> cast() const {
    ModelParams<T> out{config, embedding.template cast<T>(), {}, final_norm.template cast<T>()};
    out.layers.reserve(layers.size());
    for (const auto& l : layers) out.layers.push_back(l.template cast<T>());
    return out;
  }

  bool operator==(const ModelParams& o) const {
    return config == o.config && embedding == o.embedding && layers == o.layers &&
           final_norm == o.final_norm;
  }
};

/// Throws ShapeMismatch when any tensor disagrees with `params.config`.
template <typename S>
void check_shapes(const ModelParams<S>& params);

/// Zero-initialized parameters with every shape derived from `config`.
template <typename S>
ModelParams<S> zero_params(const ModelConfig& config);

}  // namespace sclab
