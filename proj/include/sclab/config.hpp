// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>

#include "sclab/types.hpp"

namespace sclab {

/// Fixed epsilon of every RMS normalization in the model.
inline constexpr double kNormEps = 1e-5;

/// Which inputs the short convolution sees at step t.
enum class ConvAlignment {
  /// Window covers t-k+1 .. t (what published checkpoints use).
  kCausal,
  /// Window covers t-k .. t-1, excluding the current token.
  kShifted,
};

/// Span of the RMS norm applied to the gated head outputs.
enum class GatedNormScope {
  /// Each head's P-vector is normalized on its own.
  kPerHead,
  /// The concatenation of all heads is normalized together.
  kLayer,
};

struct ModelConfig {
  std::size_t vocab_size = 257;
  std::size_t hidden_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 8;
  std::size_t head_dim = 16;
  std::size_t state_dim = 16;
  std::size_t conv_kernel = 4;
  /// Training length in tokens; only used by collapse detectors.
  std::size_t train_len = 8192;
  bool conv_bias = true;
  ConvAlignment conv_alignment = ConvAlignment::kCausal;
  GatedNormScope gated_norm_scope = GatedNormScope::kPerHead;

  /// Width of H*P (all heads concatenated).
  std::size_t inner_dim() const { return num_heads * head_dim; }
  /// Number of past pre-convolution rows each conv channel keeps.
  std::size_t conv_tail_len() const {
    return conv_alignment == ConvAlignment::kCausal ? conv_kernel - 1
                                                    : conv_kernel;
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Throws UsageError when any dimension is zero.
void validate(const ModelConfig& config);

/// Published checkpoints always use P = 64, N = 128 and H = 2d / P.
/// Throws DataError naming the first violated relation.
void check_official_shapes(const ModelConfig& config);

std::string to_string(ConvAlignment a);
std::string to_string(GatedNormScope s);
ConvAlignment parse_conv_alignment(const std::string& s);
GatedNormScope parse_gated_norm_scope(const std::string& s);

}  // namespace sclab
