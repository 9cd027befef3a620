// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "sclab/config.hpp"

namespace sclab {

void validate(const ModelConfig& c) {
  auto require = [](std::size_t v, const char* name) {
    if (v < 1) throw UsageError(std::string("model config: ") + name + " must be >= 1");
  };
  require(c.vocab_size, "vocab_size");
  require(c.hidden_dim, "hidden_dim");
  require(c.num_heads, "num_heads");
  require(c.head_dim, "head_dim");
  require(c.state_dim, "state_dim");
  require(c.conv_kernel, "conv_kernel");
  // num_layers == 0 is a legal degenerate stack (embed -> norm -> unembed).
}

void check_official_shapes(const ModelConfig& c) {
  if (c.head_dim != 64) {
    throw DataError("official checkpoint shapes require head_dim 64, got " +
                    std::to_string(c.head_dim));
  }
  if (c.state_dim != 128) {
    throw DataError("official checkpoint shapes require state_dim 128, got " +
                    std::to_string(c.state_dim));
  }
  if (c.num_heads * c.head_dim != 2 * c.hidden_dim) {
    throw DataError("official checkpoint shapes require num_heads = 2*hidden_dim/head_dim (" +
                    std::to_string(2 * c.hidden_dim / c.head_dim) + "), got " +
                    std::to_string(c.num_heads));
  }
}

std::string to_string(ConvAlignment a) {
  return a == ConvAlignment::kCausal ? "causal" : "shifted";
}

std::string to_string(GatedNormScope s) {
  return s == GatedNormScope::kPerHead ? "head" : "layer";
}

ConvAlignment parse_conv_alignment(const std::string& s) {
  if (s == "causal") return ConvAlignment::kCausal;
  if (s == "shifted") return ConvAlignment::kShifted;
  throw UsageError("unknown conv alignment '" + s + "' (expected causal|shifted)");
}

GatedNormScope parse_gated_norm_scope(const std::string& s) {
  if (s == "head") return GatedNormScope::kPerHead;
  if (s == "layer") return GatedNormScope::kLayer;
  throw UsageError("unknown gated norm scope '" + s + "' (expected head|layer)");
}

}  // namespace sclab
