// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "sclab/config.hpp"
#include "sclab/types.hpp"

namespace sclab::testing {

/// Small model shape; H * P need not equal 2d.
inline ModelConfig tiny_config(std::size_t layers = 2, std::size_t d = 16, std::size_t heads = 4,
                               std::size_t p = 8, std::size_t n = 16) {
  ModelConfig c;
  c.vocab_size = 257;
  c.hidden_dim = d;
  c.num_layers = layers;
  c.num_heads = heads;
  c.head_dim = p;
  c.state_dim = n;
  return c;
}

inline std::vector<TokenId> random_tokens(std::size_t n, std::uint64_t seed, TokenId vocab = 257) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> pick(0, vocab - 1);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = pick(rng);
  return out;
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  return (a.template cast<double>() - b.template cast<double>()).cwiseAbs().maxCoeff();
}

template <typename A, typename B>
bool bit_equal(const A& a, const B& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      if (a(i, j) != b(i, j)) return false;
    }
  }
  return true;
}

}  // namespace sclab::testing
