// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

// Independent checks shared by the unit tests and the acceptance binary.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "sclab/kernels.hpp"
#include "sclab/model.hpp"
#include "sclab/model_io.hpp"
#include "support/test_util.hpp"

namespace sclab::testing {

/// Per-step lead activations of one head, in double.
struct HeadHistory {
  std::vector<double> alphas, deltas;
  std::vector<Eigen::VectorXd> b_bars, xs;
};

/// State of a fresh recurrence over the last min(t, r) recorded steps.
inline Eigen::MatrixXd recompute_window(const HeadHistory& hh, std::size_t t, std::size_t r) {
  const std::size_t begin = t > r ? t - r : 0;
  const std::size_t len = t - begin;
  const auto n = hh.b_bars[0].size(), p = hh.xs[0].size();
  Eigen::MatrixXd b(n, static_cast<Eigen::Index>(len)), x(p, static_cast<Eigen::Index>(len));
  std::vector<double> a(len);
  for (std::size_t i = 0; i < len; ++i) {
    b.col(static_cast<Eigen::Index>(i)) = hh.b_bars[begin + i];
    x.col(static_cast<Eigen::Index>(i)) = hh.xs[begin + i];
    a[i] = hh.alphas[begin + i];
  }
  return weighted_sum_oracle(std::span<const double>(a), b, x, len);
}

struct WindowCheck {
  double max_rel_error = 0.0;  // over checkpoints, layers and heads
  double window_macs_per_token = 0.0;
  double baseline_macs_per_token = 0.0;
};

/// Streams T random tokens through a window(r) model, comparing every head's
/// window read against a recompute over the last r lead activations at the
/// given checkpoints (1-based positions, increasing, last one = T).
template <typename S>
WindowCheck check_window_exactness(const ModelParams<S>& mp, std::size_t total, std::size_t r,
                                   std::vector<std::size_t> checkpoints, std::uint64_t seed) {
  const auto& cfg = mp.config;
  const auto toks = random_tokens(total, seed, static_cast<TokenId>(cfg.vocab_size));
  MitigationConfig m;
  m.kind = MitigationKind::kWindow;
  m.window_size = r;

  std::vector<HeadHistory> hist(cfg.num_layers * cfg.num_heads);
  StepProbe<S> probe;
  probe.on_head = [&](const HeadActivations<S>& a) {
    auto& hh = hist[a.layer * cfg.num_heads + a.head];
    hh.alphas.push_back(static_cast<double>(a.alpha));
    hh.deltas.push_back(static_cast<double>(a.delta));
    hh.b_bars.push_back(a.b_bar.template cast<double>());
    hh.xs.push_back(a.x.template cast<double>());
  };
  OpCounters wc, bc;
  ForwardOptions<S> opt;
  opt.probe = &probe;
  opt.logits = LogitsMode::kLast;
  opt.counters = &wc;
  auto st = make_stream_state(mp, m);
  const LogitSink<S> ignore = [](std::size_t, const RowVector<S>&) {};

  WindowCheck out;
  std::size_t done = 0;
  for (std::size_t cp : checkpoints) {
    forward_sequence<S>(mp, st, std::span<const TokenId>(toks).subspan(done, cp - done), m, opt, ignore);
    done = cp;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        const Eigen::MatrixXd want = recompute_window(hist[l * cfg.num_heads + h], cp, r);
        const Eigen::MatrixXd got = window_read(mp, st, l, h).template cast<double>();
        const double rel = (got - want).norm() / std::max(want.norm(), 1e-300);
        out.max_rel_error = std::max(out.max_rel_error, rel);
      }
    }
  }

  // Same stream, unmitigated, step by step: the per-token cost reference.
  ForwardOptions<S> base;
  base.chunk_size = 1;
  base.logits = LogitsMode::kLast;
  base.counters = &bc;
  auto bs = make_stream_state(mp);
  forward_sequence<S>(mp, bs, toks, {}, base, ignore);
  out.window_macs_per_token = wc.macs / static_cast<double>(wc.tokens);
  out.baseline_macs_per_token = bc.macs / static_cast<double>(bc.tokens);
  return out;
}

/// Largest relative error, over `steps` tokens and every head of every layer,
/// between the window decay recomputed from the Delta accumulator and the
/// log-space product of the individual alphas inside the window.
inline double check_window_decay_stability(const ModelParams<double>& mp, std::size_t steps,
                                           std::size_t r, std::uint64_t seed) {
  const auto& cfg = mp.config;
  MitigationConfig m;
  m.kind = MitigationKind::kWindow;
  m.window_size = r;
  std::vector<std::vector<double>> alphas(cfg.num_layers * cfg.num_heads);
  StepProbe<double> probe;
  probe.on_head = [&](const HeadActivations<double>& a) {
    alphas[a.layer * cfg.num_heads + a.head].push_back(a.alpha);
  };
  ForwardOptions<double> opt;
  opt.probe = &probe;
  opt.logits = LogitsMode::kNone;
  auto st = make_stream_state(mp, m);
  const auto toks = random_tokens(steps, seed, static_cast<TokenId>(cfg.vocab_size));
  double worst = 0.0;
  for (std::size_t t = 1; t <= steps; ++t) {
    forward_sequence<double>(mp, st, std::span<const TokenId>(toks).subspan(t - 1, 1), m, opt,
                             [](std::size_t, const RowVector<double>&) {});
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        const auto& a = alphas[l * cfg.num_heads + h];
        const std::size_t begin = t > r ? t - r + 1 : 1;
        const double want = cumulative_decay(std::span<const double>(a), begin, t);
        const double got = window_decay(st.window->layers[l].delta_acc[h].value(),
                                        mp.layers[l].a_log(static_cast<Eigen::Index>(h)));
        worst = std::max(worst, std::abs(got - want) / want);
      }
    }
  }
  return worst;
}

}  // namespace sclab::testing
