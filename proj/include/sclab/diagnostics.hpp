// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

// Observation-only instrumentation: state statistics, outlier channels,
// component and cumulative-decay traces, and the collapse detector.

#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sclab/config.hpp"
#include "sclab/model.hpp"
#include "sclab/types.hpp"

namespace sclab {

inline constexpr int kTraceSchemaVersion = 1;
inline constexpr int kCollapseSchemaVersion = 1;

/// Statistics over all N*P elements of one head state, accumulated in double.
struct StateStats {
  double mean = 0.0;
  double variance = 0.0;  // population variance, never negative
  double norm = 0.0;      // Frobenius
  bool poisoned = false;  // some element was not finite
};

template <typename Derived>
StateStats record_state_stats(const Eigen::MatrixBase<Derived>& h) {
  StateStats s;
  const auto n = static_cast<double>(h.size());
  if (h.size() == 0) return s;
  double sum = 0.0, sq = 0.0;
  for (Eigen::Index j = 0; j < h.cols(); ++j) {
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
      const double v = static_cast<double>(h(i, j));
      if (!std::isfinite(v)) s.poisoned = true;
      sum += v;
      sq += v * v;
    }
  }
  s.mean = sum / n;
  // Second pass around the mean keeps the variance accurate for large means.
  double dev = 0.0;
  for (Eigen::Index j = 0; j < h.cols(); ++j) {
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
      const double e = static_cast<double>(h(i, j)) - s.mean;
      dev += e * e;
    }
  }
  s.variance = dev / n;
  s.norm = std::sqrt(sq);
  return s;
}

template <typename S>
std::vector<StateStats> record_state_stats(const std::vector<Matrix<S>>& heads) {
  std::vector<StateStats> out;
  out.reserve(heads.size());
  for (const auto& h : heads) out.push_back(record_state_stats(h));
  return out;
}

struct OutlierChannel {
  std::size_t row = 0;   // state-dim index n
  std::size_t col = 0;   // head-dim index p
  std::size_t index = 0; // row * P + col
  double value = 0.0;
  double score = 0.0;    // robust z-score
};

inline constexpr double kOutlierThreshold = 6.0;

/// Elements whose robust z-score |v - median| / (1.4826 MAD + eps) exceeds
/// `c`, sorted by score descending. Needs at least 8 elements.
std::vector<OutlierChannel> detect_outlier_channels(const Eigen::Ref<const Eigen::MatrixXd>& h,
                                                    double c = kOutlierThreshold);

template <typename S>
std::vector<OutlierChannel> detect_outlier_channels(const Matrix<S>& h,
                                                    double c = kOutlierThreshold) {
  const Eigen::MatrixXd hd = h.template cast<double>();
  return detect_outlier_channels(Eigen::Ref<const Eigen::MatrixXd>(hd), c);
}

// ---------------------------------------------------------------------------
// State trace
// ---------------------------------------------------------------------------

struct HeadTraceSample {
  StateStats state;
  double delta = 0.0;
  double alpha = 0.0;
  double cumulative_decay = 1.0;  // alpha_{1:t}
  double x_mean = 0.0;
  double x_variance = 0.0;
};

struct LayerTraceSample {
  std::vector<HeadTraceSample> heads;
  double b_min = 0.0;
  double b_max = 0.0;
  double b_mean = 0.0;
  double conv_mean = 0.0;
  double conv_variance = 0.0;
  std::vector<double> b;  // full B_t snapshot, only when requested
};

struct TraceSample {
  std::size_t position = 0;  // 1-based token count
  std::vector<LayerTraceSample> layers;
};

struct StateTrace {
  std::size_t stride = 0;
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::vector<TraceSample> samples;
};

/// Collects a StateTrace from the forward pass. Attach with
/// ForwardOptions::sampler and matching sample_stride.
template <typename S>
class TraceRecorder final : public SampleSink<S> {
 public:
  TraceRecorder(const ModelConfig& config, std::size_t stride, bool keep_b = false);

  void on_sample(std::size_t position, const std::vector<LayerSample<S>>& layers) override;

  const StateTrace& trace() const { return trace_; }
  std::size_t stride() const { return trace_.stride; }
  /// Per-head states of the most recent sample, kept for outlier analysis.
  const std::vector<std::vector<Matrix<S>>>& last_states() const { return last_; }

 private:
  ModelConfig config_;
  bool keep_b_;
  StateTrace trace_;
  std::vector<std::vector<Matrix<S>>> last_;
};

// ---------------------------------------------------------------------------
// Cumulative decay
// ---------------------------------------------------------------------------

inline constexpr double kRetentionFlag = 0.8;

struct DecayTrace {
  std::vector<std::size_t> positions;        // sample positions (1-based)
  std::vector<std::vector<double>> series;   // [head][sample] alpha_{1:t}
  /// alpha_{1:T_train} per head, NaN when the stream is shorter than T_train.
  std::vector<double> at_train_len;
  std::vector<bool> retention_heavy;         // at_train_len > flag
};

/// `alphas[h][t-1]` is alpha_t of head h. Samples every `stride` steps,
/// starting with t = 1 when stride is 1.
DecayTrace decay_trace(const std::vector<std::vector<double>>& alphas, std::size_t stride,
                       std::size_t train_len, double flag = kRetentionFlag);

/// Cumulative-decay series per layer read off a StateTrace (exact: the trace
/// carries the running log-decay sum). at_train_len is taken from the sample
/// at position T_train, NaN when there is none.
std::vector<DecayTrace> decay_from_trace(const StateTrace& trace, std::size_t train_len,
                                         double flag = kRetentionFlag);

// ---------------------------------------------------------------------------
// Collapse detection
// ---------------------------------------------------------------------------

inline constexpr std::size_t kDefaultSmoothing = 512;
inline constexpr double kCollapseMultiplier = 2.0;

/// Per-token negative log-likelihoods of scored positions 1..T and their
/// smoothed perplexity: smoothed[i] = exp(mean(nll[i .. i+w-1])), attributed
/// to position i + w.
struct PerplexityCurve {
  std::size_t window = kDefaultSmoothing;
  std::vector<double> nll;
  std::vector<double> smoothed;

  std::size_t position(std::size_t i) const { return i + window; }
  static PerplexityCurve from_nll(std::vector<double> nll, std::size_t window);
  static PerplexityCurve from_perplexity(std::span<const double> ppl, std::size_t window);
};

/// exp of the moving mean of `nll` over `window`; length T - w + 1. The
/// running sum is compensated so long streams do not drift.
std::vector<double> smooth_perplexity(std::span<const double> nll, std::size_t window);

struct DetectorOptions {
  double multiplier = kCollapseMultiplier;
  /// Positions checked after T_train are the multiples of `stride`;
  /// 0 means the smoothing window.
  std::size_t stride = 0;
};

struct CollapseReport {
  bool collapsed = false;
  std::optional<std::size_t> onset;  // always > train_len when set
  double baseline = 0.0;             // max smoothed perplexity at positions <= T_train
  double threshold = 0.0;            // multiplier * baseline
  double multiplier = kCollapseMultiplier;
  std::size_t window = 0;
  std::size_t stride = 0;
  std::size_t train_len = 0;
};

/// Throws UsageError when train_len < window and DataError when the curve
/// does not reach train_len.
CollapseReport sc_detect(const PerplexityCurve& curve, std::size_t train_len,
                         const DetectorOptions& options = {});

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Wide CSV, one row per sample. Columns: schema_version, position, then per
/// layer l and head h the block l<l>.h<h>.{mean,var,norm,poisoned,delta,
/// alpha,cum_decay,x_mean,x_var}, then per layer l<l>.{b_min,b_max,b_mean,
/// conv_mean,conv_var}.
void write_trace_csv(std::ostream& os, const StateTrace& trace);
std::string trace_to_json(const StateTrace& trace);

std::string collapse_to_json(const CollapseReport& report);
/// Columns: position, smoothed_ppl.
void write_curve_csv(std::ostream& os, const PerplexityCurve& curve);

std::string decay_to_json(const DecayTrace& decay);
std::string outliers_to_json(const std::vector<std::vector<std::vector<OutlierChannel>>>& per_layer_head);

}  // namespace sclab
