// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

// Training-free interventions on the head update rule.
//
//   delta_scale   Delta' = c * Delta (moves decay and insertion together)
//   forget_more   alpha' = alpha^a, B_bar' = b * B_bar (decoupled)
//   normalize     rescale h so that ||h||_F <= p after every update
//   window        h^(r) = h_t - alpha_{t-r+1:t} h_{t-r}, with the window
//                 decay recomputed from a running Delta sum on every read

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sclab/kernels.hpp"
#include "sclab/params.hpp"
#include "sclab/types.hpp"

namespace sclab {

enum class MitigationKind { kNone, kDeltaScale, kForgetMore, kNormalize, kWindow };

std::string to_string(MitigationKind kind);
MitigationKind parse_mitigation_kind(const std::string& s);

inline constexpr std::size_t kUnboundedWindow = std::numeric_limits<std::size_t>::max();

struct MitigationConfig {
  MitigationKind kind = MitigationKind::kNone;
  double delta_factor = 1.0;
  double decay_exponent = 1.0;   // a >= 1
  double insertion_scale = 1.0;  // 0 < b <= 1
  double norm_threshold = std::numeric_limits<double>::infinity();
  /// Calibrated per-head thresholds, layer-major (L * H entries). Overrides
  /// norm_threshold when non-empty.
  std::vector<double> head_thresholds;
  std::size_t window_size = kUnboundedWindow;

  /// Threshold p for one head under kNormalize.
  double threshold(std::size_t layer, std::size_t head, std::size_t num_heads) const {
    if (!head_thresholds.empty()) return head_thresholds.at(layer * num_heads + head);
    return norm_threshold;
  }

  /// True when the update stays linear in the state, so the chunked scan may
  /// replace the step-by-step loop.
  /// Neutral normalize and window settings count as linear: they are exact
  /// no-ops and must follow the baseline's arithmetic path.
  bool is_linear() const {
    switch (kind) {
      case MitigationKind::kNormalize:
        if (!head_thresholds.empty()) {
          for (double p : head_thresholds) {
            if (!std::isinf(p)) return false;
          }
          return true;
        }
        return std::isinf(norm_threshold);
      case MitigationKind::kWindow:
        return !window_active();
      default:
        return true;
    }
  }

  bool window_active() const {
    return kind == MitigationKind::kWindow && window_size != kUnboundedWindow;
  }
};

/// Throws UsageError for out-of-range parameters of the active kind.
void validate(const MitigationConfig& m);

template <typename S>
S apply_delta_scale(S delta, double factor) {
  return static_cast<S>(factor) * delta;
}

/// alpha' = alpha^a and B_bar' = b * B_bar.
template <typename S>
struct ForgetMoreResult {
  S alpha;
  Vector<S> b_bar;
};

template <typename S>
ForgetMoreResult<S> apply_forget_more(S alpha, const Vector<S>& b_bar, double decay_exponent,
                                      double insertion_scale) {
  const S a = decay_exponent == 1.0 ? alpha : static_cast<S>(std::pow(alpha, static_cast<S>(decay_exponent)));
  if (insertion_scale == 1.0) return {a, b_bar};
  return {a, (static_cast<S>(insertion_scale) * b_bar).eval()};
}

/// Frobenius norm accumulated in double.
template <typename Derived>
double frobenius_norm(const Eigen::MatrixBase<Derived>& h) {
  double acc = 0.0;
  for (Eigen::Index j = 0; j < h.cols(); ++j) {
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
      const double v = static_cast<double>(h(i, j));
      acc += v * v;
    }
  }
  return std::sqrt(acc);
}

/// Rescales h in place so that ||h||_F <= p. Returns true when it rescaled.
template <typename Derived>
bool clamp_state_norm(Eigen::MatrixBase<Derived>& h, double p) {
  const double norm = frobenius_norm(h);
  if (!(norm > p)) return false;
  h *= static_cast<typename Derived::Scalar>(p / norm);
  return true;
}

/// h' = clamp(alpha * h + outer(B_bar, x), p).
template <typename S>
Matrix<S> normalized_step(const Matrix<S>& h, S alpha, const Vector<S>& b_bar,
                          const Vector<S>& x, double p) {
  Matrix<S> out = head_step(h, alpha, b_bar, x);
  clamp_state_norm(out, p);
  return out;
}

/// Neumaier-compensated running sum; the Delta accumulator of the window.
struct CompensatedSum {
  double sum = 0.0;
  double comp = 0.0;

  void add(double v) {
    const double t = sum + v;
    if (std::abs(sum) >= std::abs(v)) {
      comp += (sum - t) + v;
    } else {
      comp += (v - t) + sum;
    }
    sum = t;
  }
  double value() const { return sum + comp; }
};

/// alpha over the window, recomputed from the Delta sum: exp(-sum * exp(A)).
inline double window_decay(double delta_sum, double a_log) {
  return std::exp(-delta_sum * std::exp(a_log));
}

/// h^(r) = h_lead - alpha_window * h_lag.
template <typename S>
Matrix<S> window_read(const Matrix<S>& h_lead, const Matrix<S>& h_lag, double delta_sum,
                      double a_log) {
  return h_lead - static_cast<S>(window_decay(delta_sum, a_log)) * h_lag;
}

/// q-quantile with linear interpolation between order statistics; q = 1
/// returns the maximum.
double quantile(std::vector<double> values, double q);

}  // namespace sclab
