// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "sclab/mitigation.hpp"

#include <algorithm>

namespace sclab {

std::string to_string(MitigationKind kind) {
  switch (kind) {
    case MitigationKind::kNone: return "none";
    case MitigationKind::kDeltaScale: return "delta_scale";
    case MitigationKind::kForgetMore: return "forget_more";
    case MitigationKind::kNormalize: return "normalize";
    case MitigationKind::kWindow: return "window";
  }
  return "none";
}

MitigationKind parse_mitigation_kind(const std::string& s) {
  if (s == "none") return MitigationKind::kNone;
  if (s == "delta_scale" || s == "delta-scale") return MitigationKind::kDeltaScale;
  if (s == "forget_more" || s == "forget-more") return MitigationKind::kForgetMore;
  if (s == "normalize") return MitigationKind::kNormalize;
  if (s == "window") return MitigationKind::kWindow;
  throw UsageError("unknown mitigation '" + s +
                   "' (expected none|delta_scale|forget_more|normalize|window)");
}

void validate(const MitigationConfig& m) {
  switch (m.kind) {
    case MitigationKind::kNone:
      break;
    case MitigationKind::kDeltaScale:
      if (!(m.delta_factor > 0.0) || !std::isfinite(m.delta_factor)) {
        throw UsageError("delta_scale: factor must be a positive finite number");
      }
      break;
    case MitigationKind::kForgetMore:
      if (!(m.decay_exponent >= 1.0) || !std::isfinite(m.decay_exponent)) {
        throw UsageError("forget_more: decay exponent must be >= 1");
      }
      if (!(m.insertion_scale > 0.0 && m.insertion_scale <= 1.0)) {
        throw UsageError("forget_more: insertion scale must lie in (0, 1]");
      }
      break;
    case MitigationKind::kNormalize:
      if (m.head_thresholds.empty()) {
        if (!(m.norm_threshold > 0.0)) throw UsageError("normalize: threshold must be > 0");
      } else {
        for (double p : m.head_thresholds) {
          if (!(p > 0.0)) throw UsageError("normalize: calibrated thresholds must be > 0");
        }
      }
      break;
    case MitigationKind::kWindow:
      if (m.window_size < 1) throw UsageError("window: size must be >= 1");
      break;
  }
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw UsageError("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw UsageError("quantile must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return values[lo];
  return values[lo] + frac * (values[hi] - values[lo]);
}

}  // namespace sclab
