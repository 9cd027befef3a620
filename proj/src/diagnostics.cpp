// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "sclab/diagnostics.hpp"

#include <algorithm>
#include <limits>

#include <json.hpp>

#include "sclab/mitigation.hpp"

namespace sclab {
namespace {

using ordered_json = nlohmann::ordered_json;

double median_of(std::vector<double> v) {
  const std::size_t n = v.size();
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2), v.end());
  const double hi = v[n / 2];
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2));
  return 0.5 * (lo + hi);
}

// JSON has no representation for non-finite numbers; they become null.
ordered_json num(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

}  // namespace

std::vector<OutlierChannel> detect_outlier_channels(const Eigen::Ref<const Eigen::MatrixXd>& h,
                                                    double c) {
  if (h.size() < 8) throw UsageError("outlier detection needs at least 8 state elements");
  std::vector<double> vals;
  vals.reserve(static_cast<std::size_t>(h.size()));
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    for (Eigen::Index j = 0; j < h.cols(); ++j) {
      if (std::isfinite(h(i, j))) vals.push_back(h(i, j));
    }
  }
  std::vector<OutlierChannel> out;
  if (vals.empty()) return out;
  const double med = median_of(vals);
  std::vector<double> dev(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) dev[i] = std::abs(vals[i] - med);
  const double mad = median_of(dev);
  constexpr double kEps = 1e-12;
  const double scale = 1.4826 * mad + kEps;
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    for (Eigen::Index j = 0; j < h.cols(); ++j) {
      const double v = h(i, j);
      // A non-finite element is the most extreme outlier there is.
      const double score = std::isfinite(v) ? std::abs(v - med) / scale
                                            : std::numeric_limits<double>::infinity();
      if (score > c) {
        const auto r = static_cast<std::size_t>(i), col = static_cast<std::size_t>(j);
        out.push_back({r, col, r * static_cast<std::size_t>(h.cols()) + col, v, score});
      }
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const OutlierChannel& a, const OutlierChannel& b) { return a.score > b.score; });
  return out;
}

// ---------------------------------------------------------------------------

template <typename S>
TraceRecorder<S>::TraceRecorder(const ModelConfig& config, std::size_t stride, bool keep_b)
    : config_(config), keep_b_(keep_b) {
  if (stride == 0) throw UsageError("trace stride must be >= 1");
  trace_.stride = stride;
  trace_.num_layers = config.num_layers;
  trace_.num_heads = config.num_heads;
}

template <typename S>
void TraceRecorder<S>::on_sample(std::size_t position,
                                 const std::vector<LayerSample<S>>& layers) {
  TraceSample ts;
  ts.position = position;
  ts.layers.resize(layers.size());
  last_.assign(layers.size(), {});
  const auto p = static_cast<Eigen::Index>(config_.head_dim);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& in = layers[l];
    auto& out = ts.layers[l];
    out.heads.resize(in.h.size());
    for (std::size_t hd = 0; hd < in.h.size(); ++hd) {
      auto& hs = out.heads[hd];
      const auto ih = static_cast<Eigen::Index>(hd);
      hs.state = record_state_stats(in.h[hd]);
      hs.delta = in.delta(ih);
      hs.alpha = in.alpha(ih);
      hs.cumulative_decay = std::exp(in.log_decay(ih));
      const StateStats xs = record_state_stats(in.x.segment(ih * p, p));
      hs.x_mean = xs.mean;
      hs.x_variance = xs.variance;
    }
    if (in.b.size() > 0) {
      const Eigen::RowVectorXd b = in.b.template cast<double>();
      out.b_min = b.minCoeff();
      out.b_max = b.maxCoeff();
      out.b_mean = b.mean();
      if (keep_b_) out.b.assign(b.data(), b.data() + b.size());
    }
    if (in.conv_state.size() > 0) {
      const StateStats cs = record_state_stats(in.conv_state);
      out.conv_mean = cs.mean;
      out.conv_variance = cs.variance;
    }
    last_[l] = in.h;
  }
  trace_.samples.push_back(std::move(ts));
}

template class TraceRecorder<float>;
template class TraceRecorder<double>;

// ---------------------------------------------------------------------------

DecayTrace decay_trace(const std::vector<std::vector<double>>& alphas, std::size_t stride,
                       std::size_t train_len, double flag) {
  if (stride == 0) throw UsageError("decay trace stride must be >= 1");
  DecayTrace out;
  std::size_t steps = 0;
  for (const auto& a : alphas) steps = std::max(steps, a.size());
  for (std::size_t t = stride; t <= steps; t += stride) out.positions.push_back(t);
  out.series.resize(alphas.size());
  out.at_train_len.assign(alphas.size(), std::numeric_limits<double>::quiet_NaN());
  out.retention_heavy.assign(alphas.size(), false);
  for (std::size_t h = 0; h < alphas.size(); ++h) {
    const auto& a = alphas[h];
    if (a.size() != steps) throw UsageError("decay trace: heads have different stream lengths");
    double log_sum = 0.0;
    for (std::size_t t = 1; t <= steps; ++t) {
      log_sum += std::log(a[t - 1]);
      if (t % stride == 0) out.series[h].push_back(std::exp(log_sum));
      if (t == train_len) {
        out.at_train_len[h] = std::exp(log_sum);
        out.retention_heavy[h] = out.at_train_len[h] > flag;
      }
    }
  }
  return out;
}

std::vector<DecayTrace> decay_from_trace(const StateTrace& trace, std::size_t train_len,
                                         double flag) {
  std::vector<DecayTrace> out(trace.num_layers);
  for (std::size_t l = 0; l < trace.num_layers; ++l) {
    auto& d = out[l];
    d.series.assign(trace.num_heads, {});
    d.at_train_len.assign(trace.num_heads, std::numeric_limits<double>::quiet_NaN());
    d.retention_heavy.assign(trace.num_heads, false);
    for (const auto& s : trace.samples) {
      if (l == 0) d.positions.push_back(s.position);
      for (std::size_t h = 0; h < trace.num_heads; ++h) {
        const double v = s.layers[l].heads[h].cumulative_decay;
        d.series[h].push_back(v);
        if (s.position == train_len) {
          d.at_train_len[h] = v;
          d.retention_heavy[h] = v > flag;
        }
      }
    }
    if (l > 0) d.positions = out[0].positions;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<double> smooth_perplexity(std::span<const double> nll, std::size_t window) {
  if (window == 0) throw UsageError("smoothing window must be >= 1");
  if (nll.size() < window) return {};
  std::vector<double> out;
  out.reserve(nll.size() - window + 1);
  CompensatedSum acc;
  for (std::size_t i = 0; i < window; ++i) acc.add(nll[i]);
  const double w = static_cast<double>(window);
  out.push_back(std::exp(acc.value() / w));
  for (std::size_t i = window; i < nll.size(); ++i) {
    acc.add(nll[i]);
    acc.add(-nll[i - window]);
    out.push_back(std::exp(acc.value() / w));
  }
  return out;
}

PerplexityCurve PerplexityCurve::from_nll(std::vector<double> nll, std::size_t window) {
  PerplexityCurve c;
  c.window = window;
  c.nll = std::move(nll);
  c.smoothed = smooth_perplexity(c.nll, window);
  return c;
}

PerplexityCurve PerplexityCurve::from_perplexity(std::span<const double> ppl, std::size_t window) {
  std::vector<double> nll(ppl.size());
  for (std::size_t i = 0; i < ppl.size(); ++i) nll[i] = std::log(ppl[i]);
  return from_nll(std::move(nll), window);
}

CollapseReport sc_detect(const PerplexityCurve& curve, std::size_t train_len,
                         const DetectorOptions& options) {
  const std::size_t w = curve.window;
  if (w == 0) throw UsageError("smoothing window must be >= 1");
  if (train_len < w) {
    throw UsageError("training length (" + std::to_string(train_len) +
                     ") is shorter than the smoothing window (" + std::to_string(w) + ")");
  }
  if (!(options.multiplier > 0.0)) throw UsageError("collapse multiplier must be positive");
  if (curve.nll.size() < train_len || curve.smoothed.size() != curve.nll.size() - w + 1) {
    throw DataError("perplexity curve (" + std::to_string(curve.nll.size()) +
                    " positions) does not cover the training length (" +
                    std::to_string(train_len) + ")");
  }
  CollapseReport r;
  r.multiplier = options.multiplier;
  r.window = w;
  r.stride = options.stride ? options.stride : w;
  r.train_len = train_len;

  double base = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < curve.smoothed.size() && curve.position(i) <= train_len; ++i) {
    // NaN compares false, so a poisoned baseline is reported rather than skipped.
    if (!(curve.smoothed[i] <= base)) base = curve.smoothed[i];
  }
  r.baseline = base;
  r.threshold = options.multiplier * base;
  const std::size_t first = (train_len / r.stride + 1) * r.stride;
  for (std::size_t pos = first; pos <= curve.nll.size(); pos += r.stride) {
    const double v = curve.smoothed[pos - w];
    if (v > r.threshold || std::isnan(v)) {
      r.collapsed = true;
      r.onset = pos;
      break;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

void write_trace_csv(std::ostream& os, const StateTrace& t) {
  os << "schema_version,position";
  for (std::size_t l = 0; l < t.num_layers; ++l) {
    for (std::size_t h = 0; h < t.num_heads; ++h) {
      const std::string p = ",l" + std::to_string(l) + ".h" + std::to_string(h) + ".";
      os << p << "mean" << p << "var" << p << "norm" << p << "poisoned" << p << "delta" << p
         << "alpha" << p << "cum_decay" << p << "x_mean" << p << "x_var";
    }
  }
  for (std::size_t l = 0; l < t.num_layers; ++l) {
    const std::string p = ",l" + std::to_string(l) + ".";
    os << p << "b_min" << p << "b_max" << p << "b_mean" << p << "conv_mean" << p << "conv_var";
  }
  os << '\n';
  const auto old_prec = os.precision(17);
  for (const auto& s : t.samples) {
    os << kTraceSchemaVersion << ',' << s.position;
    for (const auto& l : s.layers) {
      for (const auto& h : l.heads) {
        os << ',' << h.state.mean << ',' << h.state.variance << ',' << h.state.norm << ','
           << (h.state.poisoned ? 1 : 0) << ',' << h.delta << ',' << h.alpha << ','
           << h.cumulative_decay << ',' << h.x_mean << ',' << h.x_variance;
      }
    }
    for (const auto& l : s.layers) {
      os << ',' << l.b_min << ',' << l.b_max << ',' << l.b_mean << ',' << l.conv_mean << ','
         << l.conv_variance;
    }
    os << '\n';
  }
  os.precision(old_prec);
}

std::string trace_to_json(const StateTrace& t) {
  ordered_json j;
  j["schema_version"] = kTraceSchemaVersion;
  j["stride"] = t.stride;
  j["num_layers"] = t.num_layers;
  j["num_heads"] = t.num_heads;
  ordered_json samples = ordered_json::array();
  for (const auto& s : t.samples) {
    ordered_json js;
    js["position"] = s.position;
    ordered_json layers = ordered_json::array();
    for (const auto& l : s.layers) {
      ordered_json jl;
      ordered_json heads = ordered_json::array();
      for (const auto& h : l.heads) {
        heads.push_back({{"mean", num(h.state.mean)},
                         {"variance", num(h.state.variance)},
                         {"norm", num(h.state.norm)},
                         {"poisoned", h.state.poisoned},
                         {"delta", num(h.delta)},
                         {"alpha", num(h.alpha)},
                         {"cumulative_decay", num(h.cumulative_decay)},
                         {"x_mean", num(h.x_mean)},
                         {"x_variance", num(h.x_variance)}});
      }
      jl["heads"] = std::move(heads);
      jl["b_min"] = num(l.b_min);
      jl["b_max"] = num(l.b_max);
      jl["b_mean"] = num(l.b_mean);
      jl["conv_mean"] = num(l.conv_mean);
      jl["conv_variance"] = num(l.conv_variance);
      if (!l.b.empty()) jl["b"] = l.b;
      layers.push_back(std::move(jl));
    }
    js["layers"] = std::move(layers);
    samples.push_back(std::move(js));
  }
  j["samples"] = std::move(samples);
  return j.dump(2);
}

std::string collapse_to_json(const CollapseReport& r) {
  ordered_json j;
  j["schema_version"] = kCollapseSchemaVersion;
  j["collapsed"] = r.collapsed;
  j["onset"] = r.onset ? ordered_json(*r.onset) : ordered_json(nullptr);
  j["baseline"] = num(r.baseline);
  j["threshold"] = num(r.threshold);
  j["multiplier"] = r.multiplier;
  j["smoothing_window"] = r.window;
  j["stride"] = r.stride;
  j["train_len"] = r.train_len;
  return j.dump(2);
}

void write_curve_csv(std::ostream& os, const PerplexityCurve& c) {
  const auto old_prec = os.precision(17);
  os << "position,smoothed_ppl\n";
  for (std::size_t i = 0; i < c.smoothed.size(); ++i) {
    os << c.position(i) << ',' << c.smoothed[i] << '\n';
  }
  os.precision(old_prec);
}

std::string decay_to_json(const DecayTrace& d) {
  ordered_json j;
  j["schema_version"] = kTraceSchemaVersion;
  j["positions"] = d.positions;
  ordered_json heads = ordered_json::array();
  for (std::size_t h = 0; h < d.series.size(); ++h) {
    ordered_json s = ordered_json::array();
    for (double v : d.series[h]) s.push_back(num(v));
    heads.push_back({{"head", h},
                     {"alpha_1_t", std::move(s)},
                     {"at_train_len", num(d.at_train_len[h])},
                     {"retention_heavy", static_cast<bool>(d.retention_heavy[h])}});
  }
  j["heads"] = std::move(heads);
  return j.dump(2);
}

std::string outliers_to_json(const std::vector<std::vector<std::vector<OutlierChannel>>>& o) {
  ordered_json j;
  j["schema_version"] = kTraceSchemaVersion;
  ordered_json layers = ordered_json::array();
  for (std::size_t l = 0; l < o.size(); ++l) {
    ordered_json heads = ordered_json::array();
    for (std::size_t h = 0; h < o[l].size(); ++h) {
      ordered_json chans = ordered_json::array();
      for (const auto& c : o[l][h]) {
        chans.push_back({{"row", c.row}, {"col", c.col}, {"index", c.index},
                         {"value", num(c.value)}, {"score", num(c.score)}});
      }
      heads.push_back({{"head", h}, {"channels", std::move(chans)}});
    }
    layers.push_back({{"layer", l}, {"heads", std::move(heads)}});
  }
  j["layers"] = std::move(layers);
  return j.dump(2);
}

}  // namespace sclab
