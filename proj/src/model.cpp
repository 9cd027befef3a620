// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "sclab/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "sclab/kernels.hpp"

namespace sclab {
namespace {

// Row-wise RMS norm; the single code path every normalized row goes through,
// so recomputed rows are bit-identical to the originals.
template <typename S>
Matrix<S> norm_rows(const Matrix<S>& rows, const Vector<S>& weight) {
  Matrix<S> out(rows.rows(), rows.cols());
  for (Eigen::Index j = 0; j < rows.rows(); ++j) {
    out.row(j) = rms_normalize(rows.row(j).transpose(), weight).transpose();
  }
  return out;
}

template <typename S>
struct ChunkActivations {
  Matrix<S> z;      // Q x HP, gate pre-activation
  Matrix<S> x;      // Q x HP, post conv + SiLU
  Matrix<S> b;      // Q x N
  Matrix<S> c;      // Q x N
  Matrix<S> delta;  // Q x H, after softplus and any Delta scaling
  // Pre-conv rows (tail followed by the chunk) for x | B | C, kept for
  // sampling only.
  Matrix<S> conv_rows;
};

template <typename S>
ChunkActivations<S> compute_activations(const LayerParams<S>& lp, const Matrix<S>& u,
                                        Matrix<S>& tail_x, Matrix<S>& tail_b, Matrix<S>& tail_c,
                                        const MitigationConfig& mitigation, bool keep_conv_rows) {
  ChunkActivations<S> a;
  a.z.noalias() = u * lp.w_gate;
  const Matrix<S> x_pre = u * lp.w_x;
  const Matrix<S> b_pre = u * lp.w_b;
  const Matrix<S> c_pre = u * lp.w_c;
  Matrix<S> d_pre = u * lp.w_delta;

  if (keep_conv_rows) {
    const Eigen::Index tail = tail_x.rows(), q = u.rows();
    const Eigen::Index hp = x_pre.cols(), n = b_pre.cols();
    a.conv_rows.resize(tail + q, hp + 2 * n);
    a.conv_rows << tail_x, tail_b, tail_c, x_pre, b_pre, c_pre;
  }

  a.x = silu(conv_chunk(x_pre, tail_x, lp.conv_x, lp.conv_x_bias));
  a.b = silu(conv_chunk(b_pre, tail_b, lp.conv_b, lp.conv_b_bias));
  a.c = silu(conv_chunk(c_pre, tail_c, lp.conv_c, lp.conv_c_bias));

  a.delta.resize(d_pre.rows(), d_pre.cols());
  const bool scale = mitigation.kind == MitigationKind::kDeltaScale;
  for (Eigen::Index j = 0; j < d_pre.rows(); ++j) {
    for (Eigen::Index h = 0; h < d_pre.cols(); ++h) {
      S delta = softplus(d_pre(j, h) + lp.b_delta(h));
      if (scale) delta = apply_delta_scale(delta, mitigation.delta_factor);
      a.delta(j, h) = delta;
    }
  }
  return a;
}

template <typename S>
S decay_of(S delta, S a_log) {
  return std::exp(-delta * std::exp(a_log));
}

template <typename S>
void require_finite_row(const Eigen::Ref<const RowVector<S>>& o, bool allow, std::size_t layer,
                        std::size_t head, std::size_t position) {
  if (!allow && !o.allFinite()) {
    throw NumericError("non-finite head output", layer, head, position);
  }
}

struct Dims {
  Eigen::Index d, hp, n, h, p, k, tail;
  explicit Dims(const ModelConfig& c)
      : d(static_cast<Eigen::Index>(c.hidden_dim)),
        hp(static_cast<Eigen::Index>(c.inner_dim())),
        n(static_cast<Eigen::Index>(c.state_dim)),
        h(static_cast<Eigen::Index>(c.num_heads)),
        p(static_cast<Eigen::Index>(c.head_dim)),
        k(static_cast<Eigen::Index>(c.conv_kernel)),
        tail(static_cast<Eigen::Index>(c.conv_tail_len())) {}

  double projection_macs() const { return static_cast<double>(d * (2 * hp + 2 * n + h)); }
  double conv_macs() const { return static_cast<double>(k * (hp + 2 * n)); }
  double update_macs() const { return static_cast<double>(2 * n * p); }
  double readout_macs() const { return static_cast<double>(n * p + p); }
};

template <typename S>
class ChunkRunner {
 public:
  ChunkRunner(const ModelParams<S>& params, StreamState<S>& state, const MitigationConfig& m,
              const ForwardOptions<S>& opt)
      : params_(params), cfg_(params.config), dims_(params.config), state_(state), m_(m), opt_(opt) {}

  void run(std::span<const TokenId> tokens, std::size_t offset, const LogitSink<S>& sink,
           bool chunk_holds_last) {
    const auto q = static_cast<Eigen::Index>(tokens.size());
    const std::size_t t0 = state_.position;

    Matrix<S> resid(q, dims_.d);
    for (Eigen::Index j = 0; j < q; ++j) {
      const TokenId id = tokens[static_cast<std::size_t>(j)];
      if (id >= cfg_.vocab_size) {
        throw DataError("token id " + std::to_string(id) + " at position " +
                        std::to_string(t0 + static_cast<std::size_t>(j)) +
                        " is outside the vocabulary (" + std::to_string(cfg_.vocab_size) + ")");
      }
      resid.row(j) = params_.embedding.row(id);
    }

    // Window bookkeeping; the window path always runs one token per chunk.
    std::optional<TokenId> lag_token;
    std::size_t slot = 0;
    if (state_.window) {
      auto& w = *state_.window;
      const std::size_t t = t0 + 1;
      slot = (t - 1) % w.window;
      if (t > w.window) lag_token = w.token_ring[slot];
      w.token_ring[slot] = tokens[0];
      w.position = t;
    }

    const std::size_t stride = opt_.sampler ? std::max<std::size_t>(1, opt_.sample_stride) : 0;
    std::vector<Eigen::Index> sample_rows;
    if (stride) {
      for (Eigen::Index j = 0; j < q; ++j) {
        if ((t0 + static_cast<std::size_t>(j) + 1) % stride == 0) sample_rows.push_back(j);
      }
    }
    std::vector<std::vector<LayerSample<S>>> samples(sample_rows.size(),
                                                     std::vector<LayerSample<S>>(cfg_.num_layers));

    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
      const auto& lp = params_.layers[l];
      auto& ls = state_.layers[l];
      const Matrix<S> u = norm_rows(resid, lp.in_norm);
      if (opt_.probe && opt_.probe->on_layer_input) {
        for (Eigen::Index j = 0; j < q; ++j) {
          opt_.probe->on_layer_input(l, t0 + static_cast<std::size_t>(j) + 1, u.row(j));
        }
      }

      std::optional<ChunkActivations<S>> lag_act;
      if (state_.window) {
        auto& wl = state_.window->layers[l];
        if (lag_token) {
          Matrix<S> u_lag;
          if (l == 0) {
            u_lag = norm_rows(Matrix<S>(params_.embedding.row(*lag_token)), lp.in_norm);
          } else {
            u_lag = wl.input_ring.row(static_cast<Eigen::Index>(slot));
          }
          lag_act = compute_activations(lp, u_lag, wl.tail_x, wl.tail_b, wl.tail_c, m_, false);
          count_lag();
        }
        if (l > 0) wl.input_ring.row(static_cast<Eigen::Index>(slot)) = u.row(0);
      }

      ChunkActivations<S> act =
          compute_activations(lp, u, ls.tail_x, ls.tail_b, ls.tail_c, m_, !sample_rows.empty());
      if (opt_.counters) {
        opt_.counters->projections += static_cast<std::uint64_t>(q);
        opt_.counters->conv_steps += static_cast<std::uint64_t>(q);
        opt_.counters->macs += static_cast<double>(q) * (dims_.projection_macs() + dims_.conv_macs());
      }

      Matrix<S> o(q, dims_.hp);
      if (m_.is_linear() && q > 1) {
        chunked_scan(l, act, o, sample_rows, samples);
      } else {
        sequential_scan(l, act, lag_act ? &*lag_act : nullptr, o, sample_rows, samples);
      }

      for (std::size_t si = 0; si < sample_rows.size(); ++si) {
        const Eigen::Index j = sample_rows[si];
        auto& s = samples[si][l];
        s.x = act.x.row(j);
        s.b = act.b.row(j);
        s.conv_state = act.conv_rows.middleRows(j + 1, dims_.tail);
      }

      if (!opt_.allow_nonfinite) {
        for (Eigen::Index hd = 0; hd < dims_.h; ++hd) {
          if (!ls.h[static_cast<std::size_t>(hd)].allFinite()) {
            throw NumericError("non-finite recurrent state", l, static_cast<std::size_t>(hd),
                               t0 + static_cast<std::size_t>(q));
          }
        }
      }

      resid.noalias() += gated_output(lp, act.z, o) * lp.w_out;
    }

    for (std::size_t si = 0; si < sample_rows.size(); ++si) {
      opt_.sampler->on_sample(t0 + static_cast<std::size_t>(sample_rows[si]) + 1, samples[si]);
    }

    state_.position = t0 + static_cast<std::size_t>(q);
    if (opt_.counters) opt_.counters->tokens += static_cast<std::uint64_t>(q);

    if (opt_.logits == LogitsMode::kAll) {
      const Matrix<S> logits = norm_rows(resid, params_.final_norm) * params_.embedding.transpose();
      for (Eigen::Index j = 0; j < q; ++j) sink(offset + static_cast<std::size_t>(j), logits.row(j));
    } else if (opt_.logits == LogitsMode::kLast && chunk_holds_last) {
      const Matrix<S> last = resid.bottomRows(1);
      const Matrix<S> logits = norm_rows(last, params_.final_norm) * params_.embedding.transpose();
      sink(offset + static_cast<std::size_t>(q) - 1, logits.row(0));
    }
  }

 private:
  void count_lag() {
    if (!opt_.counters) return;
    auto& c = *opt_.counters;
    c.projections += 1;
    c.conv_steps += 1;
    c.lag_steps += 1;
    c.macs += dims_.projection_macs() + dims_.conv_macs();
  }

  // Norm(o .* silu(z)) with the configured scope; result is Q x HP.
  Matrix<S> gated_output(const LayerParams<S>& lp, const Matrix<S>& z, const Matrix<S>& o) const {
    const Matrix<S> g = (o.array() * silu(z).array()).matrix();
    Matrix<S> out(g.rows(), g.cols());
    if (cfg_.gated_norm_scope == GatedNormScope::kLayer) {
      for (Eigen::Index j = 0; j < g.rows(); ++j) {
        out.row(j) = rms_normalize(g.row(j).transpose(), lp.gate_norm).transpose();
      }
    } else {
      for (Eigen::Index j = 0; j < g.rows(); ++j) {
        for (Eigen::Index hd = 0; hd < dims_.h; ++hd) {
          const Eigen::Index off = hd * dims_.p;
          out.row(j).segment(off, dims_.p) =
              rms_normalize(g.row(j).segment(off, dims_.p).transpose(),
                            lp.gate_norm.segment(off, dims_.p))
                  .transpose();
        }
      }
    }
    return out;
  }

  void sequential_scan(std::size_t l, const ChunkActivations<S>& act,
                       const ChunkActivations<S>* lag, Matrix<S>& o,
                       const std::vector<Eigen::Index>& sample_rows,
                       std::vector<std::vector<LayerSample<S>>>& samples) {
    const auto& lp = params_.layers[l];
    auto& ls = state_.layers[l];
    WindowLayer<S>* wl = state_.window ? &state_.window->layers[l] : nullptr;
    const bool forget = m_.kind == MitigationKind::kForgetMore;
    const bool normalize = m_.kind == MitigationKind::kNormalize;
    const std::size_t t0 = state_.position;
    std::size_t next_sample = 0;

    for (Eigen::Index j = 0; j < act.x.rows(); ++j) {
      const std::size_t t = t0 + static_cast<std::size_t>(j) + 1;
      const Vector<S> b_row = act.b.row(j).transpose();
      const Vector<S> c_row = act.c.row(j).transpose();
      Vector<S> b_lag;
      if (lag) b_lag = lag->b.row(0).transpose();
      const bool sampling = next_sample < sample_rows.size() && sample_rows[next_sample] == j;
      LayerSample<S>* sample = sampling ? &samples[next_sample][l] : nullptr;
      if (sample) {
        sample->h.resize(static_cast<std::size_t>(dims_.h));
        sample->delta.resize(dims_.h);
        sample->alpha.resize(dims_.h);
        sample->log_decay.resize(dims_.h);
      }

      for (Eigen::Index hd = 0; hd < dims_.h; ++hd) {
        const auto hs = static_cast<std::size_t>(hd);
        const Eigen::Index off = hd * dims_.p;
        const S a_log = lp.a_log(hd);
        const S delta = act.delta(j, hd);
        S alpha = decay_of(delta, a_log);
        Vector<S> b_bar = delta * b_row;
        if (forget) {
          auto fm = apply_forget_more(alpha, b_bar, m_.decay_exponent, m_.insertion_scale);
          alpha = fm.alpha;
          b_bar = std::move(fm.b_bar);
        }
        const Vector<S> x = act.x.row(j).segment(off, dims_.p).transpose();

        Matrix<S>& h = ls.h[hs];
        head_step_inplace(h, alpha, b_bar, x);
        if (normalize && clamp_state_norm(h, m_.threshold(l, hs, cfg_.num_heads)) && opt_.counters) {
          ++opt_.counters->normalizations;
        }
        ls.log_decay(hd) += std::log(static_cast<double>(alpha));

        Vector<S> out = head_readout(h, c_row, lp.d_skip.segment(off, dims_.p), x);
        if (wl) {
          wl->delta_acc[hs].add(static_cast<double>(delta));
          if (lag) {
            const S delta_lag = lag->delta(0, hd);
            const S alpha_lag = decay_of(delta_lag, a_log);
            const Vector<S> x_lag = lag->x.row(0).segment(off, dims_.p).transpose();
            head_step_inplace(wl->h_lag[hs], alpha_lag, (delta_lag * b_lag).eval(), x_lag);
            wl->delta_acc[hs].add(-static_cast<double>(delta_lag));
            const S alpha_window =
                static_cast<S>(window_decay(wl->delta_acc[hs].value(), static_cast<double>(a_log)));
            out.noalias() -= alpha_window * (wl->h_lag[hs].transpose() * c_row);
            if (opt_.counters) {
              opt_.counters->head_updates += 1;
              opt_.counters->head_readouts += 1;
              opt_.counters->macs += dims_.update_macs() + dims_.readout_macs();
            }
          }
        }
        o.row(j).segment(off, dims_.p) = out.transpose();
        require_finite_row<S>(o.row(j).segment(off, dims_.p), opt_.allow_nonfinite, l, hs, t);

        if (opt_.probe && opt_.probe->on_head) {
          opt_.probe->on_head(HeadActivations<S>{l, hs, t, delta, alpha, b_bar, x, &h});
        }
        if (sample) {
          sample->h[hs] = (wl && lag) ? window_read<S>(h, wl->h_lag[hs], wl->delta_acc[hs].value(),
                                                       static_cast<double>(a_log))
                                      : h;
          sample->delta(hd) = static_cast<double>(delta);
          sample->alpha(hd) = static_cast<double>(alpha);
          sample->log_decay(hd) = ls.log_decay(hd);
        }
      }
      if (opt_.counters) {
        opt_.counters->head_updates += static_cast<std::uint64_t>(dims_.h);
        opt_.counters->head_readouts += static_cast<std::uint64_t>(dims_.h);
        opt_.counters->macs +=
            static_cast<double>(dims_.h) * (dims_.update_macs() + dims_.readout_macs());
      }
      if (sampling) ++next_sample;
    }
  }

  // Chunked form of the linear recurrence. With s_j = sum_{i<=j} log alpha_i
  // inside the chunk and h0 the incoming state:
  //   o_j   = exp(s_j) C_j h0 + sum_{i<=j} exp(s_j - s_i) (C_j . B_bar_i) x_i + D .* x_j
  //   h_end = exp(s_last) h0 + sum_i exp(s_last - s_i) outer(B_bar_i, x_i)
  void chunked_scan(std::size_t l, const ChunkActivations<S>& act, Matrix<S>& o,
                    const std::vector<Eigen::Index>& sample_rows,
                    std::vector<std::vector<LayerSample<S>>>& samples) {
    const auto& lp = params_.layers[l];
    auto& ls = state_.layers[l];
    const Eigen::Index q = act.x.rows();
    const bool forget = m_.kind == MitigationKind::kForgetMore;
    const double exponent = forget ? m_.decay_exponent : 1.0;
    const S b_scale = forget ? static_cast<S>(m_.insertion_scale) : S(1);
    const std::size_t t0 = state_.position;

    const Matrix<S> gram = act.c * act.b.transpose();  // Q x Q, shared by all heads
    if (opt_.counters) opt_.counters->macs += static_cast<double>(q * q * dims_.n);

    Eigen::VectorXd s(q);
    Vector<S> bb(q);
    Matrix<S> w(q, q);
    for (Eigen::Index hd = 0; hd < dims_.h; ++hd) {
      const auto hs = static_cast<std::size_t>(hd);
      const Eigen::Index off = hd * dims_.p;
      const S a_log = lp.a_log(hd);
      const double rate = std::exp(static_cast<double>(a_log));
      double acc = 0.0;
      for (Eigen::Index j = 0; j < q; ++j) {
        acc += -exponent * static_cast<double>(act.delta(j, hd)) * rate;
        s(j) = acc;
        bb(j) = act.delta(j, hd) * b_scale;
      }
      for (Eigen::Index j = 0; j < q; ++j) {
        for (Eigen::Index i = 0; i < q; ++i) {
          w(j, i) = i <= j ? gram(j, i) * bb(i) * static_cast<S>(std::exp(s(j) - s(i))) : S(0);
        }
      }
      const auto xh = act.x.middleCols(off, dims_.p);
      Matrix<S>& h0 = ls.h[hs];
      Matrix<S> oh = w * xh;
      const Matrix<S> carried = act.c * h0;  // Q x P
      for (Eigen::Index j = 0; j < q; ++j) {
        oh.row(j) += static_cast<S>(std::exp(s(j))) * carried.row(j);
        oh.row(j).array() += xh.row(j).array() * lp.d_skip.segment(off, dims_.p).transpose().array();
      }
      o.middleCols(off, dims_.p) = oh;
      for (Eigen::Index j = 0; j < q; ++j) {
        require_finite_row<S>(o.row(j).segment(off, dims_.p), opt_.allow_nonfinite, l, hs,
                              t0 + static_cast<std::size_t>(j) + 1);
      }

      const double base_log_decay = ls.log_decay(hd);
      for (std::size_t si = 0; si < sample_rows.size(); ++si) {
        const Eigen::Index j = sample_rows[si];
        auto& smp = samples[si][l];
        if (smp.h.empty()) {
          smp.h.resize(static_cast<std::size_t>(dims_.h));
          smp.delta.resize(dims_.h);
          smp.alpha.resize(dims_.h);
          smp.log_decay.resize(dims_.h);
        }
        smp.h[hs] = state_at(h0, act.b, xh, bb, s, j);
        smp.delta(hd) = static_cast<double>(act.delta(j, hd));
        smp.alpha(hd) = std::exp(s(j) - (j > 0 ? s(j - 1) : 0.0));
        smp.log_decay(hd) = base_log_decay + s(j);
      }

      if (opt_.probe && opt_.probe->on_head) {
        for (Eigen::Index j = 0; j < q; ++j) {
          const S alpha = static_cast<S>(std::exp(s(j) - (j > 0 ? s(j - 1) : 0.0)));
          const Vector<S> b_bar = bb(j) * act.b.row(j).transpose();
          const Vector<S> x = xh.row(j).transpose();
          opt_.probe->on_head(HeadActivations<S>{l, hs, t0 + static_cast<std::size_t>(j) + 1,
                                                 act.delta(j, hd), alpha, b_bar, x, nullptr});
        }
      }

      h0 = state_at(h0, act.b, xh, bb, s, q - 1);
      ls.log_decay(hd) = base_log_decay + s(q - 1);
    }
    if (opt_.counters) {
      auto& c = *opt_.counters;
      c.head_updates += static_cast<std::uint64_t>(q * dims_.h);
      c.head_readouts += static_cast<std::uint64_t>(q * dims_.h);
      c.macs += static_cast<double>(dims_.h) *
                static_cast<double>(q * q * dims_.p + 2 * q * dims_.n * dims_.p + q * dims_.p);
    }
  }

  // State after row j of the chunk, from the incoming state h0.
  static Matrix<S> state_at(const Matrix<S>& h0, const Matrix<S>& b,
                            const Eigen::Ref<const Matrix<S>>& xh, const Vector<S>& bb,
                            const Eigen::VectorXd& s, Eigen::Index j) {
    Vector<S> weights(j + 1);
    for (Eigen::Index i = 0; i <= j; ++i) {
      weights(i) = bb(i) * static_cast<S>(std::exp(s(j) - s(i)));
    }
    Matrix<S> out = static_cast<S>(std::exp(s(j))) * h0;
    out.noalias() += b.topRows(j + 1).transpose() * weights.asDiagonal() * xh.topRows(j + 1);
    return out;
  }

  const ModelParams<S>& params_;
  const ModelConfig& cfg_;
  Dims dims_;
  StreamState<S>& state_;
  const MitigationConfig& m_;
  const ForwardOptions<S>& opt_;
};

template <typename S>
void check_state_layout(const ModelParams<S>& params, StreamState<S>& state,
                        const MitigationConfig& m) {
  if (state.layers.size() != params.config.num_layers) {
    throw UsageError("stream state does not belong to this model (layer count differs)");
  }
  if (m.window_active()) {
    if (!state.window) {
      if (state.position != 0) {
        throw UsageError("window mitigation must start at the beginning of a stream");
      }
      state = make_stream_state(params, m);
    } else if (state.window->window != m.window_size) {
      throw UsageError("stream state window size differs from the mitigation's window size");
    }
    if (state.window->position != state.position) {
      throw UsageError("window sub-stream position is inconsistent with the stream position");
    }
  } else if (state.window) {
    throw UsageError("stream state carries a window sub-stream but the window mitigation is off");
  }
}

}  // namespace

template <typename S>
Matrix<S> conv_chunk(const Matrix<S>& pre, Matrix<S>& tail, const Matrix<S>& kernel,
                     const RowVector<S>& bias) {
  const Eigen::Index q = pre.rows(), tl = tail.rows(), k = kernel.rows();
  Matrix<S> combined(tl + q, pre.cols());
  combined << tail, pre;
  Matrix<S> out(q, pre.cols());
  for (Eigen::Index j = 0; j < q; ++j) {
    RowVector<S> acc = bias;
    for (Eigen::Index m = 0; m < k; ++m) {
      acc.array() += kernel.row(m).array() * combined.row(j + m).array();
    }
    out.row(j) = acc;
  }
  tail = combined.bottomRows(tl);
  return out;
}

template <typename S>
void forward_sequence(const ModelParams<S>& params, StreamState<S>& state,
                      std::span<const TokenId> tokens, const MitigationConfig& mitigation,
                      const ForwardOptions<S>& options, const LogitSink<S>& sink) {
  validate(mitigation);
  check_state_layout(params, state, mitigation);
  const std::size_t chunk =
      mitigation.window_active() ? 1 : std::max<std::size_t>(1, options.chunk_size);
  ChunkRunner<S> runner(params, state, mitigation, options);
  for (std::size_t start = 0; start < tokens.size(); start += chunk) {
    const std::size_t len = std::min(chunk, tokens.size() - start);
    runner.run(tokens.subspan(start, len), start, sink, start + len == tokens.size());
  }
}

template <typename S>
Matrix<S> forward_sequence(const ModelParams<S>& params, StreamState<S>& state,
                           std::span<const TokenId> tokens, const MitigationConfig& mitigation,
                           const ForwardOptions<S>& options) {
  Matrix<S> out(static_cast<Eigen::Index>(tokens.size()),
                static_cast<Eigen::Index>(params.config.vocab_size));
  ForwardOptions<S> opt = options;
  opt.logits = LogitsMode::kAll;
  forward_sequence<S>(params, state, tokens, mitigation, opt,
                      [&](std::size_t i, const RowVector<S>& logits) {
                        out.row(static_cast<Eigen::Index>(i)) = logits;
                      });
  return out;
}

template <typename S>
RowVector<S> model_step(const ModelParams<S>& params, StreamState<S>& state, TokenId token,
                        const MitigationConfig& mitigation, const ForwardOptions<S>& options) {
  RowVector<S> out;
  ForwardOptions<S> opt = options;
  opt.logits = LogitsMode::kAll;
  const TokenId one[1] = {token};
  forward_sequence<S>(params, state, std::span<const TokenId>(one, 1), mitigation, opt,
                      [&](std::size_t, const RowVector<S>& logits) { out = logits; });
  return out;
}

template <typename S>
std::vector<double> calibrate_norm_threshold(const ModelParams<S>& params,
                                             std::span<const TokenId> stream, double q,
                                             std::size_t chunk_size) {
  if (stream.empty()) throw UsageError("calibration stream is empty");
  if (stream.size() > params.config.train_len) {
    throw UsageError("calibration stream (" + std::to_string(stream.size()) +
                     " tokens) is longer than the training length (" +
                     std::to_string(params.config.train_len) + ")");
  }
  if (!(q >= 0.0 && q <= 1.0)) throw UsageError("calibration quantile must lie in [0, 1]");
  const std::size_t heads = params.config.num_heads;
  std::vector<std::vector<double>> norms(params.config.num_layers * heads);
  // The clamp in a normalized run sees alpha*h + B_bar x^T on the step
  // loop's arithmetic path; a finite threshold that never binds keeps the
  // calibration run on that path.
  MitigationConfig probe_mode;
  probe_mode.kind = MitigationKind::kNormalize;
  probe_mode.norm_threshold = std::numeric_limits<double>::max();
  StepProbe<S> probe;
  probe.on_head = [&](const HeadActivations<S>& a) {
    norms[a.layer * heads + a.head].push_back(frobenius_norm(*a.state));
  };
  ForwardOptions<S> opt;
  opt.chunk_size = chunk_size;
  opt.logits = LogitsMode::kNone;
  opt.probe = &probe;
  StreamState<S> st = make_stream_state(params);
  forward_sequence<S>(params, st, stream, probe_mode, opt, [](std::size_t, const RowVector<S>&) {});
  std::vector<double> out;
  out.reserve(norms.size());
  for (auto& v : norms) out.push_back(quantile(std::move(v), q));
  return out;
}

#define SCLAB_INSTANTIATE_MODEL(S)                                                             \
  template Matrix<S> conv_chunk(const Matrix<S>&, Matrix<S>&, const Matrix<S>&,              \
                                const RowVector<S>&);                                        \
  template void forward_sequence(const ModelParams<S>&, StreamState<S>&,                     \
                                 std::span<const TokenId>, const MitigationConfig&,          \
                                 const ForwardOptions<S>&, const LogitSink<S>&);             \
  template Matrix<S> forward_sequence(const ModelParams<S>&, StreamState<S>&,                \
                                      std::span<const TokenId>, const MitigationConfig&,     \
                                      const ForwardOptions<S>&);                             \
  template RowVector<S> model_step(const ModelParams<S>&, StreamState<S>&, TokenId,          \
                                   const MitigationConfig&, const ForwardOptions<S>&);       \
  template std::vector<double> calibrate_norm_threshold(const ModelParams<S>&,               \
                                                        std::span<const TokenId>, double,    \
                                                        std::size_t);

SCLAB_INSTANTIATE_MODEL(float)
SCLAB_INSTANTIATE_MODEL(double)

#undef SCLAB_INSTANTIATE_MODEL

}  // namespace sclab
