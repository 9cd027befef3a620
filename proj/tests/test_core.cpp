// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <doctest.h>

#include "sclab/kernels.hpp"
#include "sclab/model.hpp"
#include "sclab/model_io.hpp"
#include "support/reference_model.hpp"
#include "support/test_util.hpp"

using namespace sclab;
using sclab::testing::bit_equal;
using sclab::testing::max_abs_diff;
using sclab::testing::random_tokens;
using sclab::testing::tiny_config;

TEST_CASE("silu") {
  CHECK(silu(0.0) == 0.0);
  CHECK(silu(40.0) == doctest::Approx(40.0).epsilon(1e-12));
  // 1 / (1 + e^-1) by hand.
  CHECK(silu(1.0) == doctest::Approx(0.7310585786300049).epsilon(1e-14));
  Eigen::VectorXd v(3);
  v << -1.0, 0.0, 1.0;
  const Eigen::VectorXd s = silu(v);
  CHECK(s(0) == doctest::Approx(-0.2689414213699951).epsilon(1e-14));
  CHECK(s(1) == 0.0);
}

TEST_CASE("softplus stays positive and is overflow safe") {
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(softplus(-1000.0) > 0.0);
  CHECK(softplus(-1000.0f) > 0.0f);
  CHECK(std::abs(softplus(50.0) - 50.0) < 1e-12);
  CHECK(std::isfinite(softplus(1000.0)));
  Eigen::VectorXd u(2), w(2);
  u << 1.0, 2.0;
  w << 0.5, -0.25;
  CHECK(softplus_delta(u, w, 0.0) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("rms_normalize") {
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(8);
  const Eigen::VectorXd c = Eigen::VectorXd::Constant(8, -3.0);
  const Eigen::VectorXd r = rms_normalize(c, ones);
  for (Eigen::Index i = 0; i < 8; ++i) CHECK(r(i) == doctest::Approx(-1.0).epsilon(1e-5));
  const Eigen::VectorXd z = rms_normalize(Eigen::VectorXd::Zero(8).eval(), ones);
  CHECK(z.isZero(0.0));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 4.0);
  Eigen::VectorXd v(64);
  for (auto& e : v) e = nd(rng);
  const Eigen::VectorXd n = rms_normalize(v, Eigen::VectorXd::Ones(64).eval());
  CHECK(std::sqrt(n.squaredNorm() / 64.0) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("causal_conv_step") {
  Matrix<double> kernel = Matrix<double>::Zero(4, 2);
  kernel.row(3).setOnes();
  const RowVector<double> bias = RowVector<double>::Zero(2);
  Matrix<double> tail = Matrix<double>::Random(3, 2);
  RowVector<double> cur(2);
  cur << 1.5, -2.0;
  CHECK(bit_equal(causal_conv_step<double>(tail, cur, kernel, bias, ConvAlignment::kCausal), cur));
  CHECK(bit_equal(tail.row(2), cur));

  Matrix<double> zero_tail = Matrix<double>::Zero(3, 2);
  const Matrix<double> all_ones = Matrix<double>::Ones(4, 2);
  CHECK(bit_equal(causal_conv_step<double>(zero_tail, cur, all_ones, bias, ConvAlignment::kCausal), cur));

  SUBCASE("streaming equals whole-sequence convolution") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    const Eigen::Index k = 4, ch = 3, len = 8;
    Matrix<double> ker(k, ch), seq(len, ch);
    RowVector<double> b(ch);
    for (auto& e : ker.reshaped()) e = ud(rng);
    for (auto& e : seq.reshaped()) e = ud(rng);
    for (auto& e : b) e = ud(rng);
    Matrix<double> t = Matrix<double>::Zero(k - 1, ch);
    for (Eigen::Index i = 0; i < len; ++i) {
      const RowVector<double> got = causal_conv_step<double>(t, seq.row(i), ker, b, ConvAlignment::kCausal);
      for (Eigen::Index c = 0; c < ch; ++c) {
        double want = b(c);
        for (Eigen::Index j = 0; j < k; ++j) {
          const Eigen::Index src = i - (k - 1) + j;
          if (src >= 0) want += ker(j, c) * seq(src, c);
        }
        CHECK(std::abs(got(c) - want) < 1e-6);
      }
    }
  }

  SUBCASE("shifted alignment excludes the current input") {
    Matrix<double> t = Matrix<double>::Zero(4, 1);
    const Matrix<double> ker = Matrix<double>::Ones(4, 1);
    RowVector<double> one(1), b0 = RowVector<double>::Zero(1);
    one << 1.0;
    CHECK(causal_conv_step<double>(t, one, ker, b0, ConvAlignment::kShifted)(0) == 0.0);
    CHECK(causal_conv_step<double>(t, one, ker, b0, ConvAlignment::kShifted)(0) == 1.0);
  }
}

TEST_CASE("discretize") {
  Eigen::VectorXd b = Eigen::VectorXd::Constant(4, 2.0);
  const auto tiny = discretize(1e-12, 0.0, b);
  CHECK(tiny.alpha < 1.0);
  CHECK(tiny.alpha > 1.0 - 1e-11);
  CHECK(tiny.b_bar.maxCoeff() < 1e-11);
  const auto half = discretize(std::log(2.0), 0.0, b);
  CHECK(half.alpha == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(half.b_bar(0) == doctest::Approx(2.0 * std::log(2.0)));
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ud(0.001, 2.0), ua(-3.0, 3.0);
  for (int i = 0; i < 100; ++i) {
    const double delta = ud(rng), a = ua(rng);
    const auto r = discretize(delta, a, b);
    CHECK(std::abs(-std::log(r.alpha) - delta * std::exp(a)) < 1e-10 * std::max(1.0, delta * std::exp(a)));
    CHECK(r.alpha > 0.0);
    CHECK(r.alpha < 1.0);
  }
}

TEST_CASE("head_step") {
  Eigen::VectorXd b(3), x(2);
  b << 1.0, 2.0, 3.0;
  x << -1.0, 0.5;
  const Eigen::MatrixXd h0 = Eigen::MatrixXd::Zero(3, 2);
  CHECK(bit_equal(head_step(h0, 0.9, b, x), (b * x.transpose()).eval()));
  const Eigen::MatrixXd h = Eigen::MatrixXd::Random(3, 2);
  CHECK(head_step(h, 0.5, Eigen::VectorXd::Zero(3).eval(), x).isApprox(0.5 * h, 0.0));
  CHECK(head_step(h, 0.5, b, Eigen::VectorXd::Zero(2).eval()).isApprox(0.5 * h, 0.0));
}

namespace {

template <typename S>
struct HeadStream {
  std::vector<S> alphas;
  Matrix<S> b_bars, xs;
};

template <typename S>
HeadStream<S> random_head_stream(std::size_t n, std::size_t p, std::size_t t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ua(0.5, 0.999), uv(-1.0, 1.0);
  HeadStream<S> s;
  s.b_bars.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(t));
  s.xs.resize(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(t));
  for (std::size_t i = 0; i < t; ++i) s.alphas.push_back(static_cast<S>(ua(rng)));
  for (auto& e : s.b_bars.reshaped()) e = static_cast<S>(uv(rng));
  for (auto& e : s.xs.reshaped()) e = static_cast<S>(uv(rng));
  return s;
}

}  // namespace

TEST_CASE("weighted_sum_oracle") {
  const auto s = random_head_stream<double>(4, 3, 64, 9);
  const std::span<const double> a(s.alphas);
  CHECK(weighted_sum_oracle(a, s.b_bars, s.xs, 1).isApprox(s.b_bars.col(0) * s.xs.col(0).transpose(), 1e-15));
  CHECK(weighted_sum_oracle(a, s.b_bars, s.xs, 0).isZero(0.0));

  const std::vector<double> ones(64, 1.0);
  Eigen::MatrixXd prefix = Eigen::MatrixXd::Zero(4, 3);
  for (int i = 0; i < 10; ++i) prefix += s.b_bars.col(i) * s.xs.col(i).transpose();
  CHECK(max_abs_diff(weighted_sum_oracle(std::span<const double>(ones), s.b_bars, s.xs, 10), prefix) < 1e-14);

  CHECK_THROWS_AS(weighted_sum_oracle(a, s.b_bars, s.xs, 65), UsageError);

  SUBCASE("iterated head_step agrees, 32-bit") {
    const auto f = random_head_stream<float>(16, 8, 64, 21);
    Matrix<float> h = Matrix<float>::Zero(16, 8);
    for (int t = 0; t < 64; ++t) head_step_inplace(h, f.alphas[t], f.b_bars.col(t), f.xs.col(t));
    CHECK(max_abs_diff(h, weighted_sum_oracle(std::span<const float>(f.alphas), f.b_bars, f.xs, 64)) < 1e-4);
  }
}

TEST_CASE("cumulative_decay") {
  const std::vector<double> half(20, 0.5);
  const std::span<const double> s(half);
  CHECK(cumulative_decay(s, 3, 3) == doctest::Approx(0.5));
  CHECK(cumulative_decay(s, 1, 10) == doctest::Approx(std::pow(2.0, -10)).epsilon(1e-15));
  CHECK_THROWS_AS(cumulative_decay(s, 5, 4), UsageError);
  CHECK_THROWS_AS(cumulative_decay(s, 0, 4), UsageError);

  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> ua(0.2, 1.0);
  std::vector<double> a(200);
  for (auto& e : a) e = ua(rng);
  const std::span<const double> sa(a);
  double prev = 1.0;
  for (std::size_t t = 5; t <= 200; ++t) {
    double direct = 1.0;
    for (std::size_t j = 5; j <= t; ++j) direct *= a[j - 1];
    const double got = cumulative_decay(sa, 5, t);
    CHECK(std::abs(got - direct) / direct < 1e-10);
    CHECK(got <= prev);
    CHECK(got > 0.0);
    prev = got;
  }
}

TEST_CASE("head_output") {
  const int n = 4, p = 3, d = 5;
  std::mt19937_64 rng(23);
  std::normal_distribution<double> nd;
  auto rnd = [&](Eigen::Index r, Eigen::Index c) {
    Eigen::MatrixXd m(r, c);
    for (auto& e : m.reshaped()) e = nd(rng);
    return m;
  };
  const Eigen::MatrixXd wg = rnd(d, p), wo = rnd(p, d);
  const Eigen::VectorXd nw = Eigen::VectorXd(rnd(p, 1));
  const Eigen::RowVectorXd u = rnd(1, d);
  const Eigen::VectorXd x = Eigen::VectorXd(rnd(p, 1));
  const Eigen::VectorXd c = Eigen::VectorXd(rnd(n, 1));

  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(n, p);
  const Eigen::VectorXd d0 = Eigen::VectorXd::Zero(p);
  CHECK(head_readout(zero, c, d0, x).isZero(0.0));
  CHECK(head_output(zero, c, d0, x, u, wg, nw, wo).isZero(0.0));

  const Eigen::MatrixXd h = rnd(n, p);
  Eigen::VectorXd e2 = Eigen::VectorXd::Zero(n);
  e2(2) = 1.0;
  CHECK(head_readout(h, e2, d0, x).isApprox(h.row(2).transpose(), 0.0));

  SUBCASE("dense reimplementation") {
    const Eigen::VectorXd dsk = Eigen::VectorXd(rnd(p, 1));
    std::vector<double> g(p);
    for (int j = 0; j < p; ++j) {
      double o = dsk(j) * x(j);
      for (int i = 0; i < n; ++i) o += c(i) * h(i, j);
      double z = 0.0;
      for (int i = 0; i < d; ++i) z += u(i) * wg(i, j);
      g[j] = o * z / (1.0 + std::exp(-z));
    }
    double ms = 0.0;
    for (double v : g) ms += v * v;
    const double scale = 1.0 / std::sqrt(ms / p + 1e-5);
    const Eigen::RowVectorXd got = head_output(h, c, dsk, x, u, wg, nw, wo);
    for (int k = 0; k < d; ++k) {
      double want = 0.0;
      for (int j = 0; j < p; ++j) want += g[j] * scale * nw(j) * wo(j, k);
      CHECK(std::abs(got(k) - want) < 1e-5);
    }
  }
}

TEST_CASE("model matches the loop-only reference implementation") {
  for (auto scope : {GatedNormScope::kPerHead, GatedNormScope::kLayer}) {
    ModelConfig cfg = tiny_config(2, 16, 2, 4, 8);
    cfg.gated_norm_scope = scope;
    const auto mp = random_model<double>(cfg, 31);
    const auto toks = random_tokens(24, 4);
    StreamState<double> st = make_stream_state(mp);
    ForwardOptions<double> opt;
    opt.chunk_size = 8;
    const Matrix<double> got = forward_sequence<double>(mp, st, toks, {}, opt);
    const auto want = sclab::testing::reference_forward(mp, toks);
    double worst = 0.0;
    for (std::size_t t = 0; t < toks.size(); ++t) {
      for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
        worst = std::max(worst, std::abs(got(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v)) - want[t][v]));
      }
    }
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("model_step") {
  const auto cfg = tiny_config();
  const auto mp = random_model<double>(cfg, 1);
  auto a = make_stream_state(mp), b = make_stream_state(mp);
  CHECK(bit_equal(model_step(mp, a, 65, {}), model_step(mp, b, 65, {})));
  CHECK(a.position == 1);
  CHECK_THROWS_AS(model_step(mp, a, 257, {}), DataError);

  SUBCASE("zero layers") {
    auto c0 = cfg;
    c0.num_layers = 0;
    const auto m0 = random_model<double>(c0, 2);
    auto s0 = make_stream_state(m0);
    const RowVector<double> got = model_step(m0, s0, 10, {});
    const Eigen::VectorXd e = m0.embedding.row(10).transpose();
    const Eigen::RowVectorXd want = (rms_normalize(e, m0.final_norm).transpose() * m0.embedding.transpose()).eval();
    CHECK(max_abs_diff(got, want) < 1e-14);
  }

  SUBCASE("step by step equals forward_sequence") {
    const auto toks = random_tokens(64, 8);
    auto s1 = make_stream_state(mp), s2 = make_stream_state(mp);
    Matrix<double> step(64, 257);
    for (int t = 0; t < 64; ++t) step.row(t) = model_step(mp, s1, toks[t], {});
    ForwardOptions<double> opt;
    opt.chunk_size = 1;
    const Matrix<double> seq = forward_sequence<double>(mp, s2, toks, {}, opt);
    CHECK(bit_equal(step, seq));
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      for (std::size_t h = 0; h < cfg.num_heads; ++h) CHECK(bit_equal(s1.layers[l].h[h], s2.layers[l].h[h]));
    }
  }

  SUBCASE("length-1 input") {
    auto s1 = make_stream_state(mp), s2 = make_stream_state(mp);
    const std::vector<TokenId> one = {42};
    const Matrix<double> seq = forward_sequence<double>(mp, s1, one, {});
    CHECK(seq.rows() == 1);
    CHECK(bit_equal(seq.row(0), model_step(mp, s2, 42, {})));
  }
}

TEST_CASE("chunk invariance and carry-over") {
  const auto cfg = tiny_config();
  const auto toks = random_tokens(200, 12);
  const auto md = random_model<double>(cfg, 5);
  const auto mf = random_model<float>(cfg, 5);
  auto run = [&]<typename S>(const ModelParams<S>& mp, std::size_t chunk) {
    auto st = make_stream_state(mp);
    ForwardOptions<S> opt;
    opt.chunk_size = chunk;
    return forward_sequence<S>(mp, st, toks, MitigationConfig{}, opt);
  };
  const auto d1 = run(md, 1);
  const auto f1 = run(mf, 1);
  for (std::size_t chunk : {16, 64}) {
    CHECK(max_abs_diff(d1, run(md, chunk)) < 1e-9);
    CHECK(max_abs_diff(f1, run(mf, chunk)) < 1e-4);
  }

  for (std::size_t chunk : {1, 16, 64}) {
    auto whole = make_stream_state(md), split = make_stream_state(md);
    ForwardOptions<double> opt;
    opt.chunk_size = chunk;
    const Matrix<double> all = forward_sequence<double>(md, whole, toks, {}, opt);
    const std::span<const TokenId> s(toks);
    const Matrix<double> first = forward_sequence<double>(md, split, s.first(77), {}, opt);
    const Matrix<double> second = forward_sequence<double>(md, split, s.subspan(77), {}, opt);
    Matrix<double> joined(200, 257);
    joined << first, second;
    if (chunk == 1) {
      CHECK(bit_equal(all, joined));
    } else {
      CHECK(max_abs_diff(all, joined) < 1e-9);
    }
  }
}

TEST_CASE("step activations stay in range") {
  const auto mp = random_model<double>(tiny_config(), 8);
  StepProbe<double> probe;
  std::size_t seen = 0;
  bool ok = true;
  probe.on_head = [&](const HeadActivations<double>& a) {
    ++seen;
    ok = ok && a.delta > 0.0 && a.alpha > 0.0 && a.alpha < 1.0 && a.b_bar.allFinite() && a.x.allFinite();
  };
  for (std::size_t chunk : {1, 32}) {
    auto st = make_stream_state(mp);
    ForwardOptions<double> opt;
    opt.chunk_size = chunk;
    opt.probe = &probe;
    const auto toks = random_tokens(128, 3);
    forward_sequence<double>(mp, st, toks, {}, opt);
  }
  CHECK(ok);
  CHECK(seen == 2 * 128 * 2 * 4);  // runs x tokens x layers x heads
}

TEST_CASE("zero state with zero skip gives zero output") {
  Eigen::VectorXd c = Eigen::VectorXd::Random(16), x = Eigen::VectorXd::Random(8);
  CHECK(head_readout(Eigen::MatrixXd::Zero(16, 8).eval(), c, Eigen::VectorXd::Zero(8).eval(), x).isZero(0.0));
}

TEST_CASE("non-finite states are reported with their location") {
  auto mp = random_model<double>(tiny_config(1), 4);
  mp.layers[0].conv_x_bias.setConstant(std::numeric_limits<double>::infinity());
  auto st = make_stream_state(mp);
  const auto toks = random_tokens(8, 1);
  try {
    forward_sequence<double>(mp, st, toks, {});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.layer() == 0);
    CHECK(e.position() >= 1);
    CHECK(e.position() <= 8);
  }
  auto st2 = make_stream_state(mp);
  ForwardOptions<double> opt;
  opt.allow_nonfinite = true;
  CHECK_NOTHROW(forward_sequence<double>(mp, st2, toks, {}, opt));
}
