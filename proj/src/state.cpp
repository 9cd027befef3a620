// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "sclab/state.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

namespace sclab {
namespace {

static_assert(std::endian::native == std::endian::little,
              "binary stream-state blobs assume a little-endian host");

constexpr char kMagic[4] = {'S', 'C', 'S', 'S'};

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("stream state: truncated blob");
  return v;
}

template <typename M>
void put_matrix(std::ostream& os, const M& m) {
  put<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
  put<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(typename M::Scalar) * m.size()));
}

template <typename M>
void get_matrix(std::istream& is, M& m, Eigen::Index rows, Eigen::Index cols) {
  const auto r = get<std::uint64_t>(is);
  const auto c = get<std::uint64_t>(is);
  if (static_cast<Eigen::Index>(r) != rows || static_cast<Eigen::Index>(c) != cols) {
    throw DataError("stream state: matrix shape does not match the model");
  }
  m.resize(rows, cols);
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(typename M::Scalar) * m.size()));
  if (!is) throw DataError("stream state: truncated blob");
}

}  // namespace

template <typename S>
StreamState<S> make_stream_state(const ModelParams<S>& params, const MitigationConfig& mitigation) {
  const auto& c = params.config;
  const auto n = static_cast<Eigen::Index>(c.state_dim);
  const auto p = static_cast<Eigen::Index>(c.head_dim);
  const auto hp = static_cast<Eigen::Index>(c.inner_dim());
  const auto tail = static_cast<Eigen::Index>(c.conv_tail_len());

  StreamState<S> st;
  st.layers.resize(c.num_layers);
  for (auto& l : st.layers) {
    l.h.assign(c.num_heads, Matrix<S>::Zero(n, p));
    l.tail_x = Matrix<S>::Zero(tail, hp);
    l.tail_b = Matrix<S>::Zero(tail, n);
    l.tail_c = Matrix<S>::Zero(tail, n);
    l.log_decay = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.num_heads));
  }
  if (mitigation.window_active()) {
    const std::size_t r = mitigation.window_size;
    WindowState<S> w;
    w.window = r;
    w.token_ring.assign(r, 0);
    w.layers.resize(c.num_layers);
    for (std::size_t i = 0; i < c.num_layers; ++i) {
      auto& wl = w.layers[i];
      wl.h_lag.assign(c.num_heads, Matrix<S>::Zero(n, p));
      wl.tail_x = Matrix<S>::Zero(tail, hp);
      wl.tail_b = Matrix<S>::Zero(tail, n);
      wl.tail_c = Matrix<S>::Zero(tail, n);
      wl.delta_acc.assign(c.num_heads, CompensatedSum{});
      if (i > 0) {
        wl.input_ring = Matrix<S>::Zero(static_cast<Eigen::Index>(r),
                                        static_cast<Eigen::Index>(c.hidden_dim));
      }
    }
    st.window = std::move(w);
  }
  return st;
}

template <typename S>
Matrix<S> window_read(const ModelParams<S>& params, const StreamState<S>& state,
                      std::size_t layer, std::size_t head) {
  const Matrix<S>& lead = state.layers.at(layer).h.at(head);
  if (!state.window || !state.window->lag_active()) return lead;
  const auto& wl = state.window->layers.at(layer);
  return window_read<S>(lead, wl.h_lag.at(head), wl.delta_acc.at(head).value(),
                        static_cast<double>(params.layers.at(layer).a_log(static_cast<Eigen::Index>(head))));
}

template <typename S>
void save_stream_state(std::ostream& os, const StreamState<S>& st) {
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kStreamStateVersion);
  put<std::uint32_t>(os, sizeof(S));
  put<std::uint64_t>(os, st.position);
  put<std::uint64_t>(os, st.layers.size());
  for (const auto& l : st.layers) {
    put<std::uint64_t>(os, l.h.size());
    for (const auto& h : l.h) put_matrix(os, h);
    put_matrix(os, l.tail_x);
    put_matrix(os, l.tail_b);
    put_matrix(os, l.tail_c);
    put_matrix(os, l.log_decay);
  }
  put<std::uint8_t>(os, st.window ? 1 : 0);
  if (st.window) {
    const auto& w = *st.window;
    put<std::uint64_t>(os, w.window);
    put<std::uint64_t>(os, w.position);
    os.write(reinterpret_cast<const char*>(w.token_ring.data()),
             static_cast<std::streamsize>(sizeof(TokenId) * w.token_ring.size()));
    for (const auto& wl : w.layers) {
      for (const auto& h : wl.h_lag) put_matrix(os, h);
      put_matrix(os, wl.tail_x);
      put_matrix(os, wl.tail_b);
      put_matrix(os, wl.tail_c);
      for (const auto& acc : wl.delta_acc) {
        put<double>(os, acc.sum);
        put<double>(os, acc.comp);
      }
      put_matrix(os, wl.input_ring);
    }
  }
  if (!os) throw DataError("stream state: write failed");
}

template <typename S>
StreamState<S> load_stream_state(std::istream& is, const ModelParams<S>& params) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw DataError("stream state: bad magic");
  const auto version = get<std::uint32_t>(is);
  if (version != kStreamStateVersion) {
    throw DataError("stream state: unsupported version " + std::to_string(version));
  }
  if (get<std::uint32_t>(is) != sizeof(S)) throw DataError("stream state: precision mismatch");

  const auto& c = params.config;
  const auto n = static_cast<Eigen::Index>(c.state_dim);
  const auto p = static_cast<Eigen::Index>(c.head_dim);
  const auto hp = static_cast<Eigen::Index>(c.inner_dim());
  const auto tail = static_cast<Eigen::Index>(c.conv_tail_len());
  const auto heads = static_cast<Eigen::Index>(c.num_heads);

  StreamState<S> st;
  st.position = get<std::uint64_t>(is);
  if (get<std::uint64_t>(is) != c.num_layers) throw DataError("stream state: layer count mismatch");
  st.layers.resize(c.num_layers);
  for (auto& l : st.layers) {
    if (get<std::uint64_t>(is) != c.num_heads) throw DataError("stream state: head count mismatch");
    l.h.resize(c.num_heads);
    for (auto& h : l.h) get_matrix(is, h, n, p);
    get_matrix(is, l.tail_x, tail, hp);
    get_matrix(is, l.tail_b, tail, n);
    get_matrix(is, l.tail_c, tail, n);
    get_matrix(is, l.log_decay, heads, 1);
  }
  if (get<std::uint8_t>(is)) {
    WindowState<S> w;
    w.window = get<std::uint64_t>(is);
    w.position = get<std::uint64_t>(is);
    if (w.position != st.position) throw DataError("stream state: window position mismatch");
    w.token_ring.resize(w.window);
    is.read(reinterpret_cast<char*>(w.token_ring.data()),
            static_cast<std::streamsize>(sizeof(TokenId) * w.window));
    w.layers.resize(c.num_layers);
    for (std::size_t i = 0; i < c.num_layers; ++i) {
      auto& wl = w.layers[i];
      wl.h_lag.resize(c.num_heads);
      for (auto& h : wl.h_lag) get_matrix(is, h, n, p);
      get_matrix(is, wl.tail_x, tail, hp);
      get_matrix(is, wl.tail_b, tail, n);
      get_matrix(is, wl.tail_c, tail, n);
      wl.delta_acc.resize(c.num_heads);
      for (auto& acc : wl.delta_acc) {
        acc.sum = get<double>(is);
        acc.comp = get<double>(is);
      }
      const Eigen::Index ring_rows = i > 0 ? static_cast<Eigen::Index>(w.window) : 0;
      const Eigen::Index ring_cols = i > 0 ? static_cast<Eigen::Index>(c.hidden_dim) : 0;
      get_matrix(is, wl.input_ring, ring_rows, ring_cols);
    }
    st.window = std::move(w);
  }
  return st;
}

template StreamState<float> make_stream_state(const ModelParams<float>&, const MitigationConfig&);
template StreamState<double> make_stream_state(const ModelParams<double>&, const MitigationConfig&);
template Matrix<float> window_read(const ModelParams<float>&, const StreamState<float>&,
                                   std::size_t, std::size_t);
template Matrix<double> window_read(const ModelParams<double>&, const StreamState<double>&,
                                    std::size_t, std::size_t);
template void save_stream_state(std::ostream&, const StreamState<float>&);
template void save_stream_state(std::ostream&, const StreamState<double>&);
template StreamState<float> load_stream_state(std::istream&, const ModelParams<float>&);
template StreamState<double> load_stream_state(std::istream&, const ModelParams<double>&);

}  // namespace sclab
