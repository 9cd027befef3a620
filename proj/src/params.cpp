// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "sclab/params.hpp"

#include <string>

namespace sclab {
namespace {

std::string dims(Eigen::Index r, Eigen::Index c) {
  return "[" + std::to_string(r) + ", " + std::to_string(c) + "]";
}

template <typename M>
void expect(const M& m, std::size_t rows, std::size_t cols, const std::string& name) {
  if (m.rows() != static_cast<Eigen::Index>(rows) || m.cols() != static_cast<Eigen::Index>(cols)) {
    throw ShapeMismatch(name, "tensor '" + name + "' has shape " + dims(m.rows(), m.cols()) +
                                  ", expected " + dims(static_cast<Eigen::Index>(rows),
                                                       static_cast<Eigen::Index>(cols)));
  }
}

}  // namespace

template <typename S>
void check_shapes(const ModelParams<S>& p) {
  const auto& c = p.config;
  validate(c);
  const std::size_t d = c.hidden_dim, hp = c.inner_dim(), n = c.state_dim, h = c.num_heads,
                    k = c.conv_kernel;
  expect(p.embedding, c.vocab_size, d, "embedding");
  expect(p.final_norm, d, 1, "final_norm");
  if (p.layers.size() != c.num_layers) {
    throw ShapeMismatch("layers", "expected " + std::to_string(c.num_layers) + " layers, got " +
                                      std::to_string(p.layers.size()));
  }
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    expect(l.in_norm, d, 1, pre + "in_norm");
    expect(l.w_gate, d, hp, pre + "w_gate");
    expect(l.w_x, d, hp, pre + "w_x");
    expect(l.w_b, d, n, pre + "w_b");
    expect(l.w_c, d, n, pre + "w_c");
    expect(l.w_delta, d, h, pre + "w_delta");
    expect(l.b_delta, h, 1, pre + "b_delta");
    expect(l.a_log, h, 1, pre + "a_log");
    expect(l.d_skip, hp, 1, pre + "d_skip");
    expect(l.conv_x, k, hp, pre + "conv_x");
    expect(l.conv_b, k, n, pre + "conv_b");
    expect(l.conv_c, k, n, pre + "conv_c");
    expect(l.conv_x_bias, 1, hp, pre + "conv_x_bias");
    expect(l.conv_b_bias, 1, n, pre + "conv_b_bias");
    expect(l.conv_c_bias, 1, n, pre + "conv_c_bias");
    expect(l.gate_norm, hp, 1, pre + "gate_norm");
    expect(l.w_out, hp, d, pre + "w_out");
  }
}

template <typename S>
ModelParams<S> zero_params(const ModelConfig& c) {
  validate(c);
  const auto d = static_cast<Eigen::Index>(c.hidden_dim);
  const auto hp = static_cast<Eigen::Index>(c.inner_dim());
  const auto n = static_cast<Eigen::Index>(c.state_dim);
  const auto h = static_cast<Eigen::Index>(c.num_heads);
  const auto k = static_cast<Eigen::Index>(c.conv_kernel);
  ModelParams<S> p;
  p.config = c;
  p.embedding = Matrix<S>::Zero(static_cast<Eigen::Index>(c.vocab_size), d);
  p.final_norm = Vector<S>::Ones(d);
  p.layers.resize(c.num_layers);
  for (auto& l : p.layers) {
    l.in_norm = Vector<S>::Ones(d);
    l.w_gate = Matrix<S>::Zero(d, hp);
    l.w_x = Matrix<S>::Zero(d, hp);
    l.w_b = Matrix<S>::Zero(d, n);
    l.w_c = Matrix<S>::Zero(d, n);
    l.w_delta = Matrix<S>::Zero(d, h);
    l.b_delta = Vector<S>::Zero(h);
    l.a_log = Vector<S>::Zero(h);
    l.d_skip = Vector<S>::Zero(hp);
    l.conv_x = Matrix<S>::Zero(k, hp);
    l.conv_b = Matrix<S>::Zero(k, n);
    l.conv_c = Matrix<S>::Zero(k, n);
    l.conv_x_bias = RowVector<S>::Zero(hp);
    l.conv_b_bias = RowVector<S>::Zero(n);
    l.conv_c_bias = RowVector<S>::Zero(n);
    l.gate_norm = Vector<S>::Ones(hp);
    l.w_out = Matrix<S>::Zero(hp, d);
  }
  return p;
}

template void check_shapes(const ModelParams<float>&);
template void check_shapes(const ModelParams<double>&);
template ModelParams<float> zero_params<float>(const ModelConfig&);
template ModelParams<double> zero_params<double>(const ModelConfig&);

}  // namespace sclab
