// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include <doctest.h>

#include "sclab/model.hpp"
#include "sclab/model_io.hpp"
#include "support/test_util.hpp"

using namespace sclab;
using sclab::testing::bit_equal;
using sclab::testing::max_abs_diff;
using sclab::testing::random_tokens;
using sclab::testing::tiny_config;

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "sclab_test_model_io";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<double> flat_row_major(const Eigen::MatrixXd& m) {
  std::vector<double> out;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out.push_back(m(i, j));
  }
  return out;
}

// Writes `mp` in the fused layout published checkpoints use. D must be
// constant within each head.
void write_fused(const fs::path& path, const ModelParams<double>& mp, DType dtype, bool with_lm_head) {
  const auto& c = mp.config;
  const auto hp = static_cast<Eigen::Index>(c.inner_dim()), n = static_cast<Eigen::Index>(c.state_dim);
  const auto h = static_cast<Eigen::Index>(c.num_heads), d = static_cast<Eigen::Index>(c.hidden_dim);
  const auto k = static_cast<Eigen::Index>(c.conv_kernel);
  std::vector<NamedTensor> ts;
  auto add = [&](const std::string& name, std::vector<std::size_t> shape, std::vector<double> v) {
    ts.push_back({name, dtype, std::move(shape), std::move(v)});
  };
  add("backbone.embeddings.weight", {c.vocab_size, c.hidden_dim}, flat_row_major(mp.embedding));
  if (with_lm_head) add("lm_head.weight", {c.vocab_size, c.hidden_dim}, flat_row_major(mp.embedding));
  add("backbone.norm_f.weight", {c.hidden_dim}, flat_row_major(mp.final_norm));
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const auto& lp = mp.layers[l];
    const std::string pre = "backbone.layers." + std::to_string(l) + ".";
    Eigen::MatrixXd proj(2 * hp + 2 * n + h, d);
    proj << lp.w_gate.transpose(), lp.w_x.transpose(), lp.w_b.transpose(), lp.w_c.transpose(),
        lp.w_delta.transpose();
    Eigen::MatrixXd conv(hp + 2 * n, k);
    conv << lp.conv_x.transpose(), lp.conv_b.transpose(), lp.conv_c.transpose();
    Eigen::RowVectorXd bias(hp + 2 * n);
    bias << lp.conv_x_bias, lp.conv_b_bias, lp.conv_c_bias;
    Eigen::VectorXd dh(h);
    for (Eigen::Index i = 0; i < h; ++i) dh(i) = lp.d_skip(i * static_cast<Eigen::Index>(c.head_dim));
    add(pre + "norm.weight", {c.hidden_dim}, flat_row_major(lp.in_norm));
    add(pre + "mixer.in_proj.weight", {static_cast<std::size_t>(proj.rows()), c.hidden_dim}, flat_row_major(proj));
    add(pre + "mixer.conv1d.weight", {static_cast<std::size_t>(conv.rows()), 1, c.conv_kernel}, flat_row_major(conv));
    add(pre + "mixer.conv1d.bias", {static_cast<std::size_t>(bias.size())}, flat_row_major(bias));
    add(pre + "mixer.dt_bias", {c.num_heads}, flat_row_major(lp.b_delta));
    add(pre + "mixer.A_log", {c.num_heads}, flat_row_major(lp.a_log));
    add(pre + "mixer.D", {c.num_heads}, flat_row_major(dh));
    add(pre + "mixer.norm.weight", {c.inner_dim()}, flat_row_major(lp.gate_norm));
    add(pre + "mixer.out_proj.weight", {c.hidden_dim, c.inner_dim()}, flat_row_major(lp.w_out.transpose()));
  }
  write_safetensors(path, ts, {{"format", "pt"}});
}

}  // namespace

TEST_CASE("native checkpoints round-trip bit for bit") {
  auto cfg = tiny_config();
  cfg.train_len = 4096;
  cfg.conv_alignment = ConvAlignment::kShifted;
  const auto md = random_model<double>(cfg, 77);
  const fs::path p64 = scratch("rt64.safetensors");
  save_checkpoint(p64, md);
  const auto man = open_checkpoint(p64);
  CHECK(man.profile_id == "native-v1");
  const ModelConfig got_cfg = infer_config(man);
  CHECK(got_cfg == cfg);
  const auto loaded = load_checkpoint(man, got_cfg);
  CHECK(loaded.warnings.empty());
  CHECK(loaded.params.embedding == md.embedding);
  CHECK(loaded.params.final_norm == md.final_norm);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) CHECK(loaded.params.layers[l] == md.layers[l]);

  const auto mf = random_model<float>(cfg, 77);
  const fs::path p32 = scratch("rt32.safetensors");
  save_checkpoint(p32, mf);
  const auto lf = load_checkpoint(open_checkpoint(p32), cfg);
  CHECK(lf.params.embedding.cast<float>() == mf.embedding);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) CHECK(lf.params.layers[l].cast<float>() == mf.layers[l]);
  CHECK(open_checkpoint(p32).header.tensors.at("embedding").dtype == DType::kF32);
}

TEST_CASE("shape mismatches name the tensor") {
  const auto cfg = tiny_config(1);
  const auto mp = random_model<double>(cfg, 3);
  const fs::path p = scratch("ok.safetensors");
  save_checkpoint(p, mp);
  const auto man = open_checkpoint(p);
  auto bad = man;
  bad.header.tensors.at("layers.0.w_delta").shape = {cfg.hidden_dim, cfg.num_heads + 1};
  try {
    load_checkpoint(bad, cfg);
    FAIL("expected ShapeMismatch");
  } catch (const ShapeMismatch& e) {
    CHECK(e.tensor() == "layers.0.w_delta");
    CHECK(std::string(e.what()).find("layers.0.w_delta") != std::string::npos);
  }
  auto wider = cfg;
  wider.state_dim = 8;
  CHECK_THROWS_AS(load_checkpoint(man, wider), ShapeMismatch);
  auto deeper = cfg;
  deeper.num_layers = 2;
  CHECK_THROWS_AS(load_checkpoint(man, deeper), DataError);
  auto shallower = tiny_config(1);
  const auto two = random_model<double>(tiny_config(2), 3);
  save_checkpoint(scratch("two.safetensors"), two);
  CHECK_THROWS_AS(load_checkpoint(open_checkpoint(scratch("two.safetensors")), shallower), DataError);
}

TEST_CASE("safetensors container") {
  const fs::path p = scratch("dtypes.safetensors");
  const std::vector<double> vals = {1.0, -2.5, 0.15625, 65504.0};
  write_safetensors(p,
                    {{"a16", DType::kF16, {4}, vals},
                     {"b16", DType::kBF16, {2, 2}, vals},
                     {"f32", DType::kF32, {4}, vals},
                     {"f64", DType::kF64, {1, 4}, vals}},
                    {{"note", "x"}});
  const auto hdr = read_safetensors_header(p);
  CHECK(hdr.data_offset % 8 == 0);
  CHECK(hdr.metadata.at("note") == "x");
  CHECK(read_tensor_values(p, hdr, "a16") == vals);
  CHECK(read_tensor_values(p, hdr, "f32") == vals);
  CHECK(read_tensor_values(p, hdr, "f64") == vals);
  const auto b = read_tensor_values(p, hdr, "b16");
  CHECK(b[0] == 1.0);
  CHECK(b[1] == -2.5);
  CHECK(b[3] == doctest::Approx(65504.0).epsilon(1e-2));
  CHECK_THROWS_AS(parse_dtype("I8"), DataError);

  // Corrupt header length.
  const fs::path junk = scratch("junk.safetensors");
  {
    std::ofstream os(junk, std::ios::binary);
    const std::uint64_t len = 1u << 30;
    os.write(reinterpret_cast<const char*>(&len), 8);
    os << "{}";
  }
  CHECK_THROWS_AS(read_safetensors_header(junk), DataError);
  CHECK_THROWS_AS(read_safetensors_header(scratch("missing.safetensors")), DataError);
  CHECK_THROWS_AS(open_checkpoint(p), DataError);  // no known layout
}

TEST_CASE("fused checkpoints load and reproduce the native model") {
  auto cfg = tiny_config(2, 16, 4, 8, 16);
  cfg.gated_norm_scope = GatedNormScope::kLayer;
  auto mp = random_model<double>(cfg, 12);
  for (auto& lp : mp.layers) {
    for (Eigen::Index i = 0; i < lp.d_skip.size(); ++i) lp.d_skip(i) = 0.5 + static_cast<double>(i / 8);
  }
  const fs::path p = scratch("fused.safetensors");
  write_fused(p, mp, DType::kF64, true);
  const auto man = open_checkpoint(p);
  CHECK(man.profile_id == "mamba2-ssm-v1");
  auto inferred = infer_config(man);
  CHECK(inferred.num_heads == 4);
  CHECK(inferred.head_dim == 8);
  CHECK(inferred.state_dim == 16);
  CHECK(inferred.gated_norm_scope == GatedNormScope::kLayer);
  CHECK_THROWS_AS(check_official_shapes(inferred), DataError);
  inferred.train_len = cfg.train_len;
  const auto loaded = load_checkpoint(man, inferred);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) CHECK(loaded.params.layers[l] == mp.layers[l]);

  const auto toks = random_tokens(32, 2);
  auto s1 = make_stream_state(mp), s2 = make_stream_state(loaded.params);
  CHECK(bit_equal(forward_sequence<double>(mp, s1, toks, {}),
                  forward_sequence<double>(loaded.params, s2, toks, {})));

  SUBCASE("untied output head is refused") {
    const fs::path q = scratch("untied.safetensors");
    write_fused(q, mp, DType::kF32, false);
    CHECK_NOTHROW(load_checkpoint(open_checkpoint(q), inferred));
    std::vector<NamedTensor> ts;
    const auto hdr = read_safetensors_header(q);
    for (const auto& [name, info] : hdr.tensors) {
      ts.push_back({name, info.dtype, info.shape, read_tensor_values(q, hdr, name)});
    }
    auto lm = ts.front();
    for (const auto& t : ts) {
      if (t.name == "backbone.embeddings.weight") lm = t;
    }
    lm.name = "lm_head.weight";
    lm.values[0] += 1.0;
    ts.push_back(lm);
    write_safetensors(q, ts, {});
    CHECK_THROWS_AS(load_checkpoint(open_checkpoint(q), inferred), DataError);
  }

  SUBCASE("unknown tensors become warnings") {
    auto hdr = read_safetensors_header(p);
    std::vector<NamedTensor> ts;
    for (const auto& [name, info] : hdr.tensors) {
      ts.push_back({name, info.dtype, info.shape, read_tensor_values(p, hdr, name)});
    }
    ts.push_back({"backbone.layers.0.mixer.extra", DType::kF32, {2}, {1.0, 2.0}});
    const fs::path q = scratch("extra.safetensors");
    write_safetensors(q, ts, {});
    const auto res = load_checkpoint(open_checkpoint(q), inferred);
    REQUIRE(res.warnings.size() == 1);
    CHECK(res.warnings[0].find("backbone.layers.0.mixer.extra") != std::string::npos);
  }
}

TEST_CASE("official shapes") {
  ModelConfig c;
  c.num_layers = 24;
  c.hidden_dim = 768;
  c.head_dim = 64;
  c.state_dim = 128;
  c.num_heads = 24;
  c.vocab_size = 50280;
  CHECK_NOTHROW(check_official_shapes(c));
  CHECK_NOTHROW(validate(c));
  c.num_heads = 12;
  CHECK_THROWS_AS(check_official_shapes(c), DataError);
}

TEST_CASE("state_size") {
  auto official = [](std::size_t layers, std::size_t d) {
    ModelConfig c;
    c.num_layers = layers;
    c.hidden_dim = d;
    c.head_dim = 64;
    c.state_dim = 128;
    c.num_heads = 2 * d / 64;
    return c;
  };
  CHECK(state_size(official(24, 768)) == 4718592u);
  CHECK(state_size(official(48, 1024)) == 12582912u);
  CHECK(layer_state_size(official(48, 1536)) == 256u * 1536u);
  ModelConfig one = tiny_config(1, 4, 1, 1, 1);
  CHECK(state_size(one) == 1u);

  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> pick(1, 9);
  for (int i = 0; i < 50; ++i) {
    ModelConfig c = tiny_config(pick(rng), 8, pick(rng), pick(rng), pick(rng));
    const auto base = state_size(c);
    for (auto field : {&ModelConfig::num_layers, &ModelConfig::num_heads, &ModelConfig::head_dim,
                       &ModelConfig::state_dim}) {
      ModelConfig twice = c;
      twice.*field *= 3;
      CHECK(state_size(twice) == 3 * base);
    }
  }
}

TEST_CASE("byte tokenizer") {
  const auto tok = Tokenizer::bytes();
  std::string all;
  for (int b = 0; b < 256; ++b) all.push_back(static_cast<char>(b));
  CHECK(tok.decode(tok.encode(all)) == all);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    std::string s(static_cast<std::size_t>(rng() % 100), '\0');
    for (auto& ch : s) ch = static_cast<char>(rng() & 0xff);
    CHECK(tok.decode(tok.encode(s)) == s);
  }
  CHECK(tok.encode("\n") == std::vector<TokenId>{10});
  CHECK(tok.newline_id() == 10);
  CHECK(tok.encode("a", true) == std::vector<TokenId>{97, kByteEos});
  CHECK(tok.encode("a", false).size() == 1);
  CHECK_THROWS_AS(tok.check_ids({300}), DataError);
  CHECK_THROWS_AS(tok.decode({257}), DataError);
  CHECK_THROWS_AS(Tokenizer::bytes(256), UsageError);

  const auto ext = Tokenizer::external(50280, 187);
  CHECK_THROWS_AS(ext.encode("hello"), UsageError);
  CHECK(ext.newline_id() == 187);
  CHECK_THROWS_AS(Tokenizer::external(100).newline_id(), UsageError);
}

TEST_CASE("token id files") {
  const std::vector<TokenId> ids = {0, 1, 187, 50279, 4000000000u};
  write_token_ids(scratch("ids.bin"), ids);
  write_token_ids(scratch("ids.txt"), ids);
  CHECK(read_token_ids(scratch("ids.bin")) == ids);
  CHECK(read_token_ids(scratch("ids.txt")) == ids);
  CHECK(fs::file_size(scratch("ids.bin")) == 4 * ids.size());
  {
    std::ofstream os(scratch("bad.txt"));
    os << "12\nabc\n";
  }
  CHECK_THROWS_AS(read_token_ids(scratch("bad.txt")), DataError);
}

TEST_CASE("random_model") {
  const auto cfg = tiny_config(2, 32, 4, 8, 16);
  const auto a = random_model<double>(cfg, 1), b = random_model<double>(cfg, 1),
             c = random_model<double>(cfg, 2);
  CHECK(a.embedding == b.embedding);
  for (std::size_t l = 0; l < 2; ++l) CHECK(a.layers[l] == b.layers[l]);
  CHECK(a.embedding != c.embedding);
  auto st = make_stream_state(a);
  ForwardOptions<double> opt;
  StepProbe<double> probe;
  bool finite = true;
  probe.on_layer_input = [&](std::size_t, std::size_t, const RowVector<double>& u) { finite = finite && u.allFinite(); };
  probe.on_head = [&](const HeadActivations<double>& h) { finite = finite && h.x.allFinite() && h.b_bar.allFinite(); };
  opt.probe = &probe;
  const auto logits = forward_sequence<double>(a, st, random_tokens(128, 6), {}, opt);
  CHECK(logits.allFinite());
  CHECK(finite);
  const auto f = random_model<float>(cfg, 1);
  CHECK(f.embedding == a.embedding.cast<float>());
}

TEST_CASE("random model specs") {
  const auto s = parse_random_spec("random:L=3,d=32,N=8,seed=9");
  CHECK(s.config.num_layers == 3);
  CHECK(s.config.hidden_dim == 32);
  CHECK(s.config.head_dim == 16);
  CHECK(s.config.num_heads == 4);
  CHECK(s.config.state_dim == 8);
  CHECK(s.seed == 9u);
  CHECK(is_random_spec("random:L=1,d=8"));
  CHECK_FALSE(is_random_spec("model.safetensors"));
  CHECK_THROWS_AS(parse_random_spec("random:L=2,q=4"), UsageError);
}
