// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "sclab/cli.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sclab/diagnostics.hpp"
#include "sclab/harness.hpp"
#include "sclab/model.hpp"
#include "sclab/model_io.hpp"
#include "sclab/state.hpp"

namespace sclab {
namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

// Single list of (key, field) pairs drives both directions of the manifest.
template <typename F>
void for_each_field(RunConfig& c, F&& f) {
  f("command", c.command);
  f("model", c.model);
  f("profile", c.profile);
  f("seed", c.seed);
  f("precision", c.precision);
  f("chunk", c.chunk);
  f("train_len", c.train_len);
  f("allow_nonstandard_shapes", c.allow_nonstandard_shapes);
  f("tokenizer", c.tokenizer);
  f("newline_id", c.newline_id);
  f("eos_id", c.eos_id);
  f("mitigation", c.mitigation);
  f("delta_factor", c.delta_factor);
  f("decay_exponent", c.decay_exponent);
  f("insertion_scale", c.insertion_scale);
  f("norm_threshold", c.norm_threshold);
  f("calibration_len", c.calibration_len);
  f("window", c.window);
  f("prompt", c.prompt);
  f("len", c.len);
  f("tokens", c.tokens);
  f("text", c.text);
  f("trace_stride", c.trace_stride);
  f("smoothing", c.smoothing);
  f("multiplier", c.multiplier);
  f("outlier_threshold", c.outlier_threshold);
  f("lengths", c.lengths);
  f("positions", c.positions);
  f("samples", c.samples);
  f("index", c.index);
  f("key", c.key);
  f("max_new", c.max_new);
  f("threads", c.threads);
  f("points", c.points);
  f("law", c.law);
  f("state_unit", c.state_unit);
  f("length_unit", c.length_unit);
  f("save_state", c.save_state);
  f("load_state", c.load_state);
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
  if (!out) throw DataError("cannot write " + p.string());
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_run_dir(const fs::path& base, const std::string& command) {
  fs::create_directories(base);
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream stamp;
  stamp << command << '-' << std::put_time(&tm, "%Y%m%d-%H%M%S");
  for (int k = 0;; ++k) {
    const fs::path dir = base / (k == 0 ? stamp.str() : stamp.str() + "-" + std::to_string(k));
    std::error_code ec;
    if (fs::create_directory(dir, ec)) return dir;
    if (ec) throw DataError("cannot create run directory " + dir.string() + ": " + ec.message());
  }
}

// ---------------------------------------------------------------------------
// Model, tokenizer, mitigation
// ---------------------------------------------------------------------------

struct LoadedModel {
  ModelParams<double> params;
  std::string profile;
  std::vector<std::string> warnings;
};

LoadedModel load_model(const RunConfig& c) {
  LoadedModel out;
  if (is_random_spec(c.model)) {
    const RandomSpec spec = parse_random_spec(c.model);
    out.params = random_model<double>(spec.config, spec.seed.value_or(c.seed));
    out.profile = "random";
  } else {
    const CheckpointManifest m = open_checkpoint(c.model, c.profile);
    const ModelConfig cfg = infer_config(m);
    if (m.profile_id != "native-v1" && !c.allow_nonstandard_shapes) check_official_shapes(cfg);
    LoadResult r = load_checkpoint(m, cfg);
    out.params = std::move(r.params);
    out.warnings = std::move(r.warnings);
    out.profile = m.profile_id;
  }
  if (c.train_len) out.params.config.train_len = c.train_len;
  return out;
}

Tokenizer make_tokenizer(const RunConfig& c, std::size_t vocab) {
  std::optional<TokenId> nl, eos;
  if (c.newline_id >= 0) nl = static_cast<TokenId>(c.newline_id);
  if (c.eos_id >= 0) eos = static_cast<TokenId>(c.eos_id);
  if (c.tokenizer == "byte") {
    if (nl || eos) throw UsageError("--newline-id / --eos-id only apply to --tokenizer external");
    return Tokenizer::bytes(vocab);
  }
  if (c.tokenizer == "external") return Tokenizer::external(vocab, nl, eos);
  throw UsageError("unknown tokenizer '" + c.tokenizer + "' (expected byte|external)");
}

double parse_positive_or_inf(const std::string& s, const char* what) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw UsageError(std::string(what) + ": expected a number or 'inf', got '" + s + "'");
}

MitigationConfig make_mitigation(const RunConfig& c) {
  MitigationConfig m;
  m.kind = parse_mitigation_kind(c.mitigation);
  m.delta_factor = c.delta_factor;
  m.decay_exponent = c.decay_exponent;
  m.insertion_scale = c.insertion_scale;
  if (c.norm_threshold != "calibrated") {
    m.norm_threshold = parse_positive_or_inf(c.norm_threshold, "--norm-threshold");
  }
  if (c.window != "inf") {
    const double w = parse_positive_or_inf(c.window, "--window");
    if (!(w >= 1.0) || w != std::floor(w)) throw UsageError("--window must be a positive integer or 'inf'");
    m.window_size = static_cast<std::size_t>(w);
  }
  // Parameters of other kinds must stay neutral so a manifest never hides
  // an inactive setting that looks active.
  auto neutral = [&](bool ok, const char* flag) {
    if (!ok) throw UsageError(std::string(flag) + " does not apply to --mitigation " + c.mitigation);
  };
  neutral(m.kind == MitigationKind::kDeltaScale || c.delta_factor == 1.0, "--delta-factor");
  neutral(m.kind == MitigationKind::kForgetMore ||
              (c.decay_exponent == 1.0 && c.insertion_scale == 1.0),
          "--decay-exponent / --insertion-scale");
  neutral(m.kind == MitigationKind::kNormalize || c.norm_threshold == "inf", "--norm-threshold");
  neutral(m.kind == MitigationKind::kWindow || c.window == "inf", "--window");
  validate(m);
  return m;
}

template <typename S>
void calibrate_if_needed(const RunConfig& c, MitigationConfig& m, const ModelParams<S>& params,
                         std::span<const TokenId> stream, std::ostream& log) {
  if (m.kind != MitigationKind::kNormalize || c.norm_threshold != "calibrated") return;
  const std::size_t limit = c.calibration_len ? c.calibration_len : params.config.train_len;
  const std::size_t n = std::min({limit, params.config.train_len, stream.size()});
  m.head_thresholds = calibrate_norm_threshold(params, stream.first(n), 1.0, c.chunk);
  log << "calibrated per-head norm thresholds on " << n << " tokens\n";
}

std::vector<TokenId> materialize_input(const RunConfig& c, const Tokenizer& tok) {
  if (c.prompt == "newlines") return gen_newlines(c.len, tok);
  if (c.prompt == "tokens") {
    if (c.tokens.empty()) throw UsageError("--prompt tokens needs --tokens FILE");
    auto ids = read_token_ids(c.tokens);
    tok.check_ids(ids);
    return ids;
  }
  if (c.prompt == "text") return tok.encode(c.text);
  throw UsageError("unknown prompt kind '" + c.prompt + "' (expected newlines|tokens|text)");
}

ordered_json config_json(const ModelConfig& cfg) {
  return {{"vocab_size", cfg.vocab_size},   {"hidden_dim", cfg.hidden_dim},
          {"num_layers", cfg.num_layers},   {"num_heads", cfg.num_heads},
          {"head_dim", cfg.head_dim},       {"state_dim", cfg.state_dim},
          {"conv_kernel", cfg.conv_kernel}, {"train_len", cfg.train_len},
          {"conv_bias", cfg.conv_bias},     {"conv_alignment", to_string(cfg.conv_alignment)},
          {"gated_norm_scope", to_string(cfg.gated_norm_scope)}};
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

template <typename S>
void cmd_stats(const RunConfig& c, const ModelParams<S>& params, const fs::path& dir,
               std::ostream& log) {
  const Tokenizer tok = make_tokenizer(c, params.config.vocab_size);
  const auto ids = materialize_input(c, tok);
  MitigationConfig m = make_mitigation(c);
  calibrate_if_needed(c, m, params, ids, log);

  TraceRecorder<S> rec(params.config, c.trace_stride);
  ForwardOptions<S> opt;
  opt.chunk_size = c.chunk;
  opt.logits = LogitsMode::kNone;
  opt.allow_nonfinite = true;
  opt.sampler = &rec;
  opt.sample_stride = c.trace_stride;
  StreamState<S> st = make_stream_state(params, m);
  forward_sequence<S>(params, st, ids, m, opt, [](std::size_t, const RowVector<S>&) {});

  {
    std::ofstream csv(dir / "trace.csv", std::ios::trunc);
    write_trace_csv(csv, rec.trace());
  }
  write_text(dir / "trace.json", trace_to_json(rec.trace()));

  const auto decays = decay_from_trace(rec.trace(), params.config.train_len);
  ordered_json dj;
  dj["schema_version"] = kTraceSchemaVersion;
  dj["train_len"] = params.config.train_len;
  ordered_json layers = ordered_json::array();
  for (const auto& d : decays) layers.push_back(ordered_json::parse(decay_to_json(d)));
  dj["layers"] = std::move(layers);
  write_text(dir / "decay.json", dj.dump(2));

  std::vector<std::vector<std::vector<OutlierChannel>>> outliers;
  const std::size_t elems = params.config.state_dim * params.config.head_dim;
  if (elems >= 8) {
    for (const auto& layer : rec.last_states()) {
      auto& per_head = outliers.emplace_back();
      for (const auto& h : layer) per_head.push_back(detect_outlier_channels(h, c.outlier_threshold));
    }
  }
  write_text(dir / "outliers.json", outliers_to_json(outliers));
  log << "traced " << rec.trace().samples.size() << " samples over " << ids.size() << " tokens\n";
}

template <typename S>
void cmd_ppl(const RunConfig& c, std::shared_ptr<const ModelParams<S>> params, const fs::path& dir,
             std::ostream& log) {
  const Tokenizer tok = make_tokenizer(c, params->config.vocab_size);
  MitigationConfig m = make_mitigation(c);
  std::unique_ptr<TokenSource> src;
  if (c.prompt == "newlines") {
    if (m.kind == MitigationKind::kNormalize && c.norm_threshold == "calibrated") {
      const std::size_t n = std::min(c.len, params->config.train_len);
      calibrate_if_needed(c, m, *params, gen_newlines(n, tok), log);
    }
    src = std::make_unique<NewlinesSource>(c.len, tok.newline_id());
  } else {
    auto ids = materialize_input(c, tok);
    calibrate_if_needed(c, m, *params, ids, log);
    src = std::make_unique<VectorSource>(std::move(ids));
  }
  SsmLanguageModel<S> model(params, m, c.chunk);
  PplOptions po;
  po.window = c.smoothing;
  po.bos = tok.eos_id();
  const PerplexityCurve curve = eval_ppl_by_position(model, *src, po);
  {
    std::ofstream csv(dir / "curve.csv", std::ios::trunc);
    write_curve_csv(csv, curve);
  }
  DetectorOptions dopt;
  dopt.multiplier = c.multiplier;
  const CollapseReport r = sc_detect(curve, params->config.train_len, dopt);
  write_text(dir / "collapse.json", collapse_to_json(r));
  log << "collapse: " << (r.collapsed ? "yes at " + std::to_string(*r.onset) : std::string("no"))
      << " (baseline " << r.baseline << ", threshold " << r.threshold << ")\n";
}

void cmd_passkey_gen(const RunConfig& c, const fs::path& dir, std::ostream& log) {
  const Tokenizer tok = make_tokenizer(c, 257);
  const std::string key = c.key.empty() ? draw_passkey(c.seed) : c.key;
  const PasskeySample s = gen_passkey(c.len, c.positions, c.index, key, tok);
  write_text(dir / "prompt.txt", tok.decode(s.ids));
  write_token_ids(dir / "prompt_ids.txt", s.ids);
  ordered_json j;
  j["schema_version"] = 1;
  j["length"] = s.length;
  j["tokens"] = s.ids.size();
  j["needle_index"] = s.needle_index;
  j["num_needles"] = s.num_needles;
  j["target_position"] = s.target_position;
  j["needle_position"] = s.needle_position;
  j["passkey"] = s.passkey;
  j["answer_span"] = {s.answer_begin, s.answer_end};
  write_text(dir / "sample.json", j.dump(2));
  log << "passkey prompt of " << s.ids.size() << " tokens, needle at " << s.needle_position << '\n';
}

template <typename S>
void cmd_passkey_eval(const RunConfig& c, std::shared_ptr<const ModelParams<S>> params,
                      const fs::path& dir, std::ostream& log) {
  const Tokenizer tok = make_tokenizer(c, params->config.vocab_size);
  MitigationConfig m = make_mitigation(c);
  PasskeyOptions po;
  po.lengths = parse_length_list(c.lengths);
  po.positions = c.positions;
  po.samples = c.samples;
  po.seed = c.seed;
  po.max_new = c.max_new;
  po.threads = c.threads;
  if (m.kind == MitigationKind::kNormalize && c.norm_threshold == "calibrated") {
    const auto s = gen_passkey(po.lengths.front(), 1, 0, draw_passkey(c.seed), tok);
    calibrate_if_needed(c, m, *params, s.ids, log);
  }
  SsmLanguageModel<S> model(params, m, c.chunk);
  const AccuracyGrid g = eval_passkey(model, tok, po);
  {
    std::ofstream csv(dir / "grid.csv", std::ios::trunc);
    write_grid_csv(csv, g);
  }
  write_text(dir / "grid.json", grid_to_json(g));
  for (std::size_t li = 0; li < g.lengths.size(); ++li) {
    log << "length " << g.lengths[li] << ": mean accuracy " << g.mean_accuracy(li) << '\n';
  }
}

void cmd_capacity_fit(const RunConfig& c, const fs::path& dir, std::ostream& log) {
  if (c.points.empty()) throw UsageError("capacity-fit needs --points FILE");
  const std::string text = read_text(c.points);
  write_text(dir / "points.csv", text);
  std::istringstream in(text);
  const auto pts = read_capacity_points(in);
  const CapacityFit f = fit_capacity_law(pts, parse_capacity_law(c.law), c.state_unit, c.length_unit);
  write_text(dir / "fit.json", fit_to_json(f));
  log << std::setprecision(10) << "slope " << f.slope << ", intercept " << f.intercept << ", rss "
      << f.rss << '\n';
}

template <typename S>
void cmd_generate(const RunConfig& c, const ModelParams<S>& params, const fs::path& dir,
                  std::ostream& log) {
  const Tokenizer tok = make_tokenizer(c, params.config.vocab_size);
  const auto prompt = materialize_input(c, tok);
  if (prompt.empty()) throw UsageError("generate needs a non-empty prompt");
  MitigationConfig m = make_mitigation(c);
  calibrate_if_needed(c, m, params, prompt, log);
  StreamState<S> st;
  if (!c.load_state.empty()) {
    std::ifstream in(c.load_state, std::ios::binary);
    if (!in) throw DataError("cannot open state file " + c.load_state);
    st = load_stream_state(in, params);
  } else {
    st = make_stream_state(params, m);
  }
  ForwardOptions<S> opt;
  opt.chunk_size = c.chunk;
  opt.logits = LogitsMode::kLast;
  Eigen::RowVectorXd last;
  auto keep = [&](std::size_t, const RowVector<S>& l) { last = l.template cast<double>(); };
  forward_sequence<S>(params, st, prompt, m, opt, keep);
  std::vector<TokenId> out;
  const auto eos = tok.eos_id();
  while (out.size() < c.max_new) {
    const TokenId next = argmax_token(last);
    out.push_back(next);
    if (eos && next == *eos) break;
    if (out.size() == c.max_new) break;
    const TokenId one[1] = {next};
    forward_sequence<S>(params, st, std::span<const TokenId>(one, 1), m, opt, keep);
  }
  write_token_ids(dir / "output_ids.txt", out);
  if (tok.mode() == TokenizerMode::kByte) write_text(dir / "output.txt", tok.decode(out));
  if (c.save_state) {
    std::ofstream os(dir / "state.bin", std::ios::binary | std::ios::trunc);
    save_stream_state(os, st);
  }
  log << "generated " << out.size() << " tokens\n";
}

void cmd_inspect(const RunConfig& c, const fs::path& dir, std::ostream& log) {
  ordered_json j;
  j["schema_version"] = 1;
  ModelConfig cfg;
  if (is_random_spec(c.model)) {
    cfg = parse_random_spec(c.model).config;
    j["source"] = "random";
  } else {
    const CheckpointManifest m = open_checkpoint(c.model, c.profile);
    cfg = infer_config(m);
    j["source"] = "checkpoint";
    j["profile"] = m.profile_id;
    ordered_json tensors = ordered_json::array();
    for (const auto& [name, ti] : m.header.tensors) {
      tensors.push_back({{"name", name}, {"dtype", to_string(ti.dtype)}, {"shape", ti.shape}});
    }
    j["tensors"] = std::move(tensors);
    j["metadata"] = m.header.metadata;
    if (m.profile_id != "native-v1" && !c.allow_nonstandard_shapes) check_official_shapes(cfg);
    const LoadResult r = load_checkpoint(m, cfg);
    j["warnings"] = r.warnings;
  }
  if (c.train_len) cfg.train_len = c.train_len;
  j["config"] = config_json(cfg);
  try {
    check_official_shapes(cfg);
    j["official_shapes"] = true;
  } catch (const DataError& e) {
    j["official_shapes"] = false;
    j["official_shapes_note"] = e.what();
  }
  j["state_size"] = state_size(cfg);
  j["layer_state_size"] = layer_state_size(cfg);
  j["conv_state_size"] = conv_state_size(cfg);
  j["state_plus_conv_size"] = state_size(cfg) + conv_state_size(cfg);
  write_text(dir / "checkpoint.json", j.dump(2));
  log << "state size " << state_size(cfg) << " (+ " << conv_state_size(cfg) << " conv)\n";
}

template <typename S>
void run_model_command(const RunConfig& c, const LoadedModel& lm, const fs::path& dir,
                       std::ostream& log) {
  auto params = std::make_shared<const ModelParams<S>>(lm.params.template cast<S>());
  if (c.command == "stats") {
    cmd_stats<S>(c, *params, dir, log);
  } else if (c.command == "ppl") {
    cmd_ppl<S>(c, params, dir, log);
  } else if (c.command == "passkey-eval") {
    cmd_passkey_eval<S>(c, params, dir, log);
  } else if (c.command == "generate") {
    cmd_generate<S>(c, *params, dir, log);
  }
}

const std::vector<std::string>& model_commands() {
  static const std::vector<std::string> v = {"stats", "ppl", "passkey-eval", "generate"};
  return v;
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

void add_model_flags(CLI::App* s, RunConfig& c) {
  s->add_option("--model", c.model, "checkpoint path or random:L=..,d=..[,H,P,N,V,k,T,seed]")
      ->capture_default_str();
  s->add_option("--profile", c.profile, "name-mapping profile id (default: auto-detect)");
  s->add_option("--seed", c.seed, "seed for random models and passkeys")->capture_default_str();
  s->add_option("--train-len", c.train_len, "override the model's training length (0: keep)")
      ->capture_default_str();
  s->add_flag("--allow-nonstandard-shapes", c.allow_nonstandard_shapes,
              "accept published-format checkpoints whose shapes break P=64, N=128, H=2d/P");
}

void add_runtime_flags(CLI::App* s, RunConfig& c) {
  s->add_option("--precision", c.precision, "activation precision")
      ->check(CLI::IsMember({32, 64}))
      ->capture_default_str();
  s->add_option("--chunk", c.chunk, "tokens per chunk of the forward pass")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

void add_tokenizer_flags(CLI::App* s, RunConfig& c) {
  s->add_option("--tokenizer", c.tokenizer, "byte | external")
      ->check(CLI::IsMember({"byte", "external"}))
      ->capture_default_str();
  s->add_option("--newline-id", c.newline_id, "newline token id (external tokenizer)");
  s->add_option("--eos-id", c.eos_id, "EOS token id (external tokenizer)");
}

void add_mitigation_flags(CLI::App* s, RunConfig& c) {
  s->add_option("--mitigation", c.mitigation, "none | delta-scale | forget-more | normalize | window")
      ->capture_default_str();
  s->add_option("--delta-factor", c.delta_factor, "delta-scale: Delta multiplier")->capture_default_str();
  s->add_option("--decay-exponent", c.decay_exponent, "forget-more: a >= 1")->capture_default_str();
  s->add_option("--insertion-scale", c.insertion_scale, "forget-more: 0 < b <= 1")->capture_default_str();
  s->add_option("--norm-threshold", c.norm_threshold, "normalize: p, 'inf' or 'calibrated'")
      ->capture_default_str();
  s->add_option("--calibration-len", c.calibration_len,
                "normalize: calibration tokens (0: training length)")
      ->capture_default_str();
  s->add_option("--window", c.window, "window: r tokens or 'inf'")->capture_default_str();
}

void add_input_flags(CLI::App* s, RunConfig& c) {
  s->add_option("--prompt", c.prompt, "newlines | tokens | text")
      ->check(CLI::IsMember({"newlines", "tokens", "text"}))
      ->capture_default_str();
  s->add_option("--len", c.len, "length of the newlines prompt")->capture_default_str();
  s->add_option("--tokens", c.tokens, "token-id file (.bin u32 little-endian, else one id per line)");
  s->add_option("--text", c.text, "raw text prompt (byte tokenizer)");
}

std::string error_kind(int code) {
  switch (code) {
    case 2: return "usage";
    case 3: return "data";
    case 4: return "numeric";
    default: return "internal";
  }
}

void emit_error(std::ostream& err, int code, const std::string& msg) {
  ordered_json j;
  j["error"] = {{"kind", error_kind(code)}, {"message", msg}, {"exit_code", code}};
  err << j.dump() << '\n';
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::size_t> parse_length_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t mult = 1;
    char last = item.back();
    if (last == 'k' || last == 'K') {
      mult = 1024;
      item.pop_back();
    } else if (last == 'm' || last == 'M') {
      mult = 1024 * 1024;
      item.pop_back();
    }
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || v == 0) {
      throw UsageError("bad length '" + item + "' in list '" + s + "'");
    }
    out.push_back(static_cast<std::size_t>(v) * mult);
  }
  if (out.empty()) throw UsageError("empty length list");
  return out;
}

std::string run_config_to_json(const RunConfig& config) {
  RunConfig c = config;
  ordered_json run = ordered_json::object();
  for_each_field(c, [&](const char* key, auto& v) { run[key] = v; });
  ordered_json j;
  j["schema_version"] = kManifestSchemaVersion;
  j["tool"] = "sclab";
  j["run"] = std::move(run);
  return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (j.value("schema_version", 0) != kManifestSchemaVersion || !j.contains("run")) {
    throw UsageError("manifest has an unsupported schema version");
  }
  const json& run = j.at("run");
  RunConfig c;
  std::size_t known = 0;
  try {
    for_each_field(c, [&](const char* key, auto& v) {
      if (run.contains(key)) {
        run.at(key).get_to(v);
        ++known;
      }
    });
  } catch (const json::exception& e) {
    throw UsageError(std::string("manifest field has the wrong type: ") + e.what());
  }
  if (known != run.size()) throw UsageError("manifest contains unknown fields");
  return c;
}

fs::path execute(const RunConfig& c, const fs::path& out_base, std::ostream& log) {
  static const std::vector<std::string> commands = {"stats",        "ppl",        "passkey-gen",
                                                    "passkey-eval", "capacity-fit", "generate",
                                                    "inspect-checkpoint"};
  if (std::find(commands.begin(), commands.end(), c.command) == commands.end()) {
    throw UsageError("unknown command '" + c.command + "'");
  }
  if (c.precision != 32 && c.precision != 64) throw UsageError("--precision must be 32 or 64");

  // Validate everything that can fail cheaply before creating the directory.
  std::optional<LoadedModel> lm;
  const bool needs_model = std::find(model_commands().begin(), model_commands().end(), c.command) !=
                           model_commands().end();
  if (needs_model) {
    make_mitigation(c);
    lm = load_model(c);
    for (const auto& w : lm->warnings) log << "warning: " << w << '\n';
  }

  const fs::path dir = fresh_run_dir(out_base, c.command);
  write_text(dir / "manifest.json", run_config_to_json(c));
  if (needs_model) {
    if (c.precision == 64) {
      run_model_command<double>(c, *lm, dir, log);
    } else {
      run_model_command<float>(c, *lm, dir, log);
    }
  } else if (c.command == "passkey-gen") {
    cmd_passkey_gen(c, dir, log);
  } else if (c.command == "capacity-fit") {
    cmd_capacity_fit(c, dir, log);
  } else {
    cmd_inspect(c, dir, log);
  }
  log << "run directory: " << dir.string() << '\n';
  return dir;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"sclab: recurrent-state lab for scalar-gated SSM language models", "sclab"};
  app.require_subcommand(0, 1);
  RunConfig c;
  std::string out_base = "runs";
  std::string replay;
  app.add_option("--replay", replay, "re-run the configuration stored in a manifest.json");
  app.add_option("--out", out_base, "base directory for run directories")->capture_default_str();

  auto* stats = app.add_subcommand("stats", "trace state statistics, cumulative decay and outliers");
  add_model_flags(stats, c);
  add_runtime_flags(stats, c);
  add_tokenizer_flags(stats, c);
  add_mitigation_flags(stats, c);
  add_input_flags(stats, c);
  stats->add_option("--trace-stride", c.trace_stride, "tokens between trace samples")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  stats->add_option("--outlier-threshold", c.outlier_threshold, "robust z-score cutoff")
      ->capture_default_str();

  auto* ppl = app.add_subcommand("ppl", "perplexity by position and collapse detection");
  add_model_flags(ppl, c);
  add_runtime_flags(ppl, c);
  add_tokenizer_flags(ppl, c);
  add_mitigation_flags(ppl, c);
  add_input_flags(ppl, c);
  ppl->add_option("--smoothing", c.smoothing, "moving-average window of token NLL")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  ppl->add_option("--multiplier", c.multiplier, "collapse threshold relative to the baseline")
      ->capture_default_str();

  auto* pgen = app.add_subcommand("passkey-gen", "render one passkey prompt");
  pgen->add_option("--len", c.len, "target context length in tokens")->capture_default_str();
  pgen->add_option("--positions", c.positions, "needle positions per length (n)")->capture_default_str();
  pgen->add_option("--index", c.index, "needle index i in [0, n)")->capture_default_str();
  pgen->add_option("--key", c.key, "five-digit passkey (default: drawn from --seed)");
  pgen->add_option("--seed", c.seed, "seed for the passkey")->capture_default_str();

  auto* peval = app.add_subcommand("passkey-eval", "passkey retrieval accuracy grid");
  add_model_flags(peval, c);
  add_runtime_flags(peval, c);
  add_tokenizer_flags(peval, c);
  add_mitigation_flags(peval, c);
  peval->add_option("--lengths", c.lengths, "comma-separated context lengths, k/m suffixes allowed")
      ->capture_default_str();
  peval->add_option("--positions", c.positions, "needle positions per length")->capture_default_str();
  peval->add_option("--samples", c.samples, "samples per cell")->capture_default_str();
  peval->add_option("--max-new", c.max_new, "tokens generated per sample")->capture_default_str();
  peval->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();

  auto* fit = app.add_subcommand("capacity-fit", "least-squares capacity law");
  fit->add_option("--points", c.points, "CSV with state_size,length columns")->required();
  fit->add_option("--model,--law", c.law, "linear | exponential")
      ->check(CLI::IsMember({"linear", "exponential"}))
      ->capture_default_str();
  fit->add_option("--state-unit", c.state_unit, "unit label of S");
  fit->add_option("--length-unit", c.length_unit, "unit label of T");

  auto* gen = app.add_subcommand("generate", "greedy generation");
  add_model_flags(gen, c);
  add_runtime_flags(gen, c);
  add_tokenizer_flags(gen, c);
  add_mitigation_flags(gen, c);
  add_input_flags(gen, c);
  gen->add_option("--max-new", c.max_new, "tokens to generate")->capture_default_str();
  gen->add_flag("--save-state", c.save_state, "write the final stream state to state.bin");
  gen->add_option("--load-state", c.load_state, "resume from a saved stream state");

  auto* insp = app.add_subcommand("inspect-checkpoint", "tensor table, derived config and state sizes");
  add_model_flags(insp, c);

  for (auto* s : {stats, ppl, pgen, peval, fit, gen, insp}) {
    s->add_option("--out", out_base, "base directory for run directories")->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    emit_error(err, 2, e.what());
    return 2;
  }

  try {
    if (!replay.empty()) {
      if (!app.get_subcommands().empty()) throw UsageError("--replay takes no subcommand");
      c = run_config_from_json(read_text(replay));
    } else {
      const auto subs = app.get_subcommands();
      if (subs.empty()) {
        out << app.help();
        return 2;
      }
      c.command = subs.front()->get_name();
    }
    execute(c, out_base, out);
    return 0;
  } catch (const UsageError& e) {
    emit_error(err, 2, e.what());
    return 2;
  } catch (const NumericError& e) {
    emit_error(err, 4, e.what());
    return 4;
  } catch (const DataError& e) {
    emit_error(err, 3, e.what());
    return 3;
  } catch (const std::exception& e) {
    emit_error(err, 1, e.what());
    return 1;
  }
}

}  // namespace sclab
