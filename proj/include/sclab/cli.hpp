// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Every run writes into a fresh directory holding a
// manifest that is sufficient to replay it.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace sclab {

inline constexpr int kManifestSchemaVersion = 1;

/// Everything that affects a run's outputs. Serialized as manifest.json.
struct RunConfig {
  std::string command;

  // Model.
  std::string model = "random:L=2,d=64";
  std::string profile;
  std::uint64_t seed = 0;
  int precision = 32;
  std::size_t chunk = 64;
  std::size_t train_len = 0;  // 0: keep the model's value
  bool allow_nonstandard_shapes = false;

  // Tokenizer.
  std::string tokenizer = "byte";
  std::int64_t newline_id = -1;  // -1: unknown
  std::int64_t eos_id = -1;

  // Mitigation.
  std::string mitigation = "none";
  double delta_factor = 1.0;
  double decay_exponent = 1.0;
  double insertion_scale = 1.0;
  std::string norm_threshold = "inf";  // number, "inf" or "calibrated"
  std::size_t calibration_len = 0;     // 0: training length
  std::string window = "inf";          // tokens or "inf"

  // Inputs.
  std::string prompt = "newlines";  // newlines | tokens | text
  std::size_t len = 4096;
  std::string tokens;
  std::string text;

  // Diagnostics.
  std::size_t trace_stride = 256;
  std::size_t smoothing = 512;
  double multiplier = 2.0;
  double outlier_threshold = 6.0;

  // Passkey.
  std::string lengths = "1k,2k";
  std::size_t positions = 10;
  std::size_t samples = 20;
  std::size_t index = 0;
  std::string key;  // empty: drawn from the seed
  std::size_t max_new = 8;
  std::size_t threads = 1;

  // Capacity fit.
  std::string points;
  std::string law = "linear";
  std::string state_unit;
  std::string length_unit;

  // Generation.
  bool save_state = false;  // writes state.bin into the run directory
  std::string load_state;
};

std::string run_config_to_json(const RunConfig& config);
/// Throws UsageError on unknown keys or a wrong schema version.
RunConfig run_config_from_json(const std::string& text);

/// Runs `config`, writing into a fresh directory under `out_base`; returns
/// the directory.
std::filesystem::path execute(const RunConfig& config, const std::filesystem::path& out_base,
                              std::ostream& log);

/// Full CLI: parses argv, dispatches, and maps errors to exit codes
/// (0 ok, 1 internal, 2 usage, 3 data, 4 numeric) with a JSON error record
/// on `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// "1k,2k,8192" -> {1024, 2048, 8192}.
std::vector<std::size_t> parse_length_list(const std::string& s);

}  // namespace sclab
