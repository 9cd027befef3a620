// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint ingestion (safetensors containers), state-size accounting,
// tokenization adapters and synthetic models.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sclab/config.hpp"
#include "sclab/params.hpp"
#include "sclab/types.hpp"

namespace sclab {

// ---------------------------------------------------------------------------
// Safetensors container
// ---------------------------------------------------------------------------

enum class DType { kF16, kBF16, kF32, kF64 };

std::string to_string(DType d);
/// Throws DataError for dtypes the loader cannot convert.
DType parse_dtype(const std::string& s);
std::size_t dtype_size(DType d);

struct TensorInfo {
  DType dtype = DType::kF32;
  std::vector<std::size_t> shape;
  std::uint64_t begin = 0;  // byte offsets relative to the data section
  std::uint64_t end = 0;

  std::size_t numel() const;
};

/// Header of a safetensors file: 8-byte little-endian header length, JSON
/// header, then the raw data section.
struct SafetensorsHeader {
  std::map<std::string, TensorInfo> tensors;
  std::map<std::string, std::string> metadata;
  std::uint64_t data_offset = 0;  // absolute file offset of the data section
};

/// Parses and validates the header: offsets in range, non-overlapping,
/// consistent with shape and dtype.
SafetensorsHeader read_safetensors_header(const std::filesystem::path& path);

/// Values of one tensor widened to double, in row-major order.
std::vector<double> read_tensor_values(const std::filesystem::path& path,
                                       const SafetensorsHeader& header, const std::string& name);

struct NamedTensor {
  std::string name;
  DType dtype = DType::kF32;
  std::vector<std::size_t> shape;
  std::vector<double> values;  // row-major; narrowed to dtype on write
};

void write_safetensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                       const std::map<std::string, std::string>& metadata = {});

// ---------------------------------------------------------------------------
// Name-mapping profiles and checkpoints
// ---------------------------------------------------------------------------

/// How tensors of a profile relate to LayerParams.
enum class CheckpointLayout {
  /// One tensor per LayerParams field, stored exactly as in memory.
  kNative,
  /// Fused input projection [z | x | B | C | dt] and a fused x | B | C conv.
  kFusedMamba2,
};

/// One entry of the versioned profile file. `roles` maps a logical role to
/// candidate name templates; `{l}` stands for the layer index.
struct NameProfile {
  std::string id;
  CheckpointLayout layout = CheckpointLayout::kNative;
  GatedNormScope gated_norm_scope = GatedNormScope::kPerHead;
  std::map<std::string, std::vector<std::string>> roles;
};

/// Profiles shipped in data/name_profiles.json (or `path` when given).
std::vector<NameProfile> load_name_profiles(const std::filesystem::path& path = {});

struct CheckpointManifest {
  std::filesystem::path path;
  SafetensorsHeader header;
  std::string profile_id;
};

/// Reads the header and picks the profile whose layer-0 tensors are all
/// present (or the one named by `profile_id`). Unknown layouts throw.
CheckpointManifest open_checkpoint(const std::filesystem::path& path,
                                   const std::string& profile_id = {},
                                   const std::filesystem::path& profiles_path = {});

/// Config implied by the tensor shapes (and, for native files, metadata).
ModelConfig infer_config(const CheckpointManifest& manifest,
                         const std::filesystem::path& profiles_path = {});

struct LoadResult {
  ModelParams<double> params;
  std::vector<std::string> warnings;  // unconsumed tensors and similar
};

/// Populates every parameter of `config` from the checkpoint. Every shape is
/// checked against the config; nothing is reshaped silently.
LoadResult load_checkpoint(const CheckpointManifest& manifest, const ModelConfig& config,
                           const std::filesystem::path& profiles_path = {});

/// Writes `params` under the native profile, in the precision of S.
template <typename S>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<S>& params);

// ---------------------------------------------------------------------------
// State-size accounting
// ---------------------------------------------------------------------------

/// Recurrent-state elements of the whole model: L * H * P * N.
std::uint64_t state_size(const ModelConfig& config);
/// Recurrent-state elements of one layer: H * P * N.
std::uint64_t layer_state_size(const ModelConfig& config);
/// Short-convolution tail elements of the whole model: L * tail * (HP + 2N).
std::uint64_t conv_state_size(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

enum class TokenizerMode { kByte, kExternalIds };

class Tokenizer {
 public:
  /// Byte mode: ids 0..255 are bytes, 256 is EOS; needs vocab_size >= 257.
  static Tokenizer bytes(std::size_t vocab_size = 257);
  /// External ids: only pre-tokenized files; `newline_id` is the id of "\n"
  /// in the external vocabulary, when known.
  static Tokenizer external(std::size_t vocab_size, std::optional<TokenId> newline_id = {},
                            std::optional<TokenId> eos_id = {});

  TokenizerMode mode() const { return mode_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::optional<TokenId> eos_id() const { return eos_; }
  /// Throws UsageError when the tokenizer has no single-id newline.
  TokenId newline_id() const;

  /// Throws UsageError in external mode.
  std::vector<TokenId> encode(const std::string& text, bool append_eos = false) const;
  /// Throws DataError for ids >= vocab_size; EOS and other non-byte ids are
  /// dropped in byte mode. Throws UsageError in external mode.
  std::string decode(const std::vector<TokenId>& ids) const;

  /// Throws DataError for any id >= vocab_size.
  void check_ids(const std::vector<TokenId>& ids) const;

 private:
  TokenizerMode mode_ = TokenizerMode::kByte;
  std::size_t vocab_size_ = 257;
  std::optional<TokenId> newline_;
  std::optional<TokenId> eos_;
};

inline constexpr TokenId kByteEos = 256;

/// Token-id files: `.bin` is raw little-endian u32, anything else is text
/// with one id per line.
std::vector<TokenId> read_token_ids(const std::filesystem::path& path);
void write_token_ids(const std::filesystem::path& path, const std::vector<TokenId>& ids);

// ---------------------------------------------------------------------------
// Synthetic models
// ---------------------------------------------------------------------------

/// Seeded small-magnitude initialization: dense weights N(0, 0.02^2), conv
/// kernels U(-0.5, 0.5), A = log U(1, 16), dt bias the inverse softplus of
/// U(0.001, 0.1) on a log scale, D = 1, norm weights 1. Values are drawn in
/// double, so float and double models agree up to rounding.
template <typename S>
ModelParams<S> random_model(const ModelConfig& config, std::uint64_t seed);

struct RandomSpec {
  ModelConfig config;
  std::optional<std::uint64_t> seed;
};

/// Parses "random:L=2,d=64[,H=..,P=..,N=..,V=..,k=..,T=..,seed=..]".
/// Defaults: P = 16, H = 2d / P, N = 16, V = 257, k = 4, T = 8192.
RandomSpec parse_random_spec(const std::string& spec);
bool is_random_spec(const std::string& spec);

}  // namespace sclab
