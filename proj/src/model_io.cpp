// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "sclab/model_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

namespace sclab {
namespace {

static_assert(std::endian::native == std::endian::little,
              "container and token-id files are little-endian");

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

constexpr std::uint64_t kMaxHeaderBytes = 100ull << 20;
constexpr const char* kNativeFormatKey = "sclab.format";

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // Subnormal: renormalize.
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ffu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

std::uint16_t float_to_half(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  const std::int32_t exp = static_cast<std::int32_t>((x >> 23) & 0xffu) - 127 + 15;
  std::uint32_t mant = x & 0x7fffffu;
  if (((x >> 23) & 0xffu) == 0xffu) {
    return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));
  }
  if (exp >= 0x1f) return static_cast<std::uint16_t>(sign | 0x7c00u);
  if (exp <= 0) {
    if (exp < -10) return static_cast<std::uint16_t>(sign);
    mant |= 0x800000u;
    const int shift = 14 - exp;
    std::uint32_t half = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1);
    const std::uint32_t mid = 1u << (shift - 1);
    if (rem > mid || (rem == mid && (half & 1u))) ++half;
    return static_cast<std::uint16_t>(sign | half);
  }
  std::uint32_t half = sign | (static_cast<std::uint32_t>(exp) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;
  return static_cast<std::uint16_t>(half);
}

float bf16_to_float(std::uint16_t b) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(b) << 16);
}

std::uint16_t float_to_bf16(float f) {
  std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  if (std::isnan(f)) return static_cast<std::uint16_t>((x >> 16) | 0x40u);
  x += 0x7fffu + ((x >> 16) & 1u);
  return static_cast<std::uint16_t>(x >> 16);
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::string expand(const std::string& tmpl, std::size_t layer) {
  std::string out = tmpl;
  const auto pos = out.find("{l}");
  if (pos != std::string::npos) out.replace(pos, 3, std::to_string(layer));
  return out;
}

const std::set<std::string>& optional_roles() {
  static const std::set<std::string> roles = {"lm_head", "conv_bias", "conv_x_bias",
                                              "conv_b_bias", "conv_c_bias"};
  return roles;
}

std::filesystem::path default_profiles_path() {
  return std::filesystem::path(SCLAB_DATA_DIR) / "name_profiles.json";
}

const NameProfile& find_profile(const std::vector<NameProfile>& profiles, const std::string& id) {
  for (const auto& p : profiles) {
    if (p.id == id) return p;
  }
  throw UsageError("unknown name-mapping profile '" + id + "'");
}

// Resolves role names of one profile against a header and tracks which
// tensors were consumed.
class Resolver {
 public:
  Resolver(const CheckpointManifest& m, const NameProfile& p) : m_(m), p_(p) {}

  std::optional<std::string> find(const std::string& role, std::size_t layer = 0) const {
    const auto it = p_.roles.find(role);
    if (it == p_.roles.end()) return std::nullopt;
    for (const auto& tmpl : it->second) {
      const std::string name = expand(tmpl, layer);
      if (m_.header.tensors.count(name)) return name;
    }
    return std::nullopt;
  }

  std::string require(const std::string& role, std::size_t layer = 0) const {
    if (auto n = find(role, layer)) return *n;
    const auto it = p_.roles.find(role);
    const std::string hint = it != p_.roles.end() && !it->second.empty()
                                 ? expand(it->second.front(), layer)
                                 : role;
    throw DataError("checkpoint " + m_.path.string() + " is missing tensor '" + hint + "'");
  }

  const TensorInfo& info(const std::string& name) const { return m_.header.tensors.at(name); }

  // Values of `name` after checking its shape.
  std::vector<double> take(const std::string& name, const std::vector<std::size_t>& shape) {
    const TensorInfo& ti = info(name);
    if (ti.shape != shape) {
      throw ShapeMismatch(name, "tensor '" + name + "' has shape " + shape_string(ti.shape) +
                                    ", expected " + shape_string(shape));
    }
    consumed_.insert(name);
    return read_tensor_values(m_.path, m_.header, name);
  }

  std::vector<std::string> unconsumed() const {
    std::vector<std::string> out;
    for (const auto& [name, ti] : m_.header.tensors) {
      if (!consumed_.count(name)) out.push_back(name);
    }
    return out;
  }

  void mark(const std::string& name) { consumed_.insert(name); }

 private:
  const CheckpointManifest& m_;
  const NameProfile& p_;
  std::set<std::string> consumed_;
};

Matrix<double> row_major(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  Matrix<double> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v[r * cols + c];
    }
  }
  return m;
}

Vector<double> as_vector(const std::vector<double>& v) {
  return Eigen::Map<const Vector<double>>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <typename M>
std::vector<double> flatten(const M& m) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(static_cast<double>(m(r, c)));
  }
  return out;
}

std::size_t dim(const TensorInfo& ti, std::size_t i) {
  return i < ti.shape.size() ? ti.shape[i] : 0;
}

void load_native(Resolver& res, const ModelConfig& c, ModelParams<double>& p) {
  const std::size_t d = c.hidden_dim, hp = c.inner_dim(), n = c.state_dim, h = c.num_heads;
  const std::size_t k = c.conv_kernel, v = c.vocab_size;
  p.embedding = row_major(res.take(res.require("embedding"), {v, d}), v, d);
  p.final_norm = as_vector(res.take(res.require("final_norm"), {d}));
  auto mat = [&](const std::string& role, std::size_t l, std::size_t r, std::size_t cols) {
    return row_major(res.take(res.require(role, l), {r, cols}), r, cols);
  };
  auto vec = [&](const std::string& role, std::size_t l, std::size_t len) {
    return as_vector(res.take(res.require(role, l), {len}));
  };
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    auto& lp = p.layers[l];
    lp.in_norm = vec("in_norm", l, d);
    lp.w_gate = mat("w_gate", l, d, hp);
    lp.w_x = mat("w_x", l, d, hp);
    lp.w_b = mat("w_b", l, d, n);
    lp.w_c = mat("w_c", l, d, n);
    lp.w_delta = mat("w_delta", l, d, h);
    lp.b_delta = vec("b_delta", l, h);
    lp.a_log = vec("a_log", l, h);
    lp.d_skip = vec("d_skip", l, hp);
    lp.conv_x = mat("conv_x", l, k, hp);
    lp.conv_b = mat("conv_b", l, k, n);
    lp.conv_c = mat("conv_c", l, k, n);
    if (c.conv_bias) {
      lp.conv_x_bias = vec("conv_x_bias", l, hp).transpose();
      lp.conv_b_bias = vec("conv_b_bias", l, n).transpose();
      lp.conv_c_bias = vec("conv_c_bias", l, n).transpose();
    }
    lp.gate_norm = vec("gate_norm", l, hp);
    lp.w_out = mat("w_out", l, hp, d);
  }
}

void load_fused(Resolver& res, const ModelConfig& c, ModelParams<double>& p,
                std::vector<std::string>& warnings) {
  const std::size_t d = c.hidden_dim, hp = c.inner_dim(), n = c.state_dim, h = c.num_heads;
  const std::size_t k = c.conv_kernel, v = c.vocab_size, pd = c.head_dim;
  const auto ihp = static_cast<Eigen::Index>(hp), in = static_cast<Eigen::Index>(n);
  const auto ih = static_cast<Eigen::Index>(h);
  p.embedding = row_major(res.take(res.require("embedding"), {v, d}), v, d);
  p.final_norm = as_vector(res.take(res.require("final_norm"), {d}));
  if (auto head = res.find("lm_head")) {
    const Matrix<double> lm = row_major(res.take(*head, {v, d}), v, d);
    if (lm != p.embedding) {
      throw DataError("tensor '" + *head + "' differs from the embedding; only tied output "
                      "embeddings are supported");
    }
  }
  const std::size_t proj_rows = 2 * hp + 2 * n + h;
  const std::size_t conv_ch = hp + 2 * n;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    auto& lp = p.layers[l];
    lp.in_norm = as_vector(res.take(res.require("in_norm", l), {d}));

    const Matrix<double> in_proj =
        row_major(res.take(res.require("in_proj", l), {proj_rows, d}), proj_rows, d);
    lp.w_gate = in_proj.middleRows(0, ihp).transpose();
    lp.w_x = in_proj.middleRows(ihp, ihp).transpose();
    lp.w_b = in_proj.middleRows(2 * ihp, in).transpose();
    lp.w_c = in_proj.middleRows(2 * ihp + in, in).transpose();
    lp.w_delta = in_proj.middleRows(2 * ihp + 2 * in, ih).transpose();

    // conv1d weight is [channels, 1, k]; kernel tap k-1 multiplies the newest input.
    const Matrix<double> conv =
        row_major(res.take(res.require("conv_weight", l), {conv_ch, 1, k}), conv_ch, k);
    const Matrix<double> conv_t = conv.transpose();  // k x channels
    lp.conv_x = conv_t.leftCols(ihp);
    lp.conv_b = conv_t.middleCols(ihp, in);
    lp.conv_c = conv_t.middleCols(ihp + in, in);
    if (c.conv_bias) {
      const Vector<double> bias = as_vector(res.take(res.require("conv_bias", l), {conv_ch}));
      lp.conv_x_bias = bias.head(ihp).transpose();
      lp.conv_b_bias = bias.segment(ihp, in).transpose();
      lp.conv_c_bias = bias.segment(ihp + in, in).transpose();
    }

    lp.b_delta = as_vector(res.take(res.require("dt_bias", l), {h}));
    lp.a_log = as_vector(res.take(res.require("a_log", l), {h}));

    const std::string d_name = res.require("d_skip", l);
    if (res.info(d_name).shape == std::vector<std::size_t>{hp}) {
      lp.d_skip = as_vector(res.take(d_name, {hp}));
    } else {
      const Vector<double> per_head = as_vector(res.take(d_name, {h}));
      lp.d_skip.resize(ihp);
      for (std::size_t hd = 0; hd < h; ++hd) {
        lp.d_skip.segment(static_cast<Eigen::Index>(hd * pd), static_cast<Eigen::Index>(pd))
            .setConstant(per_head(static_cast<Eigen::Index>(hd)));
      }
    }

    lp.gate_norm = as_vector(res.take(res.require("gate_norm", l), {hp}));
    lp.w_out = row_major(res.take(res.require("out_proj", l), {d, hp}), d, hp).transpose();
  }
  (void)warnings;
}

template <typename S>
constexpr DType native_dtype() {
  return sizeof(S) == 4 ? DType::kF32 : DType::kF64;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t out = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw UsageError("random model spec: '" + key + "' needs a non-negative integer, got '" +
                     value + "'");
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(DType d) {
  switch (d) {
    case DType::kF16: return "F16";
    case DType::kBF16: return "BF16";
    case DType::kF32: return "F32";
    case DType::kF64: return "F64";
  }
  return "?";
}

DType parse_dtype(const std::string& s) {
  if (s == "F16") return DType::kF16;
  if (s == "BF16") return DType::kBF16;
  if (s == "F32") return DType::kF32;
  if (s == "F64") return DType::kF64;
  throw DataError("unsupported tensor dtype '" + s + "'");
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF16:
    case DType::kBF16: return 2;
    case DType::kF32: return 4;
    case DType::kF64: return 8;
  }
  return 0;
}

std::size_t TensorInfo::numel() const {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

SafetensorsHeader read_safetensors_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  if (!in) throw DataError(path.string() + ": truncated header length");
  std::error_code ec;
  const auto file_size = std::filesystem::file_size(path, ec);
  if (ec || len > kMaxHeaderBytes || 8 + len > file_size) {
    throw DataError(path.string() + ": implausible header length " + std::to_string(len));
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError(path.string() + ": truncated header");

  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed header JSON: " + e.what());
  }
  if (!j.is_object()) throw DataError(path.string() + ": header is not a JSON object");

  SafetensorsHeader h;
  h.data_offset = 8 + len;
  const std::uint64_t data_size = file_size - h.data_offset;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const auto& [name, entry] : j.items()) {
    if (name == "__metadata__") {
      if (!entry.is_object()) throw DataError(path.string() + ": __metadata__ must be an object");
      for (const auto& [k, v] : entry.items()) {
        h.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
      }
      continue;
    }
    try {
      TensorInfo ti;
      ti.dtype = parse_dtype(entry.at("dtype").get<std::string>());
      ti.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2) throw DataError("data_offsets must have two entries");
      ti.begin = offsets[0];
      ti.end = offsets[1];
      if (ti.begin > ti.end || ti.end > data_size) throw DataError("data_offsets out of range");
      if (ti.end - ti.begin != ti.numel() * dtype_size(ti.dtype)) {
        throw DataError("byte length disagrees with shape and dtype");
      }
      spans.emplace_back(ti.begin, ti.end);
      h.tensors.emplace(name, std::move(ti));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ": tensor '" + name + "': " + e.what());
    } catch (const DataError& e) {
      throw DataError(path.string() + ": tensor '" + name + "': " + e.what());
    }
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) {
      throw DataError(path.string() + ": overlapping tensor data");
    }
  }
  return h;
}

std::vector<double> read_tensor_values(const std::filesystem::path& path,
                                       const SafetensorsHeader& header, const std::string& name) {
  const auto it = header.tensors.find(name);
  if (it == header.tensors.end()) throw DataError("no tensor named '" + name + "'");
  const TensorInfo& ti = it->second;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  in.seekg(static_cast<std::streamoff>(header.data_offset + ti.begin));
  std::vector<char> raw(ti.end - ti.begin);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!in) throw DataError(path.string() + ": truncated data for tensor '" + name + "'");

  const std::size_t n = ti.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const char* p = raw.data() + i * dtype_size(ti.dtype);
    switch (ti.dtype) {
      case DType::kF16: {
        std::uint16_t b;
        std::memcpy(&b, p, 2);
        out[i] = half_to_float(b);
        break;
      }
      case DType::kBF16: {
        std::uint16_t b;
        std::memcpy(&b, p, 2);
        out[i] = bf16_to_float(b);
        break;
      }
      case DType::kF32: {
        float f;
        std::memcpy(&f, p, 4);
        out[i] = f;
        break;
      }
      case DType::kF64: std::memcpy(&out[i], p, 8); break;
    }
  }
  return out;
}

void write_safetensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                       const std::map<std::string, std::string>& metadata) {
  ordered_json header = ordered_json::object();
  if (!metadata.empty()) {
    ordered_json meta = ordered_json::object();
    for (const auto& [k, v] : metadata) meta[k] = v;
    header["__metadata__"] = meta;
  }
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    std::size_t numel = 1;
    for (auto s : t.shape) numel *= s;
    if (numel != t.values.size()) {
      throw UsageError("tensor '" + t.name + "': value count disagrees with shape");
    }
    const std::uint64_t bytes = numel * dtype_size(t.dtype);
    header[t.name] = {{"dtype", to_string(t.dtype)},
                      {"shape", t.shape},
                      {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string text = header.dump();
  while ((8 + text.size()) % 8 != 0) text.push_back(' ');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    for (double v : t.values) {
      switch (t.dtype) {
        case DType::kF16: {
          const std::uint16_t b = float_to_half(static_cast<float>(v));
          out.write(reinterpret_cast<const char*>(&b), 2);
          break;
        }
        case DType::kBF16: {
          const std::uint16_t b = float_to_bf16(static_cast<float>(v));
          out.write(reinterpret_cast<const char*>(&b), 2);
          break;
        }
        case DType::kF32: {
          const float f = static_cast<float>(v);
          out.write(reinterpret_cast<const char*>(&f), 4);
          break;
        }
        case DType::kF64: out.write(reinterpret_cast<const char*>(&v), 8); break;
      }
    }
  }
  if (!out) throw DataError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------

std::vector<NameProfile> load_name_profiles(const std::filesystem::path& path) {
  const auto file = path.empty() ? default_profiles_path() : path;
  std::ifstream in(file);
  if (!in) throw DataError("cannot open name-mapping profiles " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(file.string() + ": " + e.what());
  }
  if (j.value("schema_version", 0) != 1) {
    throw DataError(file.string() + ": unsupported profile schema version");
  }
  std::vector<NameProfile> out;
  for (const auto& e : j.at("profiles")) {
    NameProfile p;
    p.id = e.at("id").get<std::string>();
    const auto layout = e.at("layout").get<std::string>();
    if (layout == "native") {
      p.layout = CheckpointLayout::kNative;
    } else if (layout == "mamba2-fused") {
      p.layout = CheckpointLayout::kFusedMamba2;
    } else {
      throw DataError(file.string() + ": profile '" + p.id + "' has unknown layout '" + layout + "'");
    }
    p.gated_norm_scope = parse_gated_norm_scope(e.value("gated_norm_scope", "head"));
    for (const auto& [role, names] : e.at("roles").items()) {
      p.roles[role] = names.get<std::vector<std::string>>();
    }
    out.push_back(std::move(p));
  }
  return out;
}

CheckpointManifest open_checkpoint(const std::filesystem::path& path, const std::string& profile_id,
                                   const std::filesystem::path& profiles_path) {
  CheckpointManifest m;
  m.path = path;
  m.header = read_safetensors_header(path);
  const auto profiles = load_name_profiles(profiles_path);
  if (!profile_id.empty()) {
    find_profile(profiles, profile_id);
    m.profile_id = profile_id;
    return m;
  }
  for (const auto& p : profiles) {
    Resolver res(m, p);
    bool all = true;
    for (const auto& [role, names] : p.roles) {
      if (optional_roles().count(role)) continue;
      if (!res.find(role, 0)) {
        all = false;
        break;
      }
    }
    if (all) {
      m.profile_id = p.id;
      return m;
    }
  }
  throw DataError("checkpoint " + path.string() +
                  " matches no known name-mapping profile; pass --profile or extend the profile file");
}

ModelConfig infer_config(const CheckpointManifest& manifest,
                         const std::filesystem::path& profiles_path) {
  const auto profiles = load_name_profiles(profiles_path);
  const NameProfile& p = find_profile(profiles, manifest.profile_id);
  Resolver res(manifest, p);
  ModelConfig c;
  c.gated_norm_scope = p.gated_norm_scope;

  const TensorInfo& emb = res.info(res.require("embedding"));
  c.vocab_size = dim(emb, 0);
  c.hidden_dim = dim(emb, 1);
  std::size_t layers = 0;
  while (res.find("in_norm", layers)) ++layers;
  c.num_layers = layers;
  if (layers == 0) {
    throw DataError("checkpoint " + manifest.path.string() + " has no layers");
  }

  if (p.layout == CheckpointLayout::kNative) {
    const TensorInfo& wx = res.info(res.require("w_x", 0));
    c.num_heads = dim(res.info(res.require("a_log", 0)), 0);
    c.state_dim = dim(res.info(res.require("w_b", 0)), 1);
    c.conv_kernel = dim(res.info(res.require("conv_x", 0)), 0);
    c.head_dim = c.num_heads ? dim(wx, 1) / c.num_heads : 0;
    c.conv_bias = res.find("conv_x_bias", 0).has_value();
    const auto& md = manifest.header.metadata;
    if (auto it = md.find("train_len"); it != md.end()) c.train_len = std::stoull(it->second);
    if (auto it = md.find("conv_alignment"); it != md.end()) {
      c.conv_alignment = parse_conv_alignment(it->second);
    }
    if (auto it = md.find("gated_norm_scope"); it != md.end()) {
      c.gated_norm_scope = parse_gated_norm_scope(it->second);
    }
  } else {
    c.num_heads = dim(res.info(res.require("a_log", 0)), 0);
    const std::size_t hp = dim(res.info(res.require("out_proj", 0)), 1);
    const TensorInfo& conv = res.info(res.require("conv_weight", 0));
    const std::size_t channels = dim(conv, 0);
    c.conv_kernel = conv.shape.empty() ? 0 : conv.shape.back();
    c.head_dim = c.num_heads ? hp / c.num_heads : 0;
    c.state_dim = channels > hp ? (channels - hp) / 2 : 0;
    c.conv_bias = res.find("conv_bias", 0).has_value();
  }
  validate(c);
  return c;
}

LoadResult load_checkpoint(const CheckpointManifest& manifest, const ModelConfig& config,
                           const std::filesystem::path& profiles_path) {
  validate(config);
  const auto profiles = load_name_profiles(profiles_path);
  const NameProfile& p = find_profile(profiles, manifest.profile_id);
  Resolver res(manifest, p);
  LoadResult out;
  out.params = zero_params<double>(config);
  if (p.layout == CheckpointLayout::kNative) {
    load_native(res, config, out.params);
  } else {
    load_fused(res, config, out.params, out.warnings);
  }
  // A checkpoint with more layers than the config asked for is a mismatch.
  if (res.find("in_norm", config.num_layers)) {
    throw DataError("checkpoint " + manifest.path.string() + " has more than " +
                    std::to_string(config.num_layers) + " layers");
  }
  for (const auto& name : res.unconsumed()) {
    out.warnings.push_back("unconsumed tensor '" + name + "'");
  }
  check_shapes(out.params);
  return out;
}

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<S>& params) {
  check_shapes(params);
  const auto& c = params.config;
  constexpr DType dt = native_dtype<S>();
  std::vector<NamedTensor> ts;
  auto add = [&](const std::string& name, const auto& m, std::vector<std::size_t> shape) {
    ts.push_back({name, dt, std::move(shape), flatten(m)});
  };
  auto ms = [](const auto& m) {
    return std::vector<std::size_t>{static_cast<std::size_t>(m.rows()),
                                    static_cast<std::size_t>(m.cols())};
  };
  auto vs = [](const auto& v) { return std::vector<std::size_t>{static_cast<std::size_t>(v.size())}; };

  add("embedding", params.embedding, ms(params.embedding));
  add("final_norm", params.final_norm, vs(params.final_norm));
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& lp = params.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    add(pre + "in_norm", lp.in_norm, vs(lp.in_norm));
    add(pre + "w_gate", lp.w_gate, ms(lp.w_gate));
    add(pre + "w_x", lp.w_x, ms(lp.w_x));
    add(pre + "w_b", lp.w_b, ms(lp.w_b));
    add(pre + "w_c", lp.w_c, ms(lp.w_c));
    add(pre + "w_delta", lp.w_delta, ms(lp.w_delta));
    add(pre + "b_delta", lp.b_delta, vs(lp.b_delta));
    add(pre + "a_log", lp.a_log, vs(lp.a_log));
    add(pre + "d_skip", lp.d_skip, vs(lp.d_skip));
    add(pre + "conv_x", lp.conv_x, ms(lp.conv_x));
    add(pre + "conv_b", lp.conv_b, ms(lp.conv_b));
    add(pre + "conv_c", lp.conv_c, ms(lp.conv_c));
    if (c.conv_bias) {
      add(pre + "conv_x_bias", lp.conv_x_bias, vs(lp.conv_x_bias));
      add(pre + "conv_b_bias", lp.conv_b_bias, vs(lp.conv_b_bias));
      add(pre + "conv_c_bias", lp.conv_c_bias, vs(lp.conv_c_bias));
    }
    add(pre + "gate_norm", lp.gate_norm, vs(lp.gate_norm));
    add(pre + "w_out", lp.w_out, ms(lp.w_out));
  }
  const std::map<std::string, std::string> meta = {
      {kNativeFormatKey, "native-v1"},
      {"train_len", std::to_string(c.train_len)},
      {"conv_alignment", to_string(c.conv_alignment)},
      {"gated_norm_scope", to_string(c.gated_norm_scope)},
  };
  write_safetensors(path, ts, meta);
}

template void save_checkpoint(const std::filesystem::path&, const ModelParams<float>&);
template void save_checkpoint(const std::filesystem::path&, const ModelParams<double>&);

// ---------------------------------------------------------------------------

std::uint64_t layer_state_size(const ModelConfig& c) {
  return static_cast<std::uint64_t>(c.num_heads) * c.head_dim * c.state_dim;
}

std::uint64_t state_size(const ModelConfig& c) {
  return static_cast<std::uint64_t>(c.num_layers) * layer_state_size(c);
}

std::uint64_t conv_state_size(const ModelConfig& c) {
  return static_cast<std::uint64_t>(c.num_layers) * c.conv_tail_len() *
         (c.inner_dim() + 2 * c.state_dim);
}

// ---------------------------------------------------------------------------

Tokenizer Tokenizer::bytes(std::size_t vocab_size) {
  if (vocab_size < 257) {
    throw UsageError("byte tokenizer needs a vocabulary of at least 257 ids (256 bytes + EOS), got " +
                     std::to_string(vocab_size));
  }
  Tokenizer t;
  t.mode_ = TokenizerMode::kByte;
  t.vocab_size_ = vocab_size;
  t.newline_ = static_cast<TokenId>('\n');
  t.eos_ = kByteEos;
  return t;
}

Tokenizer Tokenizer::external(std::size_t vocab_size, std::optional<TokenId> newline_id,
                              std::optional<TokenId> eos_id) {
  Tokenizer t;
  t.mode_ = TokenizerMode::kExternalIds;
  t.vocab_size_ = vocab_size;
  t.newline_ = newline_id;
  t.eos_ = eos_id;
  if (newline_id && *newline_id >= vocab_size) throw UsageError("newline id outside the vocabulary");
  if (eos_id && *eos_id >= vocab_size) throw UsageError("EOS id outside the vocabulary");
  return t;
}

TokenId Tokenizer::newline_id() const {
  if (!newline_) {
    throw UsageError("the tokenizer has no single-id newline; pass --newline-id");
  }
  return *newline_;
}

std::vector<TokenId> Tokenizer::encode(const std::string& text, bool append_eos) const {
  if (mode_ != TokenizerMode::kByte) {
    throw UsageError("external-ids tokenizer refuses raw text; supply a token-id file");
  }
  std::vector<TokenId> ids;
  ids.reserve(text.size() + 1);
  for (unsigned char ch : text) ids.push_back(ch);
  if (append_eos) ids.push_back(kByteEos);
  return ids;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
  if (mode_ != TokenizerMode::kByte) {
    throw UsageError("external-ids tokenizer cannot detokenize");
  }
  check_ids(ids);
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

void Tokenizer::check_ids(const std::vector<TokenId>& ids) const {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab_size_) {
      throw DataError("token id " + std::to_string(ids[i]) + " at index " + std::to_string(i) +
                      " is outside the vocabulary (" + std::to_string(vocab_size_) + ")");
    }
  }
}

std::vector<TokenId> read_token_ids(const std::filesystem::path& path) {
  std::vector<TokenId> ids;
  if (path.extension() == ".bin") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open token file " + path.string());
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    if (ec || size % 4 != 0) {
      throw DataError(path.string() + ": binary token file size is not a multiple of 4");
    }
    ids.resize(size / 4);
    in.read(reinterpret_cast<char*>(ids.data()), static_cast<std::streamsize>(size));
    if (!in) throw DataError(path.string() + ": read failed");
    return ids;
  }
  std::ifstream in(path);
  if (!in) throw DataError("cannot open token file " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::uint64_t v = 0;
    const auto* end = line.data() + line.size();
    const auto [ptr, ec] = std::from_chars(line.data(), end, v);
    if (ec != std::errc() || ptr != end || v > 0xffffffffull) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": not a token id: '" + line + "'");
    }
    ids.push_back(static_cast<TokenId>(v));
  }
  return ids;
}

void write_token_ids(const std::filesystem::path& path, const std::vector<TokenId>& ids) {
  if (path.extension() == ".bin") {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(ids.data()),
              static_cast<std::streamsize>(ids.size() * sizeof(TokenId)));
    if (!out) throw DataError("write failed: " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  for (TokenId id : ids) out << id << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------

template <typename S>
ModelParams<S> random_model(const ModelConfig& config, std::uint64_t seed) {
  ModelParams<double> p = zero_params<double>(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dense(0.0, 0.02);
  std::uniform_real_distribution<double> conv(-0.5, 0.5);
  std::uniform_real_distribution<double> rate(1.0, 16.0);
  std::uniform_real_distribution<double> log_dt(std::log(0.001), std::log(0.1));

  auto fill = [&](auto& m, auto& dist) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = dist(rng);
    }
  };
  fill(p.embedding, dense);
  p.final_norm.setOnes();
  for (auto& lp : p.layers) {
    lp.in_norm.setOnes();
    fill(lp.w_gate, dense);
    fill(lp.w_x, dense);
    fill(lp.w_b, dense);
    fill(lp.w_c, dense);
    fill(lp.w_delta, dense);
    for (Eigen::Index h = 0; h < lp.a_log.size(); ++h) {
      lp.a_log(h) = std::log(rate(rng));
      const double dt = std::exp(log_dt(rng));
      lp.b_delta(h) = dt + std::log(-std::expm1(-dt));
    }
    lp.d_skip.setOnes();
    fill(lp.conv_x, conv);
    fill(lp.conv_b, conv);
    fill(lp.conv_c, conv);
    if (config.conv_bias) {
      fill(lp.conv_x_bias, dense);
      fill(lp.conv_b_bias, dense);
      fill(lp.conv_c_bias, dense);
    }
    lp.gate_norm.setOnes();
    fill(lp.w_out, dense);
  }
  if constexpr (std::is_same_v<S, double>) {
    return p;
  } else {
    return p.template cast<S>();
  }
}

template ModelParams<float> random_model(const ModelConfig&, std::uint64_t);
template ModelParams<double> random_model(const ModelConfig&, std::uint64_t);

bool is_random_spec(const std::string& spec) { return spec.rfind("random:", 0) == 0; }

RandomSpec parse_random_spec(const std::string& spec) {
  if (!is_random_spec(spec)) throw UsageError("not a random model spec: '" + spec + "'");
  std::map<std::string, std::size_t> kv;
  std::stringstream ss(spec.substr(7));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw UsageError("random model spec: expected key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq);
    static const std::set<std::string> keys = {"L", "d", "H", "P", "N", "V", "k", "T", "seed"};
    if (!keys.count(key)) throw UsageError("random model spec: unknown key '" + key + "'");
    kv[key] = parse_size(key, item.substr(eq + 1));
  }
  if (!kv.count("L") || !kv.count("d")) throw UsageError("random model spec needs L and d");
  RandomSpec r;
  ModelConfig& c = r.config;
  c.num_layers = kv["L"];
  c.hidden_dim = kv["d"];
  c.head_dim = kv.count("P") ? kv["P"] : 16;
  if (kv.count("H")) {
    c.num_heads = kv["H"];
  } else {
    if (c.head_dim == 0 || (2 * c.hidden_dim) % c.head_dim != 0) {
      throw UsageError("random model spec: 2d must be divisible by P when H is not given");
    }
    c.num_heads = 2 * c.hidden_dim / c.head_dim;
  }
  c.state_dim = kv.count("N") ? kv["N"] : 16;
  c.vocab_size = kv.count("V") ? kv["V"] : 257;
  c.conv_kernel = kv.count("k") ? kv["k"] : 4;
  c.train_len = kv.count("T") ? kv["T"] : 8192;
  if (kv.count("seed")) r.seed = kv["seed"];
  validate(c);
  return r;
}

}  // namespace sclab
