#pragma once

// Labeled per-layer activation sets and the ADF1 dump container.
//
// File layout (all integers little-endian):
//   bytes 0..3   "ADF1"
//   bytes 4..7   u32 version (= 1)
//   bytes 8..15  u64 header length H
//   bytes 16..   H bytes of UTF-8 JSON manifest
//   zero padding up to the next 64-byte file offset, where the payload starts
//   payload      tensors at the manifest offsets (relative to payload start,
//                each 64-byte aligned), f32 or u8, zero padding in between

#include "epgeom/core.hpp"

#include <json.hpp>

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace ep {

static_assert(std::endian::native == std::endian::little, "ADF payloads are written by memcpy and assume a little-endian host");

enum class BucketLabel : std::uint8_t { Factual = 0, Hallucination = 1, Impossible = 2 };

inline constexpr std::array<BucketLabel, 3> kAllBuckets = {BucketLabel::Factual, BucketLabel::Hallucination,
                                                           BucketLabel::Impossible};

inline const char* bucket_name(BucketLabel b) {
  switch (b) {
    case BucketLabel::Factual: return "factual";
    case BucketLabel::Hallucination: return "hallucination";
    case BucketLabel::Impossible: return "impossible";
  }
  return "?";
}

/// Which buckets form the "uncertain" class when pairing against factual.
enum class UncertainGroup { Impossible, Hallucination, Both };

inline const char* uncertain_name(UncertainGroup g) {
  switch (g) {
    case UncertainGroup::Impossible: return "impossible";
    case UncertainGroup::Hallucination: return "hallucination";
    case UncertainGroup::Both: return "both";
  }
  return "?";
}

inline UncertainGroup parse_uncertain(std::string_view s) {
  if (s == "impossible") return UncertainGroup::Impossible;
  if (s == "hallucination") return UncertainGroup::Hallucination;
  if (s == "both") return UncertainGroup::Both;
  throw ConfigError("unknown uncertain group '" + std::string(s) + "' (expected impossible|hallucination|both)");
}

inline bool is_uncertain(BucketLabel b, UncertainGroup g) {
  switch (g) {
    case UncertainGroup::Impossible: return b == BucketLabel::Impossible;
    case UncertainGroup::Hallucination: return b == BucketLabel::Hallucination;
    case UncertainGroup::Both: return b != BucketLabel::Factual;
  }
  return false;
}

enum class DType { F32, U8 };

inline std::size_t dtype_size(DType t) { return t == DType::F32 ? 4 : 1; }

struct TensorRecord {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint64_t> shape;
  std::uint64_t offset = 0;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
  }
  std::uint64_t byte_size() const { return element_count() * dtype_size(dtype); }
};

/// Final-row attention weights, N x heads x ctx, row-major.
struct AttnTensor {
  std::size_t n = 0;
  std::size_t heads = 0;
  std::size_t ctx = 0;
  std::vector<float> data;

  AttnTensor() = default;
  AttnTensor(std::size_t n_, std::size_t heads_, std::size_t ctx_)
      : n(n_), heads(heads_), ctx(ctx_), data(n_ * heads_ * ctx_, 0.0f) {}

  float& at(std::size_t i, std::size_t h, std::size_t j) { return data[(i * heads + h) * ctx + j]; }
  float at(std::size_t i, std::size_t h, std::size_t j) const { return data[(i * heads + h) * ctx + j]; }
  std::span<const float> row(std::size_t i, std::size_t h) const { return {data.data() + (i * heads + h) * ctx, ctx}; }
};

struct ActivationSet {
  std::string model_id;
  std::size_t n_layers = 0;
  std::size_t hidden_dim = 0;
  std::optional<std::size_t> vocab_size;
  std::size_t n_samples = 0;
  std::vector<BucketLabel> labels;
  std::vector<MatrixF> hidden;  // n_layers entries, N x d
  std::vector<AttnTensor> attn;  // empty or n_layers entries
  std::optional<MatrixF> unembed;  // V x d
  std::vector<MatrixF> grad_unc;  // empty or n_layers entries, N x d
  std::optional<MatrixF> embed0;  // N x d
  std::vector<MatrixF> attn_out;  // empty or n_layers entries, N x d
  std::vector<MatrixF> mlp_out;  // empty or n_layers entries, N x d
  nlohmann::json metadata = nlohmann::json::object();  // free-form, carried through the manifest

  std::size_t count(BucketLabel b) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), b));
  }
};

namespace detail {

inline bool same_bits(const MatrixF& a, const MatrixF& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

inline bool same_bits(const std::vector<MatrixF>& a, const std::vector<MatrixF>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!same_bits(a[i], b[i])) return false;
  return true;
}

inline bool same_bits(const std::optional<MatrixF>& a, const std::optional<MatrixF>& b) {
  if (a.has_value() != b.has_value()) return false;
  return !a || same_bits(*a, *b);
}

inline bool same_bits(const AttnTensor& a, const AttnTensor& b) {
  return a.n == b.n && a.heads == b.heads && a.ctx == b.ctx &&
         std::memcmp(a.data.data(), b.data.data(), sizeof(float) * a.data.size()) == 0;
}

}  // namespace detail

/// Bit-exact structural equality (floats compared by representation).
inline bool operator==(const ActivationSet& a, const ActivationSet& b) {
  if (a.model_id != b.model_id || a.n_layers != b.n_layers || a.hidden_dim != b.hidden_dim ||
      a.vocab_size != b.vocab_size || a.n_samples != b.n_samples || a.labels != b.labels ||
      a.metadata != b.metadata)
    return false;
  if (!detail::same_bits(a.hidden, b.hidden) || !detail::same_bits(a.unembed, b.unembed) ||
      !detail::same_bits(a.grad_unc, b.grad_unc) || !detail::same_bits(a.embed0, b.embed0) ||
      !detail::same_bits(a.attn_out, b.attn_out) || !detail::same_bits(a.mlp_out, b.mlp_out))
    return false;
  if (a.attn.size() != b.attn.size()) return false;
  for (std::size_t i = 0; i < a.attn.size(); ++i)
    if (!detail::same_bits(a.attn[i], b.attn[i])) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

namespace detail {

inline void check_matrix(const MatrixF& m, std::size_t rows, std::size_t cols, const std::string& name) {
  if (static_cast<std::size_t>(m.rows()) != rows || static_cast<std::size_t>(m.cols()) != cols)
    throw ValidationError("tensor '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()) + " but manifest declares " + std::to_string(rows) + "x" +
                          std::to_string(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (!std::isfinite(m.data()[i]))
      throw ValidationError("tensor '" + name + "' has non-finite value at flat index " + std::to_string(i));
}

inline void check_layers(const std::vector<MatrixF>& ms, const ActivationSet& s, const std::string& prefix) {
  if (ms.empty()) return;
  if (ms.size() != s.n_layers)
    throw ValidationError("'" + prefix + "' has " + std::to_string(ms.size()) + " layers, manifest declares " +
                          std::to_string(s.n_layers));
  for (std::size_t l = 0; l < ms.size(); ++l)
    check_matrix(ms[l], s.n_samples, s.hidden_dim, prefix + "/layer" + std::to_string(l));
}

}  // namespace detail

/// Throws ValidationError naming the first violated invariant.
inline void validate(const ActivationSet& s) {
  if (s.n_layers == 0) throw ValidationError("activation set has no layers");
  if (s.hidden_dim == 0) throw ValidationError("activation set has hidden_dim 0");
  if (s.labels.size() != s.n_samples)
    throw ValidationError("labels length " + std::to_string(s.labels.size()) + " != n_samples " +
                          std::to_string(s.n_samples));
  for (std::size_t i = 0; i < s.labels.size(); ++i)
    if (static_cast<unsigned>(s.labels[i]) > 2)
      throw ValidationError("label at index " + std::to_string(i) + " has invalid code " +
                            std::to_string(static_cast<unsigned>(s.labels[i])));
  if (s.hidden.size() != s.n_layers)
    throw ValidationError("hidden has " + std::to_string(s.hidden.size()) + " layers, manifest declares " +
                          std::to_string(s.n_layers));
  detail::check_layers(s.hidden, s, "hidden");
  detail::check_layers(s.grad_unc, s, "grad_unc");
  detail::check_layers(s.attn_out, s, "attn_out");
  detail::check_layers(s.mlp_out, s, "mlp_out");
  if (s.embed0) detail::check_matrix(*s.embed0, s.n_samples, s.hidden_dim, "embed0");
  if (s.unembed) {
    if (!s.vocab_size) throw ValidationError("unembed present but vocab_size missing");
    detail::check_matrix(*s.unembed, *s.vocab_size, s.hidden_dim, "unembed");
  }
  if (!s.attn.empty()) {
    if (s.attn.size() != s.n_layers) throw ValidationError("attn layer count does not match n_layers");
    for (std::size_t l = 0; l < s.attn.size(); ++l) {
      const auto& a = s.attn[l];
      const std::string name = "attn/layer" + std::to_string(l);
      if (a.n != s.n_samples || a.heads == 0 || a.ctx == 0 || a.data.size() != a.n * a.heads * a.ctx)
        throw ValidationError("tensor '" + name + "' has inconsistent shape");
      for (std::size_t i = 0; i < a.data.size(); ++i)
        if (!std::isfinite(a.data[i]))
          throw ValidationError("tensor '" + name + "' has non-finite value at flat index " + std::to_string(i));
    }
  }
}

// ---------------------------------------------------------------------------
// Dump writer / reader
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kAdfVersion = 1;
inline constexpr std::size_t kAdfAlign = 64;

namespace detail {

inline std::uint64_t align_up(std::uint64_t x) { return (x + kAdfAlign - 1) / kAdfAlign * kAdfAlign; }

struct PendingTensor {
  TensorRecord record;
  const void* data = nullptr;
};

inline std::vector<PendingTensor> layout(const ActivationSet& s) {
  std::vector<PendingTensor> out;
  auto add = [&](std::string name, DType t, std::vector<std::uint64_t> shape, const void* data) {
    PendingTensor p;
    p.record.name = std::move(name);
    p.record.dtype = t;
    p.record.shape = std::move(shape);
    p.data = data;
    out.push_back(std::move(p));
  };
  const std::uint64_t n = s.n_samples;
  const std::uint64_t d = s.hidden_dim;
  add("labels", DType::U8, {n}, s.labels.data());
  if (s.embed0) add("embed0", DType::F32, {n, d}, s.embed0->data());
  if (s.unembed) add("unembed", DType::F32, {*s.vocab_size, d}, s.unembed->data());
  for (std::size_t l = 0; l < s.n_layers; ++l) {
    const std::string suffix = "/layer" + std::to_string(l);
    add("hidden" + suffix, DType::F32, {n, d}, s.hidden[l].data());
    if (!s.attn.empty())
      add("attn" + suffix, DType::F32, {n, s.attn[l].heads, s.attn[l].ctx}, s.attn[l].data.data());
    if (!s.grad_unc.empty()) add("grad_unc" + suffix, DType::F32, {n, d}, s.grad_unc[l].data());
    if (!s.attn_out.empty()) add("attn_out" + suffix, DType::F32, {n, d}, s.attn_out[l].data());
    if (!s.mlp_out.empty()) add("mlp_out" + suffix, DType::F32, {n, d}, s.mlp_out[l].data());
  }
  std::uint64_t off = 0;
  for (auto& p : out) {
    p.record.offset = off;
    off = align_up(off + p.record.byte_size());
  }
  return out;
}

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

/// Serialise to the in-memory ADF1 byte image.
inline std::vector<std::uint8_t> encode_dump(const ActivationSet& s) {
  validate(s);
  const auto tensors = detail::layout(s);
  nlohmann::json manifest;
  manifest["model_id"] = s.model_id;
  manifest["n_layers"] = s.n_layers;
  manifest["hidden_dim"] = s.hidden_dim;
  if (s.vocab_size) manifest["vocab_size"] = *s.vocab_size;
  manifest["n_samples"] = s.n_samples;
  if (!s.metadata.empty()) manifest["metadata"] = s.metadata;
  auto& recs = manifest["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors)
    recs.push_back({{"name", t.record.name},
                    {"dtype", t.record.dtype == DType::F32 ? "f32" : "u8"},
                    {"shape", t.record.shape},
                    {"offset", t.record.offset}});
  const std::string header = manifest.dump();

  std::vector<std::uint8_t> bytes = {'A', 'D', 'F', '1'};
  detail::put_u32(bytes, kAdfVersion);
  detail::put_u64(bytes, header.size());
  bytes.insert(bytes.end(), header.begin(), header.end());
  const std::uint64_t payload_start = detail::align_up(bytes.size());
  std::uint64_t payload_size = 0;
  for (const auto& t : tensors) payload_size = std::max(payload_size, t.record.offset + t.record.byte_size());
  bytes.resize(payload_start + payload_size, 0);
  for (const auto& t : tensors) {
    const auto n = t.record.byte_size();
    if (n > 0) std::memcpy(bytes.data() + payload_start + t.record.offset, t.data, n);
  }
  return bytes;
}

inline void write_dump(const ActivationSet& s, const std::filesystem::path& path) {
  const auto bytes = encode_dump(s);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("write to '" + path.string() + "' failed");
}

namespace detail {

inline std::uint64_t json_index(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number_unsigned())
    throw ValidationError(std::string("manifest field '") + key + "' missing or not an unsigned integer");
  return j[key].get<std::uint64_t>();
}

inline bool parse_layer_name(const std::string& name, const std::string& prefix, std::size_t& layer) {
  const std::string head = prefix + "/layer";
  if (name.rfind(head, 0) != 0 || name.size() == head.size()) return false;
  const std::string digits = name.substr(head.size());
  if (!std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) return false;
  if (digits.size() > 1 && digits[0] == '0') return false;
  layer = std::stoull(digits);
  return true;
}

}  // namespace detail

/// Parse and validate an ADF1 byte image.
inline ActivationSet decode_dump(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "ADF1", 4) != 0) throw ValidationError("bad magic: not an ADF1 file");
  const auto version = detail::get_u32(bytes.data() + 4);
  if (version != kAdfVersion) throw ValidationError("unsupported ADF version " + std::to_string(version));
  const auto header_len = detail::get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw ValidationError("truncated file: header extends past end of file");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!m.is_object()) throw ValidationError("manifest is not a JSON object");
  const std::uint64_t payload_start = detail::align_up(16 + header_len);

  ActivationSet s;
  if (!m.contains("model_id") || !m["model_id"].is_string()) throw ValidationError("manifest field 'model_id' missing");
  s.model_id = m["model_id"].get<std::string>();
  s.n_layers = detail::json_index(m, "n_layers");
  s.hidden_dim = detail::json_index(m, "hidden_dim");
  s.n_samples = detail::json_index(m, "n_samples");
  if (m.contains("vocab_size")) s.vocab_size = detail::json_index(m, "vocab_size");
  if (m.contains("metadata")) s.metadata = m["metadata"];
  if (!m.contains("tensors") || !m["tensors"].is_array()) throw ValidationError("manifest field 'tensors' missing");

  const std::uint64_t n = s.n_samples;
  const std::uint64_t d = s.hidden_dim;
  s.hidden.resize(s.n_layers);
  std::vector<bool> have_hidden(s.n_layers, false);
  std::set<std::string> seen;
  std::map<std::string, std::vector<std::pair<std::size_t, MatrixF>>> layered;
  std::vector<std::pair<std::size_t, AttnTensor>> attn;
  bool have_labels = false;

  for (const auto& r : m["tensors"]) {
    TensorRecord rec;
    if (!r.contains("name") || !r["name"].is_string()) throw ValidationError("tensor record without name");
    rec.name = r["name"].get<std::string>();
    if (!seen.insert(rec.name).second) throw ValidationError("duplicate tensor name '" + rec.name + "'");
    const std::string dt = r.value("dtype", "");
    if (dt == "f32") rec.dtype = DType::F32;
    else if (dt == "u8") rec.dtype = DType::U8;
    else throw ValidationError("tensor '" + rec.name + "' has unknown dtype '" + dt + "'");
    if (!r.contains("shape") || !r["shape"].is_array()) throw ValidationError("tensor '" + rec.name + "' lacks shape");
    for (const auto& e : r["shape"]) {
      if (!e.is_number_unsigned()) throw ValidationError("tensor '" + rec.name + "' has a non-integer extent");
      rec.shape.push_back(e.get<std::uint64_t>());
    }
    rec.offset = detail::json_index(r, "offset");
    if (rec.offset % kAdfAlign != 0) throw ValidationError("tensor '" + rec.name + "' offset is not 64-byte aligned");
    if (payload_start + rec.offset + rec.byte_size() > bytes.size())
      throw ValidationError("truncated payload: tensor '" + rec.name + "' extends past end of file");
    const std::uint8_t* src = bytes.data() + payload_start + rec.offset;

    auto expect = [&](DType t, std::vector<std::uint64_t> shape) {
      if (rec.dtype != t) throw ValidationError("tensor '" + rec.name + "' has wrong dtype");
      if (rec.shape != shape) {
        std::string got, want;
        for (auto e : rec.shape) got += (got.empty() ? "" : "x") + std::to_string(e);
        for (auto e : shape) want += (want.empty() ? "" : "x") + std::to_string(e);
        throw ValidationError("tensor '" + rec.name + "' has shape " + got + " but manifest implies " + want);
      }
    };
    auto read_matrix = [&](std::uint64_t rows, std::uint64_t cols) {
      expect(DType::F32, {rows, cols});
      MatrixF mat(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      if (rows * cols > 0) std::memcpy(mat.data(), src, rec.byte_size());
      return mat;
    };

    std::size_t layer = 0;
    if (rec.name == "labels") {
      expect(DType::U8, {n});
      s.labels.resize(n);
      for (std::uint64_t i = 0; i < n; ++i) {
        if (src[i] > 2)
          throw ValidationError("label at index " + std::to_string(i) + " has invalid code " + std::to_string(src[i]));
        s.labels[i] = static_cast<BucketLabel>(src[i]);
      }
      have_labels = true;
    } else if (rec.name == "embed0") {
      s.embed0 = read_matrix(n, d);
    } else if (rec.name == "unembed") {
      if (!s.vocab_size) throw ValidationError("tensor 'unembed' present but manifest lacks vocab_size");
      s.unembed = read_matrix(*s.vocab_size, d);
    } else if (detail::parse_layer_name(rec.name, "attn", layer)) {
      if (layer >= s.n_layers) throw ValidationError("tensor '" + rec.name + "' exceeds n_layers");
      if (rec.shape.size() != 3 || rec.shape[0] != n) throw ValidationError("tensor '" + rec.name + "' has bad shape");
      expect(DType::F32, {n, rec.shape[1], rec.shape[2]});
      AttnTensor a(n, rec.shape[1], rec.shape[2]);
      if (!a.data.empty()) std::memcpy(a.data.data(), src, rec.byte_size());
      attn.emplace_back(layer, std::move(a));
    } else {
      bool matched = false;
      for (const char* prefix : {"hidden", "grad_unc", "attn_out", "mlp_out"}) {
        if (!detail::parse_layer_name(rec.name, prefix, layer)) continue;
        if (layer >= s.n_layers) throw ValidationError("tensor '" + rec.name + "' exceeds n_layers");
        MatrixF mat = read_matrix(n, d);
        if (std::string(prefix) == "hidden") {
          s.hidden[layer] = std::move(mat);
          have_hidden[layer] = true;
        } else {
          layered[prefix].emplace_back(layer, std::move(mat));
        }
        matched = true;
        break;
      }
      if (!matched) throw ValidationError("unknown tensor name '" + rec.name + "'");
    }
  }
  if (!have_labels) throw ValidationError("manifest lists no 'labels' tensor");
  for (std::size_t l = 0; l < s.n_layers; ++l)
    if (!have_hidden[l]) throw ValidationError("missing tensor 'hidden/layer" + std::to_string(l) + "'");

  auto gather = [&](const char* prefix, std::vector<MatrixF>& dst) {
    auto it = layered.find(prefix);
    if (it == layered.end()) return;
    if (it->second.size() != s.n_layers)
      throw ValidationError(std::string("'") + prefix + "' tensors present for only some layers");
    dst.resize(s.n_layers);
    for (auto& [l, mat] : it->second) dst[l] = std::move(mat);
  };
  gather("grad_unc", s.grad_unc);
  gather("attn_out", s.attn_out);
  gather("mlp_out", s.mlp_out);
  if (!attn.empty()) {
    if (attn.size() != s.n_layers) throw ValidationError("'attn' tensors present for only some layers");
    s.attn.resize(s.n_layers);
    for (auto& [l, a] : attn) s.attn[l] = std::move(a);
  }
  validate(s);
  return s;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline ActivationSet load_dump(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return decode_dump(bytes);
}

// ---------------------------------------------------------------------------
// Class selection
// ---------------------------------------------------------------------------

/// Thrown when a requested class has no samples; callers decide whether that
/// is an error or an absent result.
class EmptyBucket : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

inline std::vector<std::size_t> indices_where(const ActivationSet& s, auto&& pred) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < s.labels.size(); ++i)
    if (pred(s.labels[i])) idx.push_back(i);
  return idx;
}

inline Matrix gather_rows(const MatrixF& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(rows[r])).cast<double>();
  return out;
}

/// Rows of hidden[layer] whose label equals `bucket`, in original order.
inline Matrix select(const ActivationSet& s, std::size_t layer, BucketLabel bucket) {
  if (layer >= s.n_layers)
    throw ValidationError("layer " + std::to_string(layer) + " out of range (n_layers " + std::to_string(s.n_layers) + ")");
  const auto idx = indices_where(s, [&](BucketLabel b) { return b == bucket; });
  if (idx.empty()) throw EmptyBucket(std::string("bucket '") + bucket_name(bucket) + "' has no samples");
  return gather_rows(s.hidden[layer], idx);
}

/// Rows of hidden[layer] belonging to the uncertain group.
inline Matrix select_uncertain(const ActivationSet& s, std::size_t layer, UncertainGroup g) {
  if (layer >= s.n_layers) throw ValidationError("layer " + std::to_string(layer) + " out of range");
  const auto idx = indices_where(s, [&](BucketLabel b) { return is_uncertain(b, g); });
  if (idx.empty()) throw EmptyBucket(std::string("uncertain group '") + uncertain_name(g) + "' has no samples");
  return gather_rows(s.hidden[layer], idx);
}

}  // namespace ep
