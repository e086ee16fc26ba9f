// Copyright 2026-present the asmem project
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#pragma once

// Binary tensor container.
//
// Layout (all integers little-endian):
//
//   magic        8 bytes  "ASMTENS\0"
//   version      u32      (= 1)
//   meta_len     u64      byte length of the metadata block
//   metadata     meta_len bytes of UTF-8 "key=value\n" lines, keys sorted
//   n_tensors    u64
//   per tensor:
//     name_len   u32, name bytes
//     dtype      u8       (0 = f32, 1 = f64, 2 = u32)
//     ndim       u32
//     dims       ndim x u64
//     data       product(dims) x sizeof(dtype) bytes, row-major

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "asmem/common.hpp"

namespace asmem {

inline constexpr std::array<char, 8> kTensorMagic = {'A', 'S', 'M', 'T',
                                                     'E', 'N', 'S', '\0'};
inline constexpr uint32_t kFormatVersion = 1;

enum class DType : uint8_t { f32 = 0, f64 = 1, u32 = 2 };

inline size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u32: return 4;
  }
  throw Error("unknown dtype");
}

template <typename T>
constexpr DType dtype_of();
template <> constexpr DType dtype_of<float>() { return DType::f32; }
template <> constexpr DType dtype_of<double>() { return DType::f64; }
template <> constexpr DType dtype_of<uint32_t>() { return DType::u32; }

namespace detail {

template <typename T>
void store_le(std::vector<std::byte> &out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<std::byte, sizeof(T)> raw;
  std::memcpy(raw.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    std::reverse(raw.begin(), raw.end());
  out.insert(out.end(), raw.begin(), raw.end());
}

template <typename T>
T load_le(const std::byte *p) {
  std::array<std::byte, sizeof(T)> raw;
  std::memcpy(raw.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    std::reverse(raw.begin(), raw.end());
  T v;
  std::memcpy(&v, raw.data(), sizeof(T));
  return v;
}

class Reader {
 public:
  explicit Reader(std::span<const std::byte> buf) : buf_(buf) {}

  template <typename T>
  T take() {
    need(sizeof(T));
    T v = load_le<T>(buf_.data() + pos_);
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::byte> bytes(uint64_t n) {
    need(n);
    auto s = buf_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(uint64_t n) const {
    if (n > buf_.size() - pos_) throw Error("truncated data");
  }

  std::span<const std::byte> buf_;
  size_t pos_ = 0;
};

}  // namespace detail

/*! One named, typed, row-major tensor. Data is held as little-endian bytes
 *  exactly as stored on disk.
 */
struct Tensor {
  std::string name;
  DType dtype = DType::f32;
  std::vector<uint64_t> shape;
  std::vector<std::byte> data;

  uint64_t numel() const {
    uint64_t n = 1;
    for (uint64_t d : shape) n *= d;
    return n;
  }

  template <typename T>
  static Tensor from(std::string name, std::vector<uint64_t> shape,
                     std::span<const T> values) {
    Tensor t;
    t.name = std::move(name);
    t.dtype = dtype_of<T>();
    t.shape = std::move(shape);
    if (t.numel() != values.size())
      throw InvalidArgument("shape/data mismatch for tensor '" + t.name + "'");
    t.data.reserve(values.size() * sizeof(T));
    for (const T &v : values) detail::store_le(t.data, v);
    return t;
  }

  template <typename T>
  static Tensor from(std::string name, std::vector<uint64_t> shape,
                     const std::vector<T> &values) {
    return from<T>(std::move(name), std::move(shape), std::span<const T>(values));
  }

  template <typename T>
  std::vector<T> values() const {
    if (dtype != dtype_of<T>())
      throw Error("tensor '" + name + "' has unexpected dtype");
    std::vector<T> out(data.size() / sizeof(T));
    for (size_t i = 0; i < out.size(); ++i)
      out[i] = detail::load_le<T>(data.data() + i * sizeof(T));
    return out;
  }
};

using Metadata = std::map<std::string, std::string>;

struct TensorFile {
  Metadata metadata;
  std::vector<Tensor> tensors;

  const Tensor *find(std::string_view name) const {
    for (const auto &t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  const Tensor &at(std::string_view name) const {
    const Tensor *t = find(name);
    if (!t) throw Error("missing required tensor '" + std::string(name) + "'");
    return *t;
  }

  const std::string &meta(const std::string &key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) throw Error("missing metadata key '" + key + "'");
    return it->second;
  }

  uint64_t meta_u64(const std::string &key) const {
    const std::string &s = meta(key);
    uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw Error("metadata key '" + key + "' is not an unsigned integer");
    return v;
  }
};

inline std::vector<std::byte> encode_tensor_file(const TensorFile &file) {
  std::set<std::string_view> names;
  for (const auto &t : file.tensors) {
    if (!names.insert(t.name).second)
      throw InvalidArgument("duplicate tensor name '" + t.name + "'");
    if (t.numel() * dtype_size(t.dtype) != t.data.size())
      throw InvalidArgument("shape/data mismatch for tensor '" + t.name + "'");
  }

  std::string meta;
  for (const auto &[k, v] : file.metadata) {
    if (k.empty() || k.find_first_of("=\n") != std::string::npos ||
        v.find('\n') != std::string::npos)
      throw InvalidArgument("invalid metadata entry '" + k + "'");
    meta += k;
    meta += '=';
    meta += v;
    meta += '\n';
  }

  std::vector<std::byte> out;
  for (char c : kTensorMagic) out.push_back(static_cast<std::byte>(c));
  detail::store_le<uint32_t>(out, kFormatVersion);
  detail::store_le<uint64_t>(out, meta.size());
  for (char c : meta) out.push_back(static_cast<std::byte>(c));
  detail::store_le<uint64_t>(out, file.tensors.size());
  for (const auto &t : file.tensors) {
    detail::store_le<uint32_t>(out, static_cast<uint32_t>(t.name.size()));
    for (char c : t.name) out.push_back(static_cast<std::byte>(c));
    detail::store_le<uint8_t>(out, static_cast<uint8_t>(t.dtype));
    detail::store_le<uint32_t>(out, static_cast<uint32_t>(t.shape.size()));
    for (uint64_t d : t.shape) detail::store_le<uint64_t>(out, d);
    out.insert(out.end(), t.data.begin(), t.data.end());
  }
  return out;
}

inline TensorFile decode_tensor_file(std::span<const std::byte> buf) {
  detail::Reader r(buf);
  if (buf.size() < kTensorMagic.size() ||
      std::memcmp(buf.data(), kTensorMagic.data(), kTensorMagic.size()) != 0)
    throw Error("bad magic");
  r.bytes(kTensorMagic.size());
  const auto version = r.take<uint32_t>();
  if (version != kFormatVersion)
    throw Error("unsupported version " + std::to_string(version));

  TensorFile file;
  const auto meta_len = r.take<uint64_t>();
  auto meta = r.bytes(meta_len);
  std::string_view text(reinterpret_cast<const char *>(meta.data()), meta.size());
  while (!text.empty()) {
    const size_t nl = text.find('\n');
    if (nl == std::string_view::npos) throw Error("malformed metadata block");
    std::string_view line = text.substr(0, nl);
    const size_t eq = line.find('=');
    if (eq == std::string_view::npos || eq == 0)
      throw Error("malformed metadata line");
    file.metadata.emplace(std::string(line.substr(0, eq)),
                          std::string(line.substr(eq + 1)));
    text.remove_prefix(nl + 1);
  }

  const auto n_tensors = r.take<uint64_t>();
  std::set<std::string> names;
  for (uint64_t i = 0; i < n_tensors; ++i) {
    Tensor t;
    const auto name_len = r.take<uint32_t>();
    auto name = r.bytes(name_len);
    t.name.assign(reinterpret_cast<const char *>(name.data()), name.size());
    if (!names.insert(t.name).second)
      throw Error("duplicate tensor name '" + t.name + "'");
    const auto dt = r.take<uint8_t>();
    if (dt > static_cast<uint8_t>(DType::u32)) throw Error("unknown dtype");
    t.dtype = static_cast<DType>(dt);
    const auto ndim = r.take<uint32_t>();
    uint64_t bytes = dtype_size(t.dtype);
    for (uint32_t d = 0; d < ndim; ++d) {
      const auto dim = r.take<uint64_t>();
      if (dim != 0 && bytes > std::numeric_limits<uint64_t>::max() / dim)
        throw Error("dims overflow");
      bytes *= dim;
      t.shape.push_back(dim);
    }
    auto payload = r.bytes(bytes);
    t.data.assign(payload.begin(), payload.end());
    file.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw Error("trailing bytes after last tensor");
  return file;
}

inline void write_bytes(const std::string &path, std::span<const std::byte> bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char *>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("write failed for '" + path + "'");
}

inline std::vector<std::byte> read_bytes(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "'");
  std::vector<char> raw((std::istreambuf_iterator<char>(is)),
                        std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

inline void write_tensor_file(const std::string &path, const TensorFile &file) {
  write_bytes(path, encode_tensor_file(file));
}

inline TensorFile read_tensor_file(const std::string &path) {
  return decode_tensor_file(read_bytes(path));
}

// ---------------------------------------------------------------------------
// Model geometry and calibration traces
// ---------------------------------------------------------------------------

struct ModelGeometry {
  size_t n_layers = 1;
  size_t h_q = 1;
  size_t h_kv = 1;
  size_t d_h = 1;

  size_t group_size() const { return h_q / h_kv; }

  void validate() const {
    require(n_layers >= 1 && h_q >= 1 && h_kv >= 1 && d_h >= 1,
            "geometry counts must be >= 1");
    require(h_q % h_kv == 0, "h_q must be divisible by h_kv");
  }

  bool operator==(const ModelGeometry &) const = default;

  void to_metadata(Metadata &m) const {
    m["n_layers"] = std::to_string(n_layers);
    m["h_q"] = std::to_string(h_q);
    m["h_kv"] = std::to_string(h_kv);
    m["d_h"] = std::to_string(d_h);
  }

  static ModelGeometry from_metadata(const TensorFile &f) {
    ModelGeometry g;
    g.n_layers = f.meta_u64("n_layers");
    g.h_q = f.meta_u64("h_q");
    g.h_kv = f.meta_u64("h_kv");
    g.d_h = f.meta_u64("d_h");
    try {
      g.validate();
    } catch (const InvalidArgument &e) {
      throw Error(std::string("geometry inconsistency: ") + e.what());
    }
    return g;
  }
};

//! Recorded response-token queries and their prefix attention states for
//! one layer. Row-major [n_tokens x h_q x d_h] (log_z: [n_tokens x h_q]).
struct LayerTrace {
  std::vector<float> pre_rope_q;
  std::vector<float> rope_q;
  std::vector<float> attn_out;
  std::vector<double> log_z;
};

struct TraceSet {
  ModelGeometry geometry;
  size_t prefix_len = 0;
  size_t n_tokens = 0;
  std::vector<LayerTrace> layers;

  std::span<const float> pre_rope_q(size_t layer, size_t token) const {
    return row(layers[layer].pre_rope_q, token);
  }
  std::span<const float> rope_q(size_t layer, size_t token) const {
    return row(layers[layer].rope_q, token);
  }
  std::span<const float> attn_out(size_t layer, size_t token) const {
    return row(layers[layer].attn_out, token);
  }
  std::span<const double> log_z(size_t layer, size_t token) const {
    return std::span<const double>(layers[layer].log_z)
        .subspan(token * geometry.h_q, geometry.h_q);
  }

  //! Checks shape consistency and finiteness; throws Error on violation.
  void validate() const {
    geometry.validate();
    if (layers.size() != geometry.n_layers)
      throw Error("geometry inconsistency: layer count mismatch");
    const size_t row_len = n_tokens * geometry.h_q * geometry.d_h;
    for (const auto &l : layers) {
      if (l.pre_rope_q.size() != row_len || l.rope_q.size() != row_len ||
          l.attn_out.size() != row_len ||
          l.log_z.size() != n_tokens * geometry.h_q)
        throw Error("geometry inconsistency: record counts differ across layers");
      if (!all_finite<float>(l.pre_rope_q) || !all_finite<float>(l.rope_q) ||
          !all_finite<float>(l.attn_out) || !all_finite<double>(l.log_z))
        throw Error("non-finite values in trace");
    }
  }

 private:
  std::span<const float> row(const std::vector<float> &v, size_t token) const {
    const size_t w = geometry.h_q * geometry.d_h;
    return std::span<const float>(v).subspan(token * w, w);
  }
};

inline std::string layer_tensor(size_t layer, std::string_view field) {
  return "layer" + std::to_string(layer) + "." + std::string(field);
}

inline TensorFile trace_to_tensor_file(const TraceSet &ts) {
  ts.validate();
  TensorFile f;
  ts.geometry.to_metadata(f.metadata);
  f.metadata["prefix_len"] = std::to_string(ts.prefix_len);
  f.metadata["format_version"] = std::to_string(kFormatVersion);
  f.metadata["kind"] = "trace";
  const auto &g = ts.geometry;
  const std::vector<uint64_t> qshape = {ts.n_tokens, g.h_q, g.d_h};
  const std::vector<uint64_t> zshape = {ts.n_tokens, g.h_q};
  for (size_t l = 0; l < g.n_layers; ++l) {
    const auto &lt = ts.layers[l];
    f.tensors.push_back(Tensor::from(layer_tensor(l, "pre_rope_q"), qshape, lt.pre_rope_q));
    f.tensors.push_back(Tensor::from(layer_tensor(l, "rope_q"), qshape, lt.rope_q));
    f.tensors.push_back(Tensor::from(layer_tensor(l, "attn_out"), qshape, lt.attn_out));
    f.tensors.push_back(Tensor::from(layer_tensor(l, "log_z"), zshape, lt.log_z));
  }
  return f;
}

inline TraceSet trace_from_tensor_file(const TensorFile &f) {
  TraceSet ts;
  ts.geometry = ModelGeometry::from_metadata(f);
  ts.prefix_len = f.meta_u64("prefix_len");
  const auto &g = ts.geometry;

  auto check_shape = [](const Tensor &t, std::vector<uint64_t> expect) {
    if (t.shape != expect)
      throw Error("geometry inconsistency: tensor '" + t.name + "' has wrong shape");
  };
  auto floats = [](const Tensor &t) {
    // log_z may be stored as f32 by foreign writers; widen on load.
    return t.values<float>();
  };

  for (size_t l = 0; l < g.n_layers; ++l) {
    const Tensor &pre = f.at(layer_tensor(l, "pre_rope_q"));
    const Tensor &rope = f.at(layer_tensor(l, "rope_q"));
    const Tensor &out = f.at(layer_tensor(l, "attn_out"));
    const Tensor &lz = f.at(layer_tensor(l, "log_z"));
    if (pre.shape.size() != 3)
      throw Error("geometry inconsistency: tensor '" + pre.name + "' has wrong rank");
    if (l == 0) ts.n_tokens = pre.shape[0];
    const std::vector<uint64_t> qshape = {ts.n_tokens, g.h_q, g.d_h};
    check_shape(pre, qshape);
    check_shape(rope, qshape);
    check_shape(out, qshape);
    check_shape(lz, {ts.n_tokens, g.h_q});

    LayerTrace lt;
    lt.pre_rope_q = floats(pre);
    lt.rope_q = floats(rope);
    lt.attn_out = floats(out);
    if (lz.dtype == DType::f64) {
      lt.log_z = lz.values<double>();
    } else {
      auto v = lz.values<float>();
      lt.log_z.assign(v.begin(), v.end());
    }
    ts.layers.push_back(std::move(lt));
  }
  ts.validate();
  return ts;
}

inline TraceSet load_trace_set(const std::string &path) {
  return trace_from_tensor_file(read_tensor_file(path));
}

inline void save_trace_set(const std::string &path, const TraceSet &ts) {
  write_tensor_file(path, trace_to_tensor_file(ts));
}

}  // namespace asmem
