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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "asmem/attention.hpp"
#include "asmem/key_pipeline.hpp"
#include "asmem/kmeans.hpp"
#include "asmem/tensorstore.hpp"

namespace asmem {

//! One dictionary entry: lookup key plus the aggregated attention state of
//! every query head the slot covers.
struct MemoryEntry {
  std::vector<float> key;
  std::vector<float> a;        // [heads x d_h]
  std::vector<double> log_z;   // [heads]
};

/*! Contiguous storage of the entries of one layer/slot. Key norms are
 *  cached for cosine retrieval.
 */
class EntryList {
 public:
  EntryList() = default;
  EntryList(size_t key_dim, size_t heads, size_t d_h)
      : key_dim_(key_dim), heads_(heads), d_h_(d_h) {}

  size_t size() const { return norms_.size(); }
  bool empty() const { return norms_.empty(); }
  size_t key_dim() const { return key_dim_; }
  size_t heads() const { return heads_; }
  size_t d_h() const { return d_h_; }

  void push_back(std::span<const float> key, std::span<const float> a,
                 std::span<const double> log_z) {
    require(key.size() == key_dim_ && a.size() == heads_ * d_h_ &&
                log_z.size() == heads_,
            "entry dimensions do not match the entry list");
    keys_.insert(keys_.end(), key.begin(), key.end());
    a_.insert(a_.end(), a.begin(), a.end());
    log_z_.insert(log_z_.end(), log_z.begin(), log_z.end());
    norms_.push_back(norm2(key));
  }

  void push_back(const MemoryEntry &e) { push_back(e.key, e.a, e.log_z); }

  std::span<const float> key(size_t i) const { return {keys_.data() + i * key_dim_, key_dim_}; }
  std::span<const float> a(size_t i) const {
    return {a_.data() + i * heads_ * d_h_, heads_ * d_h_};
  }
  std::span<const double> log_z(size_t i) const { return {log_z_.data() + i * heads_, heads_}; }
  double key_norm(size_t i) const { return norms_[i]; }

  AttentionState<float> head_state(size_t i, size_t head) const {
    auto row = a(i).subspan(head * d_h_, d_h_);
    return {{row.begin(), row.end()}, log_z(i)[head]};
  }

  MemoryEntry entry(size_t i) const {
    auto k = key(i), v = a(i);
    auto z = log_z(i);
    return {{k.begin(), k.end()}, {v.begin(), v.end()}, {z.begin(), z.end()}};
  }

  const std::vector<float> &keys() const { return keys_; }
  const std::vector<float> &outputs() const { return a_; }
  const std::vector<double> &log_masses() const { return log_z_; }

  void validate() const {
    for (size_t i = 0; i < size(); ++i) {
      if (!(norms_[i] > 0.0)) throw Error("entry key has zero norm");
      if (!all_finite(key(i)) || !all_finite(a(i)))
        throw Error("entry has non-finite values");
      for (double z : log_z(i))
        if (std::isnan(z) || z == std::numeric_limits<double>::infinity())
          throw Error("entry has non-finite log mass");
    }
  }

  bool operator==(const EntryList &) const = default;

 private:
  size_t key_dim_ = 0, heads_ = 0, d_h_ = 0;
  std::vector<float> keys_;
  std::vector<float> a_;
  std::vector<double> log_z_;
  std::vector<double> norms_;
};

inline double cosine(std::span<const float> q, double q_norm,
                     std::span<const float> k, double k_norm) {
  return dot(q, k) / (q_norm * k_norm);
}

struct Retrieval {
  size_t index = 0;
  double similarity = 0.0;
  size_t ops = 0;
};

/*! Flat scan: argmax of cosine similarity over all entries, ties to the
 *  lowest index. ops = number of similarity evaluations = size().
 */
inline Retrieval retrieve_linear(std::span<const float> query, const EntryList &entries) {
  if (entries.empty()) throw InvalidArgument("retrieve_linear: empty entry list");
  require(query.size() == entries.key_dim(), "retrieve_linear: key dimension mismatch");
  const double qn = norm2(query);
  if (!(qn > 0.0)) throw InvalidArgument("retrieve_linear: zero-norm query");
  Retrieval r;
  r.similarity = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < entries.size(); ++i) {
    const double s = cosine(query, qn, entries.key(i), entries.key_norm(i));
    if (s > r.similarity) {
      r.similarity = s;
      r.index = i;
    }
  }
  r.ops = entries.size();
  return r;
}

inline constexpr size_t kDefaultTopM = 16;

//! Two-level index: first-level keys, each owning a bucket of entry ids.
class HierarchicalIndex {
 public:
  HierarchicalIndex() = default;

  /*! Builds an index from an explicit partition. Buckets must be nonempty
   *  and together contain every id in [0, n_entries) exactly once.
   */
  static HierarchicalIndex from_partition(size_t key_dim, std::vector<float> l1_keys,
                                          const std::vector<std::vector<uint32_t>> &buckets,
                                          size_t n_entries, size_t top_m) {
    HierarchicalIndex h;
    h.key_dim_ = key_dim;
    require(key_dim > 0 && l1_keys.size() == buckets.size() * key_dim,
            "hierarchical index: l1 key shape mismatch");
    h.l1_keys_ = std::move(l1_keys);
    h.offsets_.push_back(0);
    std::vector<bool> seen(n_entries, false);
    for (const auto &b : buckets) {
      require(!b.empty(), "hierarchical index: empty bucket");
      for (uint32_t id : b) {
        require(id < n_entries && !seen[id],
                "hierarchical index: buckets do not partition the entries");
        seen[id] = true;
        h.members_.push_back(id);
      }
      h.offsets_.push_back(static_cast<uint32_t>(h.members_.size()));
    }
    require(h.members_.size() == n_entries,
            "hierarchical index: buckets do not partition the entries");
    h.finish(top_m);
    return h;
  }

  size_t n_l1() const { return offsets_.empty() ? 0 : offsets_.size() - 1; }
  size_t key_dim() const { return key_dim_; }
  size_t top_m() const { return top_m_; }
  size_t n_entries() const { return members_.size(); }

  void set_top_m(size_t m) {
    require(m >= 1 && m <= n_l1(), "top_m must satisfy 1 <= top_m <= n_l1");
    top_m_ = m;
  }

  std::span<const float> l1_key(size_t b) const { return {l1_keys_.data() + b * key_dim_, key_dim_}; }
  double l1_norm(size_t b) const { return l1_norms_[b]; }
  std::span<const uint32_t> bucket(size_t b) const {
    return {members_.data() + offsets_[b], offsets_[b + 1] - offsets_[b]};
  }

  const std::vector<float> &l1_keys() const { return l1_keys_; }
  const std::vector<uint32_t> &offsets() const { return offsets_; }
  const std::vector<uint32_t> &members() const { return members_; }

  bool operator==(const HierarchicalIndex &) const = default;

  //! Rebuilds from serialized arrays (validates the partition).
  static HierarchicalIndex from_arrays(size_t key_dim, std::vector<float> l1_keys,
                                       const std::vector<uint32_t> &offsets,
                                       const std::vector<uint32_t> &members,
                                       size_t top_m) {
    if (offsets.empty() || offsets.front() != 0 || offsets.back() != members.size())
      throw Error("hierarchical index: malformed bucket offsets");
    std::vector<std::vector<uint32_t>> buckets;
    for (size_t b = 0; b + 1 < offsets.size(); ++b) {
      if (offsets[b + 1] < offsets[b])
        throw Error("hierarchical index: malformed bucket offsets");
      buckets.emplace_back(members.begin() + offsets[b], members.begin() + offsets[b + 1]);
    }
    return from_partition(key_dim, std::move(l1_keys), buckets, members.size(), top_m);
  }

 private:
  void finish(size_t top_m) {
    l1_norms_.clear();
    for (size_t b = 0; b < n_l1(); ++b) {
      l1_norms_.push_back(norm2(l1_key(b)));
      require(l1_norms_.back() > 0.0, "hierarchical index: zero-norm first-level key");
    }
    set_top_m(std::min(top_m, n_l1()));
  }

  size_t key_dim_ = 0;
  size_t top_m_ = 1;
  std::vector<float> l1_keys_;
  std::vector<double> l1_norms_;
  std::vector<uint32_t> offsets_;
  std::vector<uint32_t> members_;
};

/*! Clusters the entry keys into n_l1 first-level buckets with the same
 *  spherical k-means used for calibration (full batch). Buckets that end
 *  empty are dropped, so the index may hold fewer than n_l1 buckets when
 *  keys repeat.
 */
inline HierarchicalIndex build_hier_index(const EntryList &entries, size_t n_l1,
                                          uint64_t seed, size_t top_m = kDefaultTopM,
                                          size_t iterations = 20) {
  require(n_l1 >= 1, "n_l1 must be >= 1");
  if (n_l1 > entries.size())
    throw InvalidArgument("n_l1 (" + std::to_string(n_l1) + ") exceeds entry count (" +
                          std::to_string(entries.size()) + ")");
  ClusterSpec spec;
  spec.k = n_l1;
  spec.iterations = iterations;
  spec.batch_size = entries.size();
  spec.seed = seed;
  auto km = spherical_kmeans(RowView<float>(entries.keys(), entries.key_dim()), spec);
  std::vector<float> l1(km.centroids.begin(), km.centroids.end());
  return HierarchicalIndex::from_partition(entries.key_dim(), std::move(l1), km.members,
                                           entries.size(), top_m);
}

/*! Two-level retrieval: score all first-level keys, expand the top_m
 *  buckets (ties to the lowest bucket), scan their members. The best
 *  entry is chosen with ties to the lowest entry id, so with
 *  top_m = n_l1 the result equals retrieve_linear().
 *  ops = n_l1 + number of scanned entries.
 */
inline Retrieval retrieve_hier(std::span<const float> query, const HierarchicalIndex &index,
                               const EntryList &entries, size_t top_m) {
  require(index.n_entries() == entries.size(), "retrieve_hier: index/entry mismatch");
  require(query.size() == entries.key_dim(), "retrieve_hier: key dimension mismatch");
  require(top_m >= 1 && top_m <= index.n_l1(), "retrieve_hier: invalid top_m");
  const double qn = norm2(query);
  if (!(qn > 0.0)) throw InvalidArgument("retrieve_hier: zero-norm query");

  const size_t n_l1 = index.n_l1();
  std::vector<std::pair<double, uint32_t>> l1(n_l1);
  for (size_t b = 0; b < n_l1; ++b)
    l1[b] = {cosine(query, qn, index.l1_key(b), index.l1_norm(b)), static_cast<uint32_t>(b)};
  auto better = [](const auto &x, const auto &y) {
    return x.first > y.first || (x.first == y.first && x.second < y.second);
  };
  std::partial_sort(l1.begin(), l1.begin() + static_cast<std::ptrdiff_t>(top_m), l1.end(),
                    better);

  Retrieval r;
  r.ops = n_l1;
  r.similarity = -std::numeric_limits<double>::infinity();
  bool found = false;
  for (size_t t = 0; t < top_m; ++t) {
    for (uint32_t id : index.bucket(l1[t].second)) {
      const double s = cosine(query, qn, entries.key(id), entries.key_norm(id));
      ++r.ops;
      if (!found || s > r.similarity || (s == r.similarity && id < r.index)) {
        r.similarity = s;
        r.index = id;
        found = true;
      }
    }
  }
  if (!found) throw Error("retrieve_hier: empty scanned union");
  return r;
}

inline Retrieval retrieve_hier(std::span<const float> query, const HierarchicalIndex &index,
                               const EntryList &entries) {
  return retrieve_hier(query, index, entries, index.top_m());
}

/*! Entries of one layer for one KV group (individual organisation) or for
 *  all groups (joint organisation), plus an optional two-level index.
 */
struct BankSlot {
  EntryList entries;
  std::optional<HierarchicalIndex> hier;

  Retrieval retrieve(std::span<const float> query, bool use_hier) const {
    if (use_hier) {
      if (!hier) throw InvalidArgument("bank has no hierarchical index");
      return retrieve_hier(query, *hier, entries);
    }
    return retrieve_linear(query, entries);
  }

  bool operator==(const BankSlot &) const = default;
};

struct MemoryBank {
  ModelGeometry geometry;
  size_t prefix_len = 0;
  KeyMode mode;
  std::optional<WhiteningTransform> whitening;
  size_t d_prime = 0;
  size_t k = 0;
  uint64_t seed = 0;
  CentroidOrg centroid_org = CentroidOrg::individual;
  std::vector<std::vector<BankSlot>> layers;  // [layer][slot]

  size_t n_slots() const { return slot_count(geometry, centroid_org); }
  size_t heads_per_slot() const { return slot_heads(geometry, centroid_org); }
  size_t key_dim() const {
    return centroid_org == CentroidOrg::individual ? d_prime : geometry.h_kv * d_prime;
  }
  bool has_hier() const {
    return !layers.empty() && !layers[0].empty() && layers[0][0].hier.has_value();
  }

  const BankSlot &slot(size_t layer, size_t s) const { return layers.at(layer).at(s); }

  LookupKeys lookup_keys(std::span<const float> pre_rope_q, size_t layer) const {
    return make_lookup_keys(pre_rope_q, mode, whitening ? &*whitening : nullptr, layer,
                            geometry, d_prime, centroid_org);
  }

  void validate() const {
    geometry.validate();
    check_d_prime(geometry, d_prime);
    if (mode.whitening != whitening.has_value())
      throw Error("whitening transform must be present iff mode.whitening");
    if (whitening && (whitening->n_layers != geometry.n_layers ||
                      whitening->n_heads != geometry.h_q || whitening->d_h != geometry.d_h ||
                      whitening->matrices.size() !=
                          geometry.n_layers * geometry.h_q * geometry.d_h * geometry.d_h))
      throw Error("whitening transform does not match geometry");
    if (layers.size() != geometry.n_layers) throw Error("bank layer count mismatch");
    const bool hier0 = has_hier();
    for (const auto &layer : layers) {
      if (layer.size() != n_slots()) throw Error("bank slot count mismatch");
      for (const auto &s : layer) {
        if (s.entries.empty()) throw Error("bank has an empty layer/slot");
        if (s.entries.size() > k) throw Error("bank slot holds more than k entries");
        if (s.entries.key_dim() != key_dim() || s.entries.heads() != heads_per_slot() ||
            s.entries.d_h() != geometry.d_h)
          throw Error("bank entry dimensions do not match metadata");
        if (s.hier.has_value() != hier0)
          throw Error("hierarchical index present on some slots only");
        if (s.hier && s.hier->n_entries() != s.entries.size())
          throw Error("hierarchical index does not cover the entries");
        s.entries.validate();
      }
    }
  }

  bool operator==(const MemoryBank &) const = default;
};

inline std::string slot_tensor(size_t layer, size_t slot, std::string_view field) {
  return "layer" + std::to_string(layer) + ".slot" + std::to_string(slot) + "." +
         std::string(field);
}

inline TensorFile bank_to_tensor_file(const MemoryBank &bank) {
  bank.validate();
  TensorFile f;
  auto &m = f.metadata;
  bank.geometry.to_metadata(m);
  m["kind"] = "bank";
  m["format_version"] = std::to_string(kFormatVersion);
  m["prefix_len"] = std::to_string(bank.prefix_len);
  m["key_mode"] = to_string(bank.mode.rope);
  m["whitening"] = bank.mode.whitening ? "1" : "0";
  m["virtual_position"] = std::to_string(bank.mode.virtual_position);
  {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), bank.mode.theta_base);
    m["theta_base"] = std::string(buf, p);
  }
  m["d_prime"] = std::to_string(bank.d_prime);
  m["k"] = std::to_string(bank.k);
  m["seed"] = std::to_string(bank.seed);
  m["centroid_org"] = to_string(bank.centroid_org);
  m["hier"] = bank.has_hier() ? "1" : "0";
  if (bank.has_hier()) m["top_m"] = std::to_string(bank.layers[0][0].hier->top_m());

  const uint64_t heads = bank.heads_per_slot(), dh = bank.geometry.d_h;
  for (size_t l = 0; l < bank.layers.size(); ++l) {
    for (size_t s = 0; s < bank.layers[l].size(); ++s) {
      const auto &slot = bank.layers[l][s];
      const uint64_t n = slot.entries.size();
      f.tensors.push_back(Tensor::from(slot_tensor(l, s, "keys"), {n, bank.key_dim()},
                                       slot.entries.keys()));
      f.tensors.push_back(Tensor::from(slot_tensor(l, s, "a"), {n, heads, dh},
                                       slot.entries.outputs()));
      f.tensors.push_back(Tensor::from(slot_tensor(l, s, "log_z"), {n, heads},
                                       slot.entries.log_masses()));
      if (slot.hier) {
        const auto &h = *slot.hier;
        f.tensors.push_back(Tensor::from(slot_tensor(l, s, "l1_keys"),
                                         {h.n_l1(), h.key_dim()}, h.l1_keys()));
        f.tensors.push_back(Tensor::from(slot_tensor(l, s, "bucket_offsets"),
                                         {h.offsets().size()}, h.offsets()));
        f.tensors.push_back(Tensor::from(slot_tensor(l, s, "bucket_members"),
                                         {h.members().size()}, h.members()));
      }
    }
  }
  if (bank.whitening) {
    const auto &g = bank.geometry;
    f.tensors.push_back(Tensor::from("whitening", {g.n_layers, g.h_q, g.d_h, g.d_h},
                                     bank.whitening->matrices));
  }
  return f;
}

inline MemoryBank bank_from_tensor_file(const TensorFile &f) {
  if (f.meta("kind") != "bank") throw Error("schema mismatch: not a bank file");
  if (f.meta_u64("format_version") != kFormatVersion)
    throw Error("version mismatch in bank file");
  MemoryBank b;
  b.geometry = ModelGeometry::from_metadata(f);
  b.prefix_len = f.meta_u64("prefix_len");
  try {
    b.mode.rope = parse_rope_mode(f.meta("key_mode"));
    b.centroid_org = parse_centroid_org(f.meta("centroid_org"));
  } catch (const InvalidArgument &e) {
    throw Error(std::string("schema mismatch: ") + e.what());
  }
  b.mode.whitening = f.meta_u64("whitening") != 0;
  b.mode.virtual_position = f.meta_u64("virtual_position");
  {
    const std::string &s = f.meta("theta_base");
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), b.mode.theta_base);
    if (ec != std::errc()) throw Error("schema mismatch: bad theta_base");
  }
  b.d_prime = f.meta_u64("d_prime");
  b.k = f.meta_u64("k");
  b.seed = f.meta_u64("seed");
  const bool hier = f.meta_u64("hier") != 0;
  const size_t top_m = hier ? f.meta_u64("top_m") : 0;
  try {
    check_d_prime(b.geometry, b.d_prime);
  } catch (const InvalidArgument &e) {
    throw Error(std::string("schema mismatch: ") + e.what());
  }

  const size_t heads = b.heads_per_slot(), dh = b.geometry.d_h, kd = b.key_dim();
  b.layers.resize(b.geometry.n_layers);
  for (size_t l = 0; l < b.geometry.n_layers; ++l) {
    for (size_t s = 0; s < b.n_slots(); ++s) {
      const Tensor &keys = f.at(slot_tensor(l, s, "keys"));
      const Tensor &a = f.at(slot_tensor(l, s, "a"));
      const Tensor &lz = f.at(slot_tensor(l, s, "log_z"));
      if (keys.shape.size() != 2 || keys.shape[1] != kd)
        throw Error("schema mismatch: '" + keys.name + "' has wrong shape");
      const uint64_t n = keys.shape[0];
      if (a.shape != std::vector<uint64_t>{n, heads, dh} ||
          lz.shape != std::vector<uint64_t>{n, heads})
        throw Error("schema mismatch: entry tensors of layer " + std::to_string(l) +
                    " disagree");
      BankSlot slot;
      slot.entries = EntryList(kd, heads, dh);
      auto kv = keys.values<float>();
      auto av = a.values<float>();
      auto zv = lz.values<double>();
      for (size_t i = 0; i < n; ++i)
        slot.entries.push_back(std::span<const float>(kv).subspan(i * kd, kd),
                               std::span<const float>(av).subspan(i * heads * dh, heads * dh),
                               std::span<const double>(zv).subspan(i * heads, heads));
      if (hier) {
        const Tensor &l1 = f.at(slot_tensor(l, s, "l1_keys"));
        if (l1.shape.size() != 2 || l1.shape[1] != kd)
          throw Error("schema mismatch: '" + l1.name + "' has wrong shape");
        try {
          slot.hier = HierarchicalIndex::from_arrays(
              kd, l1.values<float>(), f.at(slot_tensor(l, s, "bucket_offsets")).values<uint32_t>(),
              f.at(slot_tensor(l, s, "bucket_members")).values<uint32_t>(), top_m);
        } catch (const InvalidArgument &e) {
          throw Error(std::string("schema mismatch: ") + e.what());
        }
      }
      b.layers[l].push_back(std::move(slot));
    }
  }
  if (const Tensor *w = f.find("whitening")) {
    const auto &g = b.geometry;
    if (w->shape != std::vector<uint64_t>{g.n_layers, g.h_q, g.d_h, g.d_h})
      throw Error("schema mismatch: whitening tensor has wrong shape");
    WhiteningTransform wt{g.n_layers, g.h_q, g.d_h, w->values<double>()};
    b.whitening = std::move(wt);
  }
  if (b.mode.whitening && !b.whitening)
    throw Error("schema mismatch: bank declares whitening but has no transform");
  b.validate();
  return b;
}

inline std::vector<std::byte> serialize_bank(const MemoryBank &bank) {
  return encode_tensor_file(bank_to_tensor_file(bank));
}

inline MemoryBank deserialize_bank(std::span<const std::byte> bytes) {
  return bank_from_tensor_file(decode_tensor_file(bytes));
}

inline void save_bank(const std::string &path, const MemoryBank &bank) {
  write_tensor_file(path, bank_to_tensor_file(bank));
}

inline MemoryBank load_bank(const std::string &path) {
  return bank_from_tensor_file(read_tensor_file(path));
}

}  // namespace asmem
