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

// Online path: lookup, retrieval and merge of the retrieved prefix state
// with self-attention over the non-prefix tokens.

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <vector>

#include "asmem/attention.hpp"
#include "asmem/memory_bank.hpp"
#include "asmem/tensorstore.hpp"

namespace asmem {

struct LayerRequest {
  std::vector<float> pre_rope_q;  // [n_tokens x h_q x d_h]
  std::vector<float> rope_q;      // [n_tokens x h_q x d_h], attention query
  std::vector<float> local_k;     // [n_local x h_kv x d_h]
  std::vector<float> local_v;     // [n_local x h_kv x d_h]
};

/*! Queries of the user tokens plus the key/value block of all non-prefix
 *  tokens. Token t attends to the first n_visible[t] local positions.
 */
struct InferenceRequest {
  ModelGeometry geometry;
  size_t n_tokens = 0;
  size_t n_local = 0;
  std::vector<uint32_t> n_visible;
  std::vector<LayerRequest> layers;

  std::span<const float> pre_rope_q(size_t l, size_t t) const {
    const size_t w = geometry.h_q * geometry.d_h;
    return std::span<const float>(layers[l].pre_rope_q).subspan(t * w, w);
  }
  std::span<const float> rope_q(size_t l, size_t t, size_t head) const {
    const size_t w = geometry.h_q * geometry.d_h;
    return std::span<const float>(layers[l].rope_q).subspan(t * w + head * geometry.d_h,
                                                            geometry.d_h);
  }
  RowView<float> local_keys(size_t l, size_t kv_head, size_t rows) const {
    const size_t stride = geometry.h_kv * geometry.d_h;
    return {layers[l].local_k.data() + kv_head * geometry.d_h, rows, geometry.d_h, stride};
  }
  RowView<float> local_values(size_t l, size_t kv_head, size_t rows) const {
    const size_t stride = geometry.h_kv * geometry.d_h;
    return {layers[l].local_v.data() + kv_head * geometry.d_h, rows, geometry.d_h, stride};
  }

  void validate() const {
    geometry.validate();
    const size_t qlen = n_tokens * geometry.h_q * geometry.d_h;
    const size_t kvlen = n_local * geometry.h_kv * geometry.d_h;
    if (layers.size() != geometry.n_layers) throw Error("request layer count mismatch");
    if (n_visible.size() != n_tokens) throw Error("request n_visible length mismatch");
    for (uint32_t v : n_visible)
      if (v > n_local) throw Error("request n_visible exceeds the local block");
    for (const auto &l : layers) {
      if (l.pre_rope_q.size() != qlen || l.rope_q.size() != qlen ||
          l.local_k.size() != kvlen || l.local_v.size() != kvlen)
        throw Error("request tensors do not match geometry");
      if (!all_finite<float>(l.pre_rope_q) || !all_finite<float>(l.rope_q) ||
          !all_finite<float>(l.local_k) || !all_finite<float>(l.local_v))
        throw Error("non-finite values in request");
    }
  }
};

/*! Request whose user tokens are the trace tokens, with the given local
 *  block (per layer [n_local x h_kv x d_h]) fully visible to every token.
 */
inline InferenceRequest request_from_trace(const TraceSet &ts,
                                           const std::vector<std::vector<float>> &local_k,
                                           const std::vector<std::vector<float>> &local_v,
                                           size_t n_local) {
  InferenceRequest r;
  r.geometry = ts.geometry;
  r.n_tokens = ts.n_tokens;
  r.n_local = n_local;
  r.n_visible.assign(ts.n_tokens, static_cast<uint32_t>(n_local));
  for (size_t l = 0; l < ts.geometry.n_layers; ++l)
    r.layers.push_back({ts.layers[l].pre_rope_q, ts.layers[l].rope_q,
                        n_local ? local_k.at(l) : std::vector<float>{},
                        n_local ? local_v.at(l) : std::vector<float>{}});
  r.validate();
  return r;
}

inline TensorFile request_to_tensor_file(const InferenceRequest &r, TensorFile f = {}) {
  r.validate();
  r.geometry.to_metadata(f.metadata);
  f.metadata["format_version"] = std::to_string(kFormatVersion);
  f.metadata["n_local"] = std::to_string(r.n_local);
  if (!f.metadata.count("kind")) f.metadata["kind"] = "request";
  const auto &g = r.geometry;
  const std::vector<uint64_t> qs = {r.n_tokens, g.h_q, g.d_h};
  const std::vector<uint64_t> kvs = {r.n_local, g.h_kv, g.d_h};
  f.tensors.push_back(Tensor::from("n_visible", {r.n_tokens}, r.n_visible));
  for (size_t l = 0; l < g.n_layers; ++l) {
    const auto &lr = r.layers[l];
    f.tensors.push_back(Tensor::from(layer_tensor(l, "pre_rope_q"), qs, lr.pre_rope_q));
    f.tensors.push_back(Tensor::from(layer_tensor(l, "rope_q"), qs, lr.rope_q));
    f.tensors.push_back(Tensor::from(layer_tensor(l, "local_k"), kvs, lr.local_k));
    f.tensors.push_back(Tensor::from(layer_tensor(l, "local_v"), kvs, lr.local_v));
  }
  return f;
}

inline InferenceRequest request_from_tensor_file(const TensorFile &f) {
  InferenceRequest r;
  r.geometry = ModelGeometry::from_metadata(f);
  r.n_local = f.meta_u64("n_local");
  r.n_visible = f.at("n_visible").values<uint32_t>();
  r.n_tokens = r.n_visible.size();
  const auto &g = r.geometry;
  for (size_t l = 0; l < g.n_layers; ++l) {
    LayerRequest lr;
    lr.pre_rope_q = f.at(layer_tensor(l, "pre_rope_q")).values<float>();
    lr.rope_q = f.at(layer_tensor(l, "rope_q")).values<float>();
    lr.local_k = f.at(layer_tensor(l, "local_k")).values<float>();
    lr.local_v = f.at(layer_tensor(l, "local_v")).values<float>();
    r.layers.push_back(std::move(lr));
  }
  r.validate();
  return r;
}

/*! Per token/layer/slot retrieval results and per token/layer/head merged
 *  states.
 */
struct MergeReport {
  size_t n_tokens = 0, n_layers = 0, n_slots = 0, h_q = 0, d_h = 0;
  std::vector<uint32_t> entry;      // [token][layer][slot]
  std::vector<double> similarity;   // [token][layer][slot]
  std::vector<uint32_t> ops;        // [token][layer][slot]
  std::vector<float> a;             // [token][layer][h_q][d_h]
  std::vector<double> log_z;        // [token][layer][h_q]
  std::vector<double> self_log_z;   // [token][layer][h_q]
  std::vector<double> entry_log_z;  // [token][layer][h_q]

  size_t slot_index(size_t t, size_t l, size_t s) const { return (t * n_layers + l) * n_slots + s; }
  size_t head_index(size_t t, size_t l, size_t h) const { return (t * n_layers + l) * h_q + h; }

  AttentionState<float> state(size_t t, size_t l, size_t h) const {
    const size_t i = head_index(t, l, h);
    return {{a.begin() + static_cast<std::ptrdiff_t>(i * d_h),
             a.begin() + static_cast<std::ptrdiff_t>((i + 1) * d_h)},
            log_z[i]};
  }

  double mean_ops() const {
    if (ops.empty()) return 0.0;
    double s = 0.0;
    for (uint32_t o : ops) s += o;
    return s / static_cast<double>(ops.size());
  }
};

/*! For every token and layer: builds the lookup keys with the bank's own
 *  pipeline, retrieves one entry per slot using the slot's first key chunk,
 *  computes self-attention over the visible local block, and merges the two
 *  states per query head.
 */
inline MergeReport infer_merge(const InferenceRequest &req, const MemoryBank &bank,
                               bool use_hier, unsigned threads = 1) {
  req.validate();
  if (!(req.geometry == bank.geometry))
    throw InvalidArgument("request geometry does not match the bank");
  const auto &g = bank.geometry;
  MergeReport rep;
  rep.n_tokens = req.n_tokens;
  rep.n_layers = g.n_layers;
  rep.n_slots = bank.n_slots();
  rep.h_q = g.h_q;
  rep.d_h = g.d_h;
  const size_t n_slot_rows = req.n_tokens * g.n_layers * rep.n_slots;
  const size_t n_head_rows = req.n_tokens * g.n_layers * g.h_q;
  rep.entry.resize(n_slot_rows);
  rep.similarity.resize(n_slot_rows);
  rep.ops.resize(n_slot_rows);
  rep.a.resize(n_head_rows * g.d_h);
  rep.log_z.resize(n_head_rows);
  rep.self_log_z.resize(n_head_rows);
  rep.entry_log_z.resize(n_head_rows);

  const size_t heads = bank.heads_per_slot();
  parallel_for(req.n_tokens, threads, [&](size_t t) {
    for (size_t l = 0; l < g.n_layers; ++l) {
      auto keys = bank.lookup_keys(req.pre_rope_q(l, t), l);
      for (size_t s = 0; s < rep.n_slots; ++s) {
        const BankSlot &slot = bank.slot(l, s);
        const Retrieval hit = slot.retrieve(keys.key(s, 0), use_hier);
        const size_t si = rep.slot_index(t, l, s);
        rep.entry[si] = static_cast<uint32_t>(hit.index);
        rep.similarity[si] = hit.similarity;
        rep.ops[si] = static_cast<uint32_t>(hit.ops);
        for (size_t j = 0; j < heads; ++j) {
          const size_t h = s * heads + j;
          const size_t kv = h / g.group_size();
          const size_t vis = req.n_visible[t];
          auto self = attn_with_state<float>(req.rope_q(l, t, h), req.local_keys(l, kv, vis),
                                             req.local_values(l, kv, vis));
          auto prefix = slot.entries.head_state(hit.index, j);
          auto merged = merge(self, prefix);
          const size_t hi = rep.head_index(t, l, h);
          std::copy(merged.a.begin(), merged.a.end(),
                    rep.a.begin() + static_cast<std::ptrdiff_t>(hi * g.d_h));
          rep.log_z[hi] = merged.log_z;
          rep.self_log_z[hi] = self.log_z;
          rep.entry_log_z[hi] = prefix.log_z;
        }
      }
    }
  });
  return rep;
}

//! Prefix keys/values of every layer ([L x h_kv x d_h]) for exact evaluation.
struct PrefixOracle {
  ModelGeometry geometry;
  size_t prefix_len = 0;
  std::vector<std::vector<float>> keys;
  std::vector<std::vector<float>> values;
};

struct ReconstructionReport {
  MergeReport merge;
  std::vector<double> token_error;  // relative L2 error per token, all layers/heads
  std::vector<double> row_error;    // relative L2 error per [token][layer][slot]
};

inline double rel_l2(std::span<const float> got, std::span<const float> ref) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < ref.size(); ++i) {
    const double d = static_cast<double>(got[i]) - static_cast<double>(ref[i]);
    num += d * d;
    den += static_cast<double>(ref[i]) * static_cast<double>(ref[i]);
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

/*! Exact attention state of request token t at layer l, head h over the
 *  concatenation [prefix; visible local block].
 */
inline AttentionState<float> full_attention_state(const InferenceRequest &req,
                                                  const PrefixOracle &oracle, size_t t,
                                                  size_t l, size_t h) {
  const auto &g = req.geometry;
  const size_t kv = h / g.group_size();
  const size_t vis = req.n_visible[t];
  std::vector<float> k, v;
  k.reserve((oracle.prefix_len + vis) * g.d_h);
  v.reserve((oracle.prefix_len + vis) * g.d_h);
  RowView<float> pk(oracle.keys[l].data() + kv * g.d_h, oracle.prefix_len, g.d_h,
                    g.h_kv * g.d_h);
  RowView<float> pv(oracle.values[l].data() + kv * g.d_h, oracle.prefix_len, g.d_h,
                    g.h_kv * g.d_h);
  for (size_t i = 0; i < oracle.prefix_len; ++i) {
    auto kr = pk.row(i), vr = pv.row(i);
    k.insert(k.end(), kr.begin(), kr.end());
    v.insert(v.end(), vr.begin(), vr.end());
  }
  auto lk = req.local_keys(l, kv, vis), lv = req.local_values(l, kv, vis);
  for (size_t i = 0; i < vis; ++i) {
    auto kr = lk.row(i), vr = lv.row(i);
    k.insert(k.end(), kr.begin(), kr.end());
    v.insert(v.end(), vr.begin(), vr.end());
  }
  return attn_with_state<float>(req.rope_q(l, t, h), k, v);
}

/*! Runs infer_merge and compares every merged output with exact attention
 *  over [prefix; local].
 */
inline ReconstructionReport reconstruction_error(const InferenceRequest &req,
                                                 const MemoryBank &bank,
                                                 const PrefixOracle &oracle, bool use_hier,
                                                 unsigned threads = 1) {
  if (!(oracle.geometry == req.geometry))
    throw InvalidArgument("oracle geometry does not match the request");
  ReconstructionReport out;
  out.merge = infer_merge(req, bank, use_hier, threads);
  const auto &g = req.geometry;
  const auto &rep = out.merge;
  const size_t heads = bank.heads_per_slot();
  out.token_error.resize(req.n_tokens);
  out.row_error.resize(req.n_tokens * g.n_layers * rep.n_slots);
  parallel_for(req.n_tokens, threads, [&](size_t t) {
    double tok_num = 0.0, tok_den = 0.0;
    for (size_t l = 0; l < g.n_layers; ++l) {
      for (size_t s = 0; s < rep.n_slots; ++s) {
        double num = 0.0, den = 0.0;
        for (size_t j = 0; j < heads; ++j) {
          const size_t h = s * heads + j;
          auto full = full_attention_state(req, oracle, t, l, h);
          auto got = rep.state(t, l, h);
          for (size_t i = 0; i < g.d_h; ++i) {
            const double d = static_cast<double>(got.a[i]) - static_cast<double>(full.a[i]);
            num += d * d;
            den += static_cast<double>(full.a[i]) * static_cast<double>(full.a[i]);
          }
        }
        out.row_error[rep.slot_index(t, l, s)] = den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
        tok_num += num;
        tok_den += den;
      }
    }
    out.token_error[t] = tok_den > 0.0 ? std::sqrt(tok_num / tok_den) : std::sqrt(tok_num);
  });
  return out;
}

inline TensorFile report_to_tensor_file(const MergeReport &r) {
  TensorFile f;
  f.metadata["kind"] = "merge_report";
  f.metadata["format_version"] = std::to_string(kFormatVersion);
  const std::vector<uint64_t> ss = {r.n_tokens, r.n_layers, r.n_slots};
  const std::vector<uint64_t> hs = {r.n_tokens, r.n_layers, r.h_q};
  f.tensors.push_back(Tensor::from("entry", ss, r.entry));
  f.tensors.push_back(Tensor::from("similarity", ss, r.similarity));
  f.tensors.push_back(Tensor::from("ops", ss, r.ops));
  f.tensors.push_back(Tensor::from("a", {r.n_tokens, r.n_layers, r.h_q, r.d_h}, r.a));
  f.tensors.push_back(Tensor::from("log_z", hs, r.log_z));
  f.tensors.push_back(Tensor::from("self_log_z", hs, r.self_log_z));
  f.tensors.push_back(Tensor::from("entry_log_z", hs, r.entry_log_z));
  return f;
}

//! CSV: token,layer,group,entry,similarity,ops,error (error empty without oracle).
inline void write_report_csv(std::ostream &os, const MergeReport &r,
                             const std::vector<double> *row_error = nullptr) {
  os << "token,layer,group,entry,similarity,ops,error\n";
  char buf[64];
  for (size_t t = 0; t < r.n_tokens; ++t)
    for (size_t l = 0; l < r.n_layers; ++l)
      for (size_t s = 0; s < r.n_slots; ++s) {
        const size_t i = r.slot_index(t, l, s);
        std::snprintf(buf, sizeof(buf), "%.9g", r.similarity[i]);
        os << t << ',' << l << ',' << s << ',' << r.entry[i] << ',' << buf << ','
           << r.ops[i] << ',';
        if (row_error) {
          std::snprintf(buf, sizeof(buf), "%.6e", (*row_error)[i]);
          os << buf;
        }
        os << '\n';
      }
}

}  // namespace asmem
