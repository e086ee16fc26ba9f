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

// Synthetic planted-cluster workloads with exact ground truth.

#include <vector>

#include "asmem/attention.hpp"
#include "asmem/inference.hpp"
#include "asmem/memory_bank.hpp"
#include "asmem/tensorstore.hpp"

namespace asmem {

struct SynthSpec {
  ModelGeometry geometry;
  size_t prefix_len = 256;
  size_t n_clusters = 8;
  size_t queries_per_cluster = 16;
  //! Held-out request tokens per cluster.
  size_t eval_per_cluster = 4;
  //! Non-prefix tokens visible to every request token.
  size_t local_len = 4;
  //! Angular standard deviation (radians) of members around their center.
  double spread = 0.05;
  uint64_t seed = 0;
  size_t n_chunks = 1;
  //! Query norm; 0 selects d_h, which keeps scaled logits O(1) against
  //! N(0, 1/d_h) keys.
  double query_norm = 0.0;
  //! When false every user token sits at position prefix_len; when true
  //! token i sits at prefix_len + i.
  bool positional = false;
  double theta_base = 10000.0;

  void validate() const {
    geometry.validate();
    require(n_clusters >= 1, "clusters must be >= 1");
    require(queries_per_cluster >= 1, "queries per cluster must be >= 1");
    require(spread >= 0.0, "spread must be >= 0");
    require(prefix_len >= 1, "prefix must be >= 1");
    require(n_chunks >= 1 && prefix_len % n_chunks == 0, "chunks must divide prefix");
    require(geometry.d_h % 2 == 0, "d_h must be even for rotary embedding");
  }
};

struct SynthData {
  TraceSet trace;
  std::vector<TraceSet> chunk_traces;  // empty when n_chunks == 1
  PrefixOracle oracle;
  std::vector<uint32_t> labels;        // cluster of every trace token
  InferenceRequest request;            // held-out tokens
  std::vector<uint32_t> request_labels;
};

namespace detail {

inline void random_unit(Rng &rng, std::span<double> out) {
  double n = 0.0;
  do {
    for (double &v : out) v = rng.normal();
    n = norm2<double>(out);
  } while (!(n > 0.0));
  for (double &v : out) v /= n;
}

// Rotates `center` (unit) by an angle |N(0, spread^2)| towards a random
// tangent direction.
inline void perturb(Rng &rng, std::span<const double> center, double spread,
                    std::span<double> out) {
  const size_t d = center.size();
  if (spread == 0.0) {
    std::copy(center.begin(), center.end(), out.begin());
    return;
  }
  std::vector<double> t(d);
  double n = 0.0;
  do {
    for (double &v : t) v = rng.normal();
    const double c = dot<double>(t, center);
    for (size_t i = 0; i < d; ++i) t[i] -= c * center[i];
    n = norm2<double>(t);
  } while (!(n > 0.0));
  const double theta = std::abs(rng.normal()) * spread;
  for (size_t i = 0; i < d; ++i) out[i] = std::cos(theta) * center[i] + std::sin(theta) * t[i] / n;
}

}  // namespace detail

/*! Generates prefix keys/values (N(0, 1/d_h)), per-layer per-head cluster
 *  centers on the unit sphere, calibration tokens assigned round-robin to
 *  clusters, held-out request tokens, and exact prefix attention states.
 */
inline SynthData generate(const SynthSpec &spec) {
  spec.validate();
  const auto &g = spec.geometry;
  const size_t L = spec.prefix_len, C = spec.n_clusters;
  const size_t n_cal = C * spec.queries_per_cluster;
  const size_t n_eval = C * spec.eval_per_cluster;
  const double qnorm = spec.query_norm > 0.0 ? spec.query_norm : static_cast<double>(g.d_h);
  const double kscale = 1.0 / std::sqrt(static_cast<double>(g.d_h));
  const size_t qw = g.h_q * g.d_h, kvw = g.h_kv * g.d_h;
  Rng rng(spec.seed);

  SynthData out;
  out.oracle.geometry = g;
  out.oracle.prefix_len = L;
  out.trace.geometry = g;
  out.trace.prefix_len = L;
  out.trace.n_tokens = n_cal;
  out.trace.layers.resize(g.n_layers);
  out.request.geometry = g;
  out.request.n_tokens = n_eval;
  out.request.n_local = spec.local_len;
  out.request.n_visible.assign(n_eval, static_cast<uint32_t>(spec.local_len));
  out.request.layers.resize(g.n_layers);
  for (size_t i = 0; i < n_cal; ++i) out.labels.push_back(static_cast<uint32_t>(i % C));
  for (size_t i = 0; i < n_eval; ++i) out.request_labels.push_back(static_cast<uint32_t>(i % C));

  const size_t chunk_len = L / spec.n_chunks;
  if (spec.n_chunks > 1) {
    out.chunk_traces.assign(spec.n_chunks, out.trace);
    for (auto &c : out.chunk_traces) c.prefix_len = chunk_len;
  }

  for (size_t l = 0; l < g.n_layers; ++l) {
    std::vector<float> pk(L * kvw), pv(L * kvw);
    for (float &v : pk) v = static_cast<float>(rng.normal() * kscale);
    for (float &v : pv) v = static_cast<float>(rng.normal() * kscale);

    std::vector<double> centers(C * qw);
    for (size_t c = 0; c < C; ++c)
      for (size_t h = 0; h < g.h_q; ++h)
        detail::random_unit(rng, std::span<double>(centers).subspan((c * g.h_q + h) * g.d_h, g.d_h));

    auto make_queries = [&](size_t n, const std::vector<uint32_t> &labels,
                            std::vector<float> &pre, std::vector<float> &rope) {
      pre.resize(n * qw);
      rope.resize(n * qw);
      std::vector<double> dir(g.d_h);
      for (size_t t = 0; t < n; ++t) {
        for (size_t h = 0; h < g.h_q; ++h) {
          detail::perturb(rng,
                          std::span<const double>(centers).subspan((labels[t] * g.h_q + h) * g.d_h, g.d_h),
                          spec.spread, dir);
          for (size_t j = 0; j < g.d_h; ++j)
            pre[t * qw + h * g.d_h + j] = static_cast<float>(qnorm * dir[j]);
        }
        const size_t pos = spec.positional ? L + t : L;
        auto r = apply_rope<float>(std::span<const float>(pre).subspan(t * qw, qw), g.h_q, pos,
                                   RopeConfig{spec.theta_base, pos});
        std::copy(r.begin(), r.end(), rope.begin() + static_cast<std::ptrdiff_t>(t * qw));
      }
    };

    auto &lt = out.trace.layers[l];
    make_queries(n_cal, out.labels, lt.pre_rope_q, lt.rope_q);
    lt.attn_out.resize(n_cal * qw);
    lt.log_z.resize(n_cal * g.h_q);
    for (auto &c : out.chunk_traces) c.layers[l] = lt;
    auto prefix_state = [&](std::span<const float> q, size_t kv, size_t begin, size_t end) {
      RowView<float> kview(pk.data() + begin * kvw + kv * g.d_h, end - begin, g.d_h, kvw);
      RowView<float> vview(pv.data() + begin * kvw + kv * g.d_h, end - begin, g.d_h, kvw);
      return attn_with_state<float>(q, kview, vview);
    };
    for (size_t t = 0; t < n_cal; ++t) {
      for (size_t h = 0; h < g.h_q; ++h) {
        auto q = std::span<const float>(lt.rope_q).subspan(t * qw + h * g.d_h, g.d_h);
        const size_t kv = h / g.group_size();
        auto s = prefix_state(q, kv, 0, L);
        std::copy(s.a.begin(), s.a.end(), lt.attn_out.begin() + static_cast<std::ptrdiff_t>(t * qw + h * g.d_h));
        lt.log_z[t * g.h_q + h] = s.log_z;
        for (size_t c = 0; c < out.chunk_traces.size(); ++c) {
          auto &ct = out.chunk_traces[c].layers[l];
          auto cs = prefix_state(q, kv, c * chunk_len, (c + 1) * chunk_len);
          std::copy(cs.a.begin(), cs.a.end(), ct.attn_out.begin() + static_cast<std::ptrdiff_t>(t * qw + h * g.d_h));
          ct.log_z[t * g.h_q + h] = cs.log_z;
        }
      }
    }

    auto &rl = out.request.layers[l];
    make_queries(n_eval, out.request_labels, rl.pre_rope_q, rl.rope_q);
    rl.local_k.resize(spec.local_len * kvw);
    rl.local_v.resize(spec.local_len * kvw);
    for (float &v : rl.local_k) v = static_cast<float>(rng.normal() * kscale);
    for (float &v : rl.local_v) v = static_cast<float>(rng.normal() * kscale);

    out.oracle.keys.push_back(std::move(pk));
    out.oracle.values.push_back(std::move(pv));
  }
  out.trace.validate();
  out.request.validate();
  return out;
}

inline TensorFile oracle_to_tensor_file(const SynthData &d) {
  TensorFile f;
  f.metadata["kind"] = "oracle";
  f.metadata["prefix_len"] = std::to_string(d.oracle.prefix_len);
  f = request_to_tensor_file(d.request, std::move(f));
  const auto &g = d.oracle.geometry;
  const std::vector<uint64_t> shape = {d.oracle.prefix_len, g.h_kv, g.d_h};
  for (size_t l = 0; l < g.n_layers; ++l) {
    f.tensors.push_back(Tensor::from(layer_tensor(l, "prefix_k"), shape, d.oracle.keys[l]));
    f.tensors.push_back(Tensor::from(layer_tensor(l, "prefix_v"), shape, d.oracle.values[l]));
  }
  f.tensors.push_back(Tensor::from("labels", {d.labels.size()}, d.labels));
  f.tensors.push_back(Tensor::from("request_labels", {d.request_labels.size()}, d.request_labels));
  return f;
}

//! Prefix oracle of a request/oracle file, if the file carries one.
inline std::optional<PrefixOracle> oracle_from_tensor_file(const TensorFile &f) {
  if (!f.find(layer_tensor(0, "prefix_k"))) return std::nullopt;
  PrefixOracle o;
  o.geometry = ModelGeometry::from_metadata(f);
  o.prefix_len = f.meta_u64("prefix_len");
  const auto &g = o.geometry;
  const std::vector<uint64_t> shape = {o.prefix_len, g.h_kv, g.d_h};
  for (size_t l = 0; l < g.n_layers; ++l) {
    const Tensor &k = f.at(layer_tensor(l, "prefix_k"));
    const Tensor &v = f.at(layer_tensor(l, "prefix_v"));
    if (k.shape != shape || v.shape != shape)
      throw Error("geometry inconsistency: prefix tensors have wrong shape");
    o.keys.push_back(k.values<float>());
    o.values.push_back(v.values<float>());
  }
  return o;
}

}  // namespace asmem
