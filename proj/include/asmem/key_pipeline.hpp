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

// Lookup-key representation shared by calibration and inference. Both sides
// must call make_lookup_keys() so that a calibration record and the same
// query at inference time produce bit-identical keys.

#include <Eigen/Dense>
#include <numeric>
#include <optional>
#include <vector>

#include "asmem/attention.hpp"
#include "asmem/common.hpp"
#include "asmem/kmeans.hpp"
#include "asmem/tensorstore.hpp"

namespace asmem {

enum class RopeMode { pre_rope, rope_unified };

struct KeyMode {
  RopeMode rope = RopeMode::pre_rope;
  bool whitening = false;
  size_t virtual_position = 0;
  double theta_base = 10000.0;

  bool operator==(const KeyMode &) const = default;
};

inline std::string to_string(RopeMode m) {
  return m == RopeMode::pre_rope ? "pre" : "unified";
}

inline RopeMode parse_rope_mode(const std::string &s) {
  if (s == "pre" || s == "pre_rope") return RopeMode::pre_rope;
  if (s == "unified" || s == "rope_unified") return RopeMode::rope_unified;
  throw InvalidArgument("unknown key mode '" + s + "'");
}

inline std::string to_string(CentroidOrg o) {
  return o == CentroidOrg::individual ? "individual" : "joint";
}

inline CentroidOrg parse_centroid_org(const std::string &s) {
  if (s == "individual") return CentroidOrg::individual;
  if (s == "joint") return CentroidOrg::joint;
  throw InvalidArgument("unknown centroid organisation '" + s + "'");
}

/*! Per-layer, per-query-head d_h x d_h matrices (row-major), each the
 *  regularised inverse square root of that head's key covariance.
 */
struct WhiteningTransform {
  size_t n_layers = 0;
  size_t n_heads = 0;
  size_t d_h = 0;
  std::vector<double> matrices;

  std::span<const double> matrix(size_t layer, size_t head) const {
    const size_t sz = d_h * d_h;
    return {matrices.data() + (layer * n_heads + head) * sz, sz};
  }
  std::span<double> matrix(size_t layer, size_t head) {
    const size_t sz = d_h * d_h;
    return {matrices.data() + (layer * n_heads + head) * sz, sz};
  }

  bool operator==(const WhiteningTransform &) const = default;
};

inline constexpr double kDefaultEpsilonScale = 1e-5;

/*! (Sigma + eps I)^(-1/2) of the sample covariance of `queries`, with
 *  eps = epsilon_scale * trace(Sigma) / d. Negative eigenvalues from
 *  round-off are clamped to zero before regularisation.
 */
inline std::vector<double> fit_whitening(RowView<float> queries,
                                         double epsilon_scale = kDefaultEpsilonScale) {
  const size_t n = queries.rows, d = queries.dim;
  require(n >= 2, "fit_whitening: need at least 2 samples");
  require(epsilon_scale > 0.0, "fit_whitening: epsilon_scale must be positive");
  Eigen::MatrixXd x(n, d);
  for (size_t i = 0; i < n; ++i) {
    auto r = queries.row(i);
    if (!all_finite(r)) throw InvalidArgument("fit_whitening: non-finite input");
    for (size_t j = 0; j < d; ++j) x(i, j) = r[j];
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  const double tr = cov.trace();
  const double eps = tr > 0.0 ? epsilon_scale * tr / static_cast<double>(d)
                              : epsilon_scale;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw Error("fit_whitening: eigensolver failed");
  Eigen::VectorXd inv_sqrt =
      (es.eigenvalues().array().max(0.0) + eps).rsqrt().matrix();
  Eigen::MatrixXd w =
      es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();
  w = 0.5 * (w + w.transpose());
  std::vector<double> out(d * d);
  for (size_t i = 0; i < d; ++i)
    for (size_t j = 0; j < d; ++j) out[i * d + j] = w(i, j);
  return out;
}

//! Per-head query representation before whitening: the pre-RoPE query or
//! the pre-RoPE query rotated to the shared virtual position.
inline std::vector<float> rope_mode_query(std::span<const float> pre_rope_q,
                                          const KeyMode &mode, size_t h_q) {
  if (mode.rope == RopeMode::pre_rope)
    return {pre_rope_q.begin(), pre_rope_q.end()};
  return apply_rope<float>(pre_rope_q, h_q, mode.virtual_position,
                           RopeConfig{mode.theta_base, mode.virtual_position});
}

//! Applies the whitening matrix of every head of `layer` in place.
inline void whiten_heads(std::vector<float> &q, const WhiteningTransform &w,
                         size_t layer) {
  const size_t d = w.d_h;
  std::vector<double> tmp(d);
  for (size_t h = 0; h < w.n_heads; ++h) {
    auto m = w.matrix(layer, h);
    float *v = q.data() + h * d;
    for (size_t i = 0; i < d; ++i) {
      double s = 0.0;
      for (size_t j = 0; j < d; ++j) s += m[i * d + j] * static_cast<double>(v[j]);
      tmp[i] = s;
    }
    for (size_t i = 0; i < d; ++i) v[i] = static_cast<float>(tmp[i]);
  }
}

/*! Fits one whitening matrix per layer and query head on the rope-mode
 *  queries of a subsample of min(subsample, n_tokens) trace tokens.
 */
inline WhiteningTransform fit_trace_whitening(const TraceSet &ts, const KeyMode &mode,
                                              uint64_t seed, unsigned threads = 1,
                                              size_t subsample = 4096,
                                              double epsilon_scale = kDefaultEpsilonScale) {
  const auto &g = ts.geometry;
  WhiteningTransform w;
  w.n_layers = g.n_layers;
  w.n_heads = g.h_q;
  w.d_h = g.d_h;
  w.matrices.assign(g.n_layers * g.h_q * g.d_h * g.d_h, 0.0);

  // Partial Fisher-Yates for the token subsample, then sorted to keep the
  // covariance accumulation order fixed.
  std::vector<size_t> tokens(ts.n_tokens);
  std::iota(tokens.begin(), tokens.end(), size_t{0});
  const size_t m = std::min(subsample, ts.n_tokens);
  if (m < ts.n_tokens) {
    Rng rng = Rng(seed).fork(0x57);
    for (size_t i = 0; i < m; ++i) std::swap(tokens[i], tokens[i + rng.index(ts.n_tokens - i)]);
    tokens.resize(m);
    std::sort(tokens.begin(), tokens.end());
  }

  parallel_for(g.n_layers, threads, [&](size_t l) {
    std::vector<float> keys(m * g.h_q * g.d_h);
    for (size_t i = 0; i < m; ++i) {
      auto q = rope_mode_query(ts.pre_rope_q(l, tokens[i]), mode, g.h_q);
      std::copy(q.begin(), q.end(), keys.begin() + i * g.h_q * g.d_h);
    }
    for (size_t h = 0; h < g.h_q; ++h) {
      RowView<float> view(keys.data() + h * g.d_h, m, g.d_h, g.h_q * g.d_h);
      auto mat = fit_whitening(view, epsilon_scale);
      std::copy(mat.begin(), mat.end(), w.matrix(l, h).begin());
    }
  });
  return w;
}

/*! Lookup keys of one token at one layer.
 *
 *  The G per-head queries of each KV group are concatenated into a
 *  G*d_h vector and split into contiguous chunks of d_prime. With
 *  CentroidOrg::individual there is one slot per KV group and each slot
 *  carries G*d_h/d_prime keys of size d_prime. With CentroidOrg::joint
 *  there is one slot whose c-th key concatenates chunk c of every group
 *  (size h_kv*d_prime).
 */
struct LookupKeys {
  size_t n_slots = 0;
  size_t chunks = 0;
  size_t key_dim = 0;
  std::vector<float> data;  // [slot][chunk][key_dim]

  std::span<const float> key(size_t slot, size_t chunk) const {
    return {data.data() + (slot * chunks + chunk) * key_dim, key_dim};
  }
};

inline void check_d_prime(const ModelGeometry &g, size_t d_prime) {
  const size_t width = g.group_size() * g.d_h;
  if (d_prime == 0 || width % d_prime != 0)
    throw InvalidArgument("d_prime " + std::to_string(d_prime) +
                          " does not divide G*d_h = " + std::to_string(width));
}

//! Default key dimension: 2*d_h when it divides G*d_h, else G*d_h.
inline size_t default_d_prime(const ModelGeometry &g) {
  const size_t width = g.group_size() * g.d_h;
  return width % (2 * g.d_h) == 0 ? 2 * g.d_h : width;
}

inline LookupKeys make_lookup_keys(std::span<const float> pre_rope_q,
                                   const KeyMode &mode,
                                   const WhiteningTransform *whiten, size_t layer,
                                   const ModelGeometry &g, size_t d_prime,
                                   CentroidOrg org) {
  check_d_prime(g, d_prime);
  if (mode.whitening != (whiten != nullptr))
    throw InvalidArgument("whitening transform must be present iff mode.whitening");
  require(pre_rope_q.size() == g.h_q * g.d_h, "query size does not match geometry");

  std::vector<float> q = rope_mode_query(pre_rope_q, mode, g.h_q);
  if (whiten) whiten_heads(q, *whiten, layer);

  // Query heads of a KV group are contiguous, so group g's concatenation is
  // q[g*G*d_h, (g+1)*G*d_h) and chunk c of it starts at c*d_prime.
  const size_t width = g.group_size() * g.d_h;
  LookupKeys k;
  k.chunks = width / d_prime;
  if (org == CentroidOrg::individual) {
    k.n_slots = g.h_kv;
    k.key_dim = d_prime;
    k.data = std::move(q);
  } else {
    k.n_slots = 1;
    k.key_dim = g.h_kv * d_prime;
    k.data.reserve(q.size());
    for (size_t c = 0; c < k.chunks; ++c)
      for (size_t grp = 0; grp < g.h_kv; ++grp) {
        auto first = q.begin() + static_cast<std::ptrdiff_t>(grp * width + c * d_prime);
        k.data.insert(k.data.end(), first, first + static_cast<std::ptrdiff_t>(d_prime));
      }
  }
  return k;
}

//! Number of query heads whose state each slot carries.
inline size_t slot_heads(const ModelGeometry &g, CentroidOrg org) {
  return org == CentroidOrg::individual ? g.group_size() : g.h_q;
}

inline size_t slot_count(const ModelGeometry &g, CentroidOrg org) {
  return org == CentroidOrg::individual ? g.h_kv : 1;
}

}  // namespace asmem
