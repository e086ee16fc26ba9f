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

// Prefix-traffic formulas, similarity-op cost model and the scaling bench.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "asmem/attention.hpp"
#include "asmem/memory_bank.hpp"
#include "asmem/tensorstore.hpp"

namespace asmem {

struct TrafficModel {
  ModelGeometry geometry;
  uint64_t prefix_len = 0;
  uint64_t k = 0;
  uint64_t d_prime = 0;
};

//! Elements per decode step for full GQA attention: 2*H_q*d_h + 2*L*G*d_h.
inline uint64_t gqa_traffic(const TrafficModel &m) {
  const uint64_t h = m.geometry.h_q, dh = m.geometry.d_h, g = m.geometry.group_size();
  return 2 * h * dh + 2 * m.prefix_len * g * dh;
}

//! Elements per decode step with a K-entry memory: 2*H_q*d_h + K*G*d'.
inline uint64_t asm_traffic(const TrafficModel &m) {
  const uint64_t h = m.geometry.h_q, dh = m.geometry.d_h, g = m.geometry.group_size();
  return 2 * h * dh + m.k * g * m.d_prime;
}

//! Similarity evaluations of a flat scan over k entries.
inline uint64_t flat_ops_model(uint64_t k) { return k; }

//! Similarity evaluations of a two-level lookup with equal bucket sizes.
inline uint64_t hier_ops_model(uint64_t k, uint64_t n_l1, uint64_t top_m) {
  return n_l1 + top_m * (k / n_l1);
}

inline size_t default_n_l1(size_t k) {
  return std::max<size_t>(1, static_cast<size_t>(std::lround(std::sqrt(static_cast<double>(k)))));
}

enum class BenchMode { full_attention_sim, flat, hier };

inline std::string to_string(BenchMode m) {
  switch (m) {
    case BenchMode::full_attention_sim: return "full_attention_sim";
    case BenchMode::flat: return "flat";
    case BenchMode::hier: return "hier";
  }
  return "?";
}

inline BenchMode parse_bench_mode(const std::string &s) {
  if (s == "full" || s == "full_attention_sim") return BenchMode::full_attention_sim;
  if (s == "flat") return BenchMode::flat;
  if (s == "hier") return BenchMode::hier;
  throw InvalidArgument("unknown bench mode '" + s + "'");
}

struct BenchConfig {
  std::vector<size_t> ks = {1024, 2048, 4096, 8192, 16384};
  std::vector<BenchMode> modes = {BenchMode::full_attention_sim, BenchMode::flat,
                                  BenchMode::hier};
  size_t trials = 256;  // query tokens per configuration
  uint64_t seed = 0;
  size_t key_dim = 256;
  size_t d_h = 128;
  size_t top_m = kDefaultTopM;
  double spread = 0.05;
};

struct BenchRow {
  BenchMode mode = BenchMode::flat;
  size_t k = 0;
  size_t n_l1 = 0;
  size_t top_m = 0;
  double ops_mean = 0.0;
  double ns_per_token_mean = 0.0;
  size_t trials = 0;
  uint64_t seed = 0;
};

/*! Synthetic bank whose keys form n_l1 groups of (nearly) equal size around
 *  random unit centers, with the matching hierarchical index built from the
 *  known partition. Bucket b holds entries [offset_b, offset_b + size_b)
 *  where sizes differ by at most one.
 */
struct BalancedBank {
  EntryList entries;
  HierarchicalIndex index;
  std::vector<float> centers;  // [n_l1 x key_dim]
};

inline BalancedBank make_balanced_bank(size_t k, size_t n_l1, size_t key_dim, double spread,
                                       size_t top_m, uint64_t seed) {
  require(n_l1 >= 1 && n_l1 <= k, "balanced bank: need 1 <= n_l1 <= k");
  Rng rng(seed);
  BalancedBank b;
  b.entries = EntryList(key_dim, 1, 1);
  b.centers.resize(n_l1 * key_dim);
  std::vector<std::vector<uint32_t>> buckets(n_l1);
  std::vector<float> key(key_dim);
  const float a = 0.0f;
  const double z = 0.0;
  uint32_t id = 0;
  for (size_t c = 0; c < n_l1; ++c) {
    std::vector<double> center(key_dim);
    double nrm = 0.0;
    do {
      for (double &v : center) v = rng.normal();
      nrm = norm2<double>(center);
    } while (!(nrm > 0.0));
    for (size_t j = 0; j < key_dim; ++j) b.centers[c * key_dim + j] = static_cast<float>(center[j] / nrm);
    const size_t size = k / n_l1 + (c < k % n_l1 ? 1 : 0);
    for (size_t i = 0; i < size; ++i) {
      for (size_t j = 0; j < key_dim; ++j)
        key[j] = static_cast<float>(center[j] / nrm + spread * rng.normal() / std::sqrt(static_cast<double>(key_dim)));
      b.entries.push_back(key, std::span<const float>(&a, 1), std::span<const double>(&z, 1));
      buckets[c].push_back(id++);
    }
  }
  b.index = HierarchicalIndex::from_partition(key_dim, b.centers, buckets, k, std::min(top_m, n_l1));
  return b;
}

namespace detail {
template <typename F>
double time_ns(F &&f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  const auto t1 = std::chrono::steady_clock::now();
  return static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
}
}  // namespace detail

/*! For each K and mode: mean similarity/score evaluations and wall-clock per
 *  query token. full_attention_sim scores all L = K prefix positions with a
 *  d_h-dimensional softmax attention; flat and hier retrieve over a
 *  balanced synthetic bank with n_l1 = round(sqrt(K)).
 */
inline std::vector<BenchRow> run_scaling_bench(const BenchConfig &cfg) {
  require(cfg.trials >= 1, "bench: trials must be >= 1");
  std::vector<BenchRow> rows;
  for (size_t ki = 0; ki < cfg.ks.size(); ++ki) {
    const size_t k = cfg.ks[ki];
    require(k >= 1, "bench: K must be >= 1");
    const size_t n_l1 = default_n_l1(k);
    const size_t top_m = std::min(cfg.top_m, n_l1);
    Rng rng = Rng(cfg.seed).fork(ki);
    auto bank = make_balanced_bank(k, n_l1, cfg.key_dim, cfg.spread, top_m, rng.next_u64());

    // Queries are perturbed bucket centers.
    std::vector<std::vector<float>> queries(cfg.trials, std::vector<float>(cfg.key_dim));
    for (auto &q : queries) {
      const size_t c = rng.index(n_l1);
      for (size_t j = 0; j < cfg.key_dim; ++j)
        q[j] = static_cast<float>(bank.centers[c * cfg.key_dim + j] +
                                  cfg.spread * rng.normal() / std::sqrt(static_cast<double>(cfg.key_dim)));
    }

    for (BenchMode mode : cfg.modes) {
      BenchRow row;
      row.mode = mode;
      row.k = k;
      row.n_l1 = mode == BenchMode::hier ? n_l1 : 0;
      row.top_m = mode == BenchMode::hier ? top_m : 0;
      row.trials = cfg.trials;
      row.seed = cfg.seed;
      double ops = 0.0, ns = 0.0;
      if (mode == BenchMode::full_attention_sim) {
        std::vector<float> keys(k * cfg.d_h), values(k * cfg.d_h), q(cfg.d_h);
        for (float &v : keys) v = static_cast<float>(rng.normal() / std::sqrt(static_cast<double>(cfg.d_h)));
        for (float &v : values) v = static_cast<float>(rng.normal());
        volatile double sink = 0.0;
        for (size_t t = 0; t < cfg.trials; ++t) {
          for (float &v : q) v = static_cast<float>(rng.normal());
          ns += detail::time_ns([&] {
            auto s = attn_with_state<float>(q, keys, values);
            sink = sink + s.log_z;
          });
          ops += static_cast<double>(k);
        }
      } else {
        volatile size_t sink = 0;
        for (const auto &q : queries) {
          Retrieval r;
          ns += detail::time_ns([&] {
            r = mode == BenchMode::flat ? retrieve_linear(q, bank.entries)
                                        : retrieve_hier(q, bank.index, bank.entries, top_m);
            sink = sink + r.index;
          });
          ops += static_cast<double>(r.ops);
        }
      }
      row.ops_mean = ops / static_cast<double>(cfg.trials);
      row.ns_per_token_mean = ns / static_cast<double>(cfg.trials);
      rows.push_back(row);
    }
  }
  return rows;
}

inline void write_bench_csv(std::ostream &os, const std::vector<BenchRow> &rows) {
  os << "mode,K,n_l1,top_m,ops_mean,ns_per_token_mean,trials,seed\n";
  char buf[96];
  for (const auto &r : rows) {
    std::snprintf(buf, sizeof(buf), "%.6g,%.1f", r.ops_mean, r.ns_per_token_mean);
    os << to_string(r.mode) << ',' << r.k << ',' << r.n_l1 << ',' << r.top_m << ',' << buf
       << ',' << r.trials << ',' << r.seed << '\n';
  }
}

}  // namespace asmem
