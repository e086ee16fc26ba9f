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

// Offline construction of memory banks from calibration traces.

#include <string>
#include <vector>

#include "asmem/attention.hpp"
#include "asmem/key_pipeline.hpp"
#include "asmem/kmeans.hpp"
#include "asmem/memory_bank.hpp"
#include "asmem/tensorstore.hpp"

namespace asmem {

//! A lookup key paired with the prefix attention state of the heads it
//! stands for.
struct CalibSample {
  std::vector<float> key;
  std::vector<float> a;        // [heads x d_h]
  std::vector<double> log_z;   // [heads]
};

/*! Attention-aware aggregation of a cluster:
 *    key   = mean of member keys
 *    Z     = (sum_i Z_i) / |C|
 *    a     = (sum_i Z_i a_i) / (sum_i Z_i)
 *  per head, with masses handled in the log domain.
 */
inline MemoryEntry aggregate_cluster(std::span<const CalibSample *const> members) {
  if (members.empty()) throw InvalidArgument("aggregate_cluster: empty cluster");
  const CalibSample &first = *members.front();
  const size_t kd = first.key.size(), heads = first.log_z.size();
  require(heads > 0 && first.a.size() % heads == 0,
          "aggregate_cluster: state size is not a multiple of the head count");
  const size_t dh = first.a.size() / heads;
  for (const CalibSample *m : members)
    require(m->key.size() == kd && m->a.size() == heads * dh && m->log_z.size() == heads,
            "aggregate_cluster: members disagree in shape");

  const double count = static_cast<double>(members.size());
  MemoryEntry e;
  std::vector<double> key(kd, 0.0);
  for (const CalibSample *m : members)
    for (size_t j = 0; j < kd; ++j) key[j] += m->key[j];
  e.key.resize(kd);
  for (size_t j = 0; j < kd; ++j) e.key[j] = static_cast<float>(key[j] / count);

  e.a.assign(heads * dh, 0.0f);
  e.log_z.resize(heads);
  std::vector<double> acc(dh);
  for (size_t h = 0; h < heads; ++h) {
    double mx = kNegInf;
    for (const CalibSample *m : members) mx = std::max(mx, m->log_z[h]);
    if (mx == kNegInf) {
      e.log_z[h] = kNegInf;
      continue;
    }
    double total = 0.0;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (const CalibSample *m : members) {
      const double w = std::exp(m->log_z[h] - mx);
      total += w;
      for (size_t j = 0; j < dh; ++j) acc[j] += w * static_cast<double>(m->a[h * dh + j]);
    }
    for (size_t j = 0; j < dh; ++j) e.a[h * dh + j] = static_cast<float>(acc[j] / total);
    e.log_z[h] = mx + std::log(total) - std::log(count);
  }
  return e;
}

inline MemoryEntry aggregate_cluster(std::span<const CalibSample> members) {
  std::vector<const CalibSample *> ptrs;
  ptrs.reserve(members.size());
  for (const auto &m : members) ptrs.push_back(&m);
  return aggregate_cluster(std::span<const CalibSample *const>(ptrs));
}

/*! Calibration samples of one layer/slot, token-major then chunk-major. */
inline std::vector<CalibSample> collect_samples(const TraceSet &ts, size_t layer,
                                                size_t slot, const KeyMode &mode,
                                                const WhiteningTransform *whiten,
                                                size_t d_prime, CentroidOrg org) {
  const auto &g = ts.geometry;
  const size_t heads = slot_heads(g, org);
  const size_t head0 = slot * heads;
  std::vector<CalibSample> out;
  for (size_t t = 0; t < ts.n_tokens; ++t) {
    auto keys = make_lookup_keys(ts.pre_rope_q(layer, t), mode, whiten, layer, g, d_prime, org);
    auto a = ts.attn_out(layer, t).subspan(head0 * g.d_h, heads * g.d_h);
    auto z = ts.log_z(layer, t).subspan(head0, heads);
    for (size_t c = 0; c < keys.chunks; ++c) {
      auto k = keys.key(slot, c);
      out.push_back({{k.begin(), k.end()}, {a.begin(), a.end()}, {z.begin(), z.end()}});
    }
  }
  return out;
}

struct BuildConfig {
  KeyMode mode;
  ClusterSpec cluster;
  size_t d_prime = 0;  // 0 selects default_d_prime()
  unsigned threads = 1;
  double epsilon_scale = kDefaultEpsilonScale;
  size_t whiten_subsample = 4096;
  size_t hier_n_l1 = 0;  // 0 = no hierarchical index
  size_t top_m = kDefaultTopM;
};

struct BuildStats {
  size_t dropped_clusters = 0;
  std::vector<std::string> warnings;
  std::vector<std::vector<size_t>> entries;  // [layer][slot]
};

/*! Builds a bank: per layer (and per KV group under individual
 *  organisation) the samples are clustered with spherical k-means and each
 *  cluster is aggregated into one entry. Layers and slots are independent
 *  and built in parallel; each uses a random stream derived from the seed
 *  and its own position, so results do not depend on `threads`.
 *
 *  Throws when more than half of the requested clusters of any slot end
 *  empty (not enough distinct calibration data for k).
 */
inline MemoryBank build_bank(const TraceSet &ts, const BuildConfig &cfg_in,
                             BuildStats *stats = nullptr) {
  ts.validate();
  BuildConfig cfg = cfg_in;
  cfg.cluster.validate();
  const auto &g = ts.geometry;
  if (cfg.d_prime == 0) cfg.d_prime = default_d_prime(g);
  check_d_prime(g, cfg.d_prime);
  if (ts.n_tokens == 0) throw InvalidArgument("build_bank: trace has no tokens");

  MemoryBank bank;
  bank.geometry = g;
  bank.prefix_len = ts.prefix_len;
  bank.mode = cfg.mode;
  bank.d_prime = cfg.d_prime;
  bank.k = cfg.cluster.k;
  bank.seed = cfg.cluster.seed;
  bank.centroid_org = cfg.cluster.centroid_org;
  if (cfg.mode.whitening)
    bank.whitening = fit_trace_whitening(ts, cfg.mode, cfg.cluster.seed, cfg.threads,
                                         cfg.whiten_subsample, cfg.epsilon_scale);

  const size_t n_slots = bank.n_slots();
  const size_t tasks = g.n_layers * n_slots;
  std::vector<BankSlot> slots(tasks);
  std::vector<size_t> dropped(tasks, 0);
  const WhiteningTransform *w = bank.whitening ? &*bank.whitening : nullptr;

  parallel_for(tasks, cfg.threads, [&](size_t task) {
    const size_t layer = task / n_slots, s = task % n_slots;
    auto samples = collect_samples(ts, layer, s, cfg.mode, w, cfg.d_prime, bank.centroid_org);
    const size_t kd = samples.front().key.size();
    std::vector<float> keys;
    keys.reserve(samples.size() * kd);
    for (const auto &smp : samples) keys.insert(keys.end(), smp.key.begin(), smp.key.end());

    ClusterSpec spec = cfg.cluster;
    spec.seed = Rng(cfg.cluster.seed).fork(task).next_u64();
    auto km = spherical_kmeans(RowView<float>(keys, kd), spec);
    dropped[task] = km.dropped;
    if (2 * km.dropped > spec.k)
      throw Error("insufficient calibration data: " + std::to_string(km.dropped) + " of " +
                  std::to_string(spec.k) + " clusters empty at layer " +
                  std::to_string(layer) + " slot " + std::to_string(s));

    BankSlot slot;
    slot.entries = EntryList(kd, bank.heads_per_slot(), g.d_h);
    std::vector<const CalibSample *> ptrs;
    for (const auto &members : km.members) {
      ptrs.clear();
      for (uint32_t i : members) ptrs.push_back(&samples[i]);
      slot.entries.push_back(aggregate_cluster(std::span<const CalibSample *const>(ptrs)));
    }
    if (cfg.hier_n_l1 > 0)
      slot.hier = build_hier_index(slot.entries, std::min(cfg.hier_n_l1, slot.entries.size()),
                                   spec.seed, cfg.top_m);
    slots[task] = std::move(slot);
  });

  bank.layers.resize(g.n_layers);
  if (stats) stats->entries.assign(g.n_layers, std::vector<size_t>(n_slots, 0));
  for (size_t task = 0; task < tasks; ++task) {
    const size_t layer = task / n_slots, s = task % n_slots;
    if (stats) {
      stats->entries[layer][s] = slots[task].entries.size();
      stats->dropped_clusters += dropped[task];
      if (dropped[task] > 0)
        stats->warnings.push_back("layer " + std::to_string(layer) + " slot " +
                                  std::to_string(s) + ": dropped " +
                                  std::to_string(dropped[task]) + " empty clusters");
    }
    bank.layers[layer].push_back(std::move(slots[task]));
  }
  bank.validate();
  return bank;
}

/*! Combines traces recorded over disjoint prefix chunks into the trace of
 *  the whole prefix by merging, per token and head, the chunk states in the
 *  given order. Queries are taken from the first chunk.
 */
inline TraceSet merge_chunk_traces(std::span<const TraceSet> chunks) {
  if (chunks.empty()) throw InvalidArgument("no chunk traces");
  const TraceSet &first = chunks.front();
  for (const auto &c : chunks) {
    c.validate();
    if (!(c.geometry == first.geometry))
      throw InvalidArgument("chunk traces disagree in geometry");
    if (c.n_tokens != first.n_tokens)
      throw InvalidArgument("chunk traces have misaligned token counts");
  }
  TraceSet out = first;
  out.prefix_len = 0;
  for (const auto &c : chunks) out.prefix_len += c.prefix_len;
  const auto &g = first.geometry;
  for (size_t l = 0; l < g.n_layers; ++l) {
    for (size_t t = 0; t < first.n_tokens; ++t) {
      for (size_t h = 0; h < g.h_q; ++h) {
        auto state = AttentionState<float>::empty(g.d_h);
        for (const auto &c : chunks) {
          auto a = c.attn_out(l, t).subspan(h * g.d_h, g.d_h);
          state = merge(state, AttentionState<float>{{a.begin(), a.end()}, c.log_z(l, t)[h]});
        }
        std::copy(state.a.begin(), state.a.end(),
                  out.layers[l].attn_out.begin() +
                      static_cast<std::ptrdiff_t>((t * g.h_q + h) * g.d_h));
        out.layers[l].log_z[t * g.h_q + h] = state.log_z;
      }
    }
  }
  return out;
}

inline MemoryBank build_bank_chunked(std::span<const TraceSet> chunks, const BuildConfig &cfg,
                                     BuildStats *stats = nullptr) {
  return build_bank(merge_chunk_traces(chunks), cfg, stats);
}

}  // namespace asmem
