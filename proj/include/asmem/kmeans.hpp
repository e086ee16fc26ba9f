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
#include <vector>

#include "asmem/attention.hpp"
#include "asmem/common.hpp"

namespace asmem {

enum class CentroidOrg { individual, joint };

struct ClusterSpec {
  size_t k = 1;
  size_t iterations = 50;
  size_t batch_size = 1024;
  uint64_t seed = 0;
  CentroidOrg centroid_org = CentroidOrg::individual;

  void validate() const {
    require(k >= 1, "k must be >= 1");
    require(iterations >= 1, "iterations must be >= 1");
    require(batch_size >= 1, "batch_size must be >= 1");
  }
};

struct KMeansResult {
  //! Unit-norm centroid directions of the populated clusters, [k' x d].
  std::vector<double> centroids;
  //! Cluster of every sample, indexing the populated clusters.
  std::vector<uint32_t> assignment;
  //! Members of each populated cluster in sample order.
  std::vector<std::vector<uint32_t>> members;
  //! Clusters that ended empty and were dropped.
  size_t dropped = 0;
  //! Mean cosine to the assigned centroid after each assignment step
  //! (full-batch mode only).
  std::vector<double> objective_history;

  size_t k() const { return members.size(); }
};

namespace detail {

class SphericalKMeans {
 public:
  SphericalKMeans(RowView<float> keys, const ClusterSpec &spec, Rng &rng)
      : n_(keys.rows), d_(keys.dim), spec_(spec), rng_(rng),
        x_(n_ * d_), centroids_(spec.k * d_, 0.0), active_(spec.k, false) {
    for (size_t i = 0; i < n_; ++i) {
      auto row = keys.row(i);
      const double nrm = norm2(row);
      for (size_t j = 0; j < d_; ++j)
        x_[i * d_ + j] = nrm > 0.0 ? static_cast<double>(row[j]) / nrm : 0.0;
    }
  }

  KMeansResult run() {
    const size_t pool = std::min(n_, std::max(spec_.batch_size, spec_.k));
    seed_plus_plus(pool);
    KMeansResult r;
    if (spec_.batch_size >= n_) {
      std::vector<uint32_t> assign(n_);
      std::vector<double> sim(n_);
      for (size_t it = 0; it < spec_.iterations; ++it) {
        r.objective_history.push_back(assign_all(assign, sim));
        lloyd_update(assign);
        reseed_empty(assign, sim, 0, n_, counts_of(assign));
      }
    } else {
      minibatch();
    }
    finalize(r);
    return r;
  }

 private:
  std::span<const double> sample(size_t i) const { return {x_.data() + i * d_, d_}; }
  std::span<double> centroid(size_t c) { return {centroids_.data() + c * d_, d_}; }

  double cos_to(size_t i, size_t c) const {
    return dot<double>(sample(i), {centroids_.data() + c * d_, d_});
  }

  //! Best active centroid for sample i; ties to the lowest index.
  std::pair<uint32_t, double> nearest(size_t i) const {
    uint32_t best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    bool found = false;
    for (size_t c = 0; c < spec_.k; ++c) {
      if (!active_[c]) continue;
      const double s = cos_to(i, c);
      if (!found || s > best_sim) {
        best = static_cast<uint32_t>(c);
        best_sim = s;
        found = true;
      }
    }
    return {best, best_sim};
  }

  void set_centroid(size_t c, size_t i) {
    auto dst = centroid(c);
    auto src = sample(i);
    std::copy(src.begin(), src.end(), dst.begin());
    active_[c] = true;
  }

  // k-means++ on the first `pool` samples with distance 1 - cos.
  void seed_plus_plus(size_t pool) {
    set_centroid(0, rng_.index(pool));
    std::vector<double> dist(pool);
    for (size_t i = 0; i < pool; ++i) dist[i] = std::max(0.0, 1.0 - cos_to(i, 0));
    for (size_t c = 1; c < spec_.k; ++c) {
      double total = 0.0;
      for (double v : dist) total += v * v;
      if (!(total > 0.0)) break;  // fewer distinct samples than k
      const double target = rng_.uniform() * total;
      double cum = 0.0;
      size_t pick = pool - 1;
      for (size_t i = 0; i < pool; ++i) {
        cum += dist[i] * dist[i];
        if (cum > target && dist[i] > 0.0) {
          pick = i;
          break;
        }
      }
      if (dist[pick] <= 0.0) break;
      set_centroid(c, pick);
      for (size_t i = 0; i < pool; ++i)
        dist[i] = std::min(dist[i], std::max(0.0, 1.0 - cos_to(i, c)));
    }
  }

  double assign_all(std::vector<uint32_t> &assign, std::vector<double> &sim) const {
    double total = 0.0;
    for (size_t i = 0; i < n_; ++i) {
      auto [c, s] = nearest(i);
      assign[i] = c;
      sim[i] = s;
      total += s;
    }
    return total / static_cast<double>(n_);
  }

  std::vector<size_t> counts_of(const std::vector<uint32_t> &assign) const {
    std::vector<size_t> counts(spec_.k, 0);
    for (uint32_t c : assign) ++counts[c];
    return counts;
  }

  void lloyd_update(const std::vector<uint32_t> &assign) {
    std::vector<double> sums(spec_.k * d_, 0.0);
    for (size_t i = 0; i < n_; ++i) {
      auto s = sample(i);
      for (size_t j = 0; j < d_; ++j) sums[assign[i] * d_ + j] += s[j];
    }
    for (size_t c = 0; c < spec_.k; ++c) {
      std::span<const double> s(sums.data() + c * d_, d_);
      const double nrm = norm2(s);
      if (!active_[c] || !(nrm > 0.0)) continue;
      auto dst = centroid(c);
      for (size_t j = 0; j < d_; ++j) dst[j] = s[j] / nrm;
    }
  }

  // Moves every unpopulated centroid onto the sample (within [lo, hi)) that
  // is farthest from its assigned centroid. Samples already matching their
  // centroid exactly are not used.
  void reseed_empty(std::vector<uint32_t> &assign, std::vector<double> &sim,
                    size_t lo, size_t hi, const std::vector<size_t> &counts) {
    for (size_t c = 0; c < spec_.k; ++c) {
      if (active_[c] && counts[c] > 0) continue;
      size_t far = hi;
      double far_sim = 1.0 - 1e-12;
      for (size_t i = lo; i < hi; ++i) {
        if (sim[i - lo] < far_sim) {
          far_sim = sim[i - lo];
          far = i;
        }
      }
      if (far == hi) return;
      set_centroid(c, far);
      assign[far - lo] = static_cast<uint32_t>(c);
      sim[far - lo] = 1.0;
    }
  }

  // Sequential mini-batches with per-centroid learning rate 1/count and
  // projection back onto the sphere.
  void minibatch() {
    std::vector<size_t> seen(spec_.k, 0);
    const size_t b = spec_.batch_size;
    std::vector<size_t> idx(b);
    std::vector<uint32_t> assign(b);
    // sim[j] is the similarity of batch slot j to its centroid before the
    // update; reseeding uses it as the "distance from centroid".
    std::vector<double> sim(b);
    size_t pos = 0;
    for (size_t it = 0; it < spec_.iterations; ++it) {
      for (size_t j = 0; j < b; ++j) idx[j] = (pos + j) % n_;
      pos = (pos + b) % n_;
      for (size_t j = 0; j < b; ++j) {
        auto [c, s] = nearest(idx[j]);
        assign[j] = c;
        sim[j] = s;
      }
      for (size_t j = 0; j < b; ++j) {
        const size_t c = assign[j];
        const double eta = 1.0 / static_cast<double>(++seen[c]);
        auto dst = centroid(c);
        auto s = sample(idx[j]);
        for (size_t t = 0; t < d_; ++t) dst[t] = (1.0 - eta) * dst[t] + eta * s[t];
        const double nrm = norm2<double>(dst);
        if (nrm > 0.0)
          for (double &v : dst) v /= nrm;
      }
      // Reseed centroids that have never attracted a sample from this batch.
      // A wrapped batch can hold a sample twice; both slots are retired.
      for (size_t c = 0; c < spec_.k; ++c) {
        if (active_[c] && seen[c] > 0) continue;
        size_t far = b;
        double far_sim = 1.0 - 1e-12;
        for (size_t j = 0; j < b; ++j) {
          if (sim[j] < far_sim) {
            far_sim = sim[j];
            far = j;
          }
        }
        if (far == b) break;
        const size_t picked = idx[far];
        set_centroid(c, picked);
        seen[c] = 1;
        for (size_t j = 0; j < b; ++j)
          if (idx[j] == picked) sim[j] = 1.0;
      }
    }
  }

  void finalize(KMeansResult &r) {
    std::vector<uint32_t> assign(n_);
    std::vector<double> sim(n_);
    assign_all(assign, sim);
    auto counts = counts_of(assign);
    std::vector<uint32_t> remap(spec_.k, 0);
    for (size_t c = 0; c < spec_.k; ++c) {
      if (counts[c] == 0) {
        ++r.dropped;
        continue;
      }
      remap[c] = static_cast<uint32_t>(r.members.size());
      r.members.emplace_back();
      r.members.back().reserve(counts[c]);
      auto src = centroid(c);
      r.centroids.insert(r.centroids.end(), src.begin(), src.end());
    }
    r.assignment.resize(n_);
    for (size_t i = 0; i < n_; ++i) {
      r.assignment[i] = remap[assign[i]];
      r.members[r.assignment[i]].push_back(static_cast<uint32_t>(i));
    }
  }

  size_t n_, d_;
  ClusterSpec spec_;
  Rng &rng_;
  std::vector<double> x_;
  std::vector<double> centroids_;
  std::vector<bool> active_;
};

}  // namespace detail

/*! Spherical k-means: keys are L2-normalised and assigned by maximum cosine
 *  similarity (ties to the lowest centroid index). Initialisation is
 *  k-means++ over the first max(batch_size, k) samples.
 *
 *  batch_size >= n runs full-batch Lloyd iterations; otherwise each
 *  iteration consumes the next batch_size samples of the stream (wrapping)
 *  and applies mini-batch centroid updates. Unpopulated centroids are
 *  reseeded to the sample farthest from its centroid; clusters still empty
 *  at the end are dropped and counted in KMeansResult::dropped.
 */
inline KMeansResult spherical_kmeans(RowView<float> keys, const ClusterSpec &spec) {
  spec.validate();
  if (keys.rows == 0) throw InvalidArgument("k-means: zero samples");
  Rng rng(spec.seed);
  detail::SphericalKMeans km(keys, spec, rng);
  return km.run();
}

}  // namespace asmem
