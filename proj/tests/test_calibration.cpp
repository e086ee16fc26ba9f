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
#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <map>
#include <numeric>
#include <random>

#include "asmem/calibration.hpp"
#include "asmem/synth.hpp"
#include "oracle.hpp"

using namespace asmem;

namespace {

std::vector<float> apply(const std::vector<double> &w, std::span<const float> x, size_t d) {
  const size_t n = x.size() / d;
  std::vector<float> out(x.size());
  for (size_t i = 0; i < n; ++i)
    for (size_t a = 0; a < d; ++a) {
      long double s = 0;
      for (size_t b = 0; b < d; ++b) s += w[a * d + b] * x[i * d + b];
      out[i * d + a] = static_cast<float>(s);
    }
  return out;
}

SynthSpec small_spec() {
  SynthSpec s;
  s.geometry = {2, 4, 2, 8};
  s.prefix_len = 64;
  s.n_clusters = 8;
  s.queries_per_cluster = 12;
  s.spread = 0.02;
  s.seed = 21;
  return s;
}

}  // namespace

TEST(Whitening, WhiteDataGivesNearIdentity) {
  std::mt19937_64 g(1);
  const size_t d = 6, n = 200000;
  auto x = oracle::random_vec(g, n * d);
  auto w = fit_whitening(RowView<float>(x, d));
  double frob = 0;
  for (size_t a = 0; a < d; ++a)
    for (size_t b = 0; b < d; ++b) {
      const double diff = w[a * d + b] - (a == b ? 1.0 : 0.0);
      frob += diff * diff;
    }
  EXPECT_LE(std::sqrt(frob), 3e-2);  // sampling noise of the covariance at n = 2e5
}

TEST(Whitening, WhiteDataExactCovarianceIsIdempotent) {
  // Construct a sample whose covariance is exactly the identity.
  std::mt19937_64 g(2);
  const size_t d = 3, n = 500;
  auto raw = oracle::random_vec(g, n * d);
  Eigen::MatrixXd x(n, d);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) x(i, j) = raw[i * d + j];
  x.rowwise() -= x.colwise().mean();
  Eigen::MatrixXd c = x.transpose() * x / double(n - 1);
  Eigen::LLT<Eigen::MatrixXd> llt(c);
  Eigen::MatrixXd y = x * llt.matrixL().transpose().solve(Eigen::MatrixXd::Identity(d, d));
  std::vector<float> yf(n * d);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) yf[i * d + j] = static_cast<float>(y(i, j));
  auto w = fit_whitening(RowView<float>(yf, d));
  double frob = 0;
  for (size_t a = 0; a < d; ++a)
    for (size_t b = 0; b < d; ++b) {
      const double diff = w[a * d + b] - (a == b ? 1.0 : 0.0);
      frob += diff * diff;
    }
  EXPECT_LE(std::sqrt(frob), 1e-3);
}

TEST(Whitening, DiagonalCovarianceClosedForm) {
  // Samples (+-2, 0) and (0, +-1) have covariance diag(4, 1) * n/(n-1) * 1/2
  // per axis; build them so the covariance is exactly diag(4, 1).
  std::vector<float> x;
  const size_t reps = 1000;
  for (size_t i = 0; i < reps; ++i) {
    x.insert(x.end(), {2.0f, 1.0f, -2.0f, -1.0f, 2.0f, -1.0f, -2.0f, 1.0f});
  }
  const size_t n = x.size() / 2;
  const double scale = static_cast<double>(n) / static_cast<double>(n - 1);
  auto w = fit_whitening(RowView<float>(x, 2));
  // Closed form: (diag(4, 1) * scale + eps I)^(-1/2), eps = 1e-5 * tr / 2.
  const double eps = 1e-5 * (5.0 * scale) / 2.0;
  EXPECT_NEAR(w[0], 1.0 / std::sqrt(4.0 * scale + eps), 1e-9);
  EXPECT_NEAR(w[3], 1.0 / std::sqrt(1.0 * scale + eps), 1e-9);
  EXPECT_NEAR(w[1], 0.0, 1e-12);
  EXPECT_NEAR(w[0], 0.5, 1e-3);
  EXPECT_NEAR(w[3], 1.0, 1e-3);
}

TEST(Whitening, RankDeficientIsFiniteAndSpd) {
  std::vector<float> x;
  for (int i = 0; i < 50; ++i) x.insert(x.end(), {float(i), 2.0f * float(i), -float(i)});
  auto w = fit_whitening(RowView<float>(x, 3));
  Eigen::Matrix3d m;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      ASSERT_TRUE(std::isfinite(w[a * 3 + b]));
      m(a, b) = w[a * 3 + b];
    }
  EXPECT_LE((m - m.transpose()).norm(), 1e-9);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(m);
  EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
}

TEST(Whitening, Errors) {
  std::vector<float> one = {1, 2};
  EXPECT_THROW(fit_whitening(RowView<float>(one, 2)), InvalidArgument);
  std::vector<float> bad = {1, 2, std::numeric_limits<float>::infinity(), 0};
  EXPECT_THROW(fit_whitening(RowView<float>(bad, 2)), InvalidArgument);
}

TEST(Whitening, WhitenedKeysHaveIdentityCovariance) {
  std::mt19937_64 g(3);
  const size_t d = 8, n = 4096;
  // Anisotropic correlated data.
  Eigen::MatrixXd mix = Eigen::MatrixXd::Random(d, d) + 2.0 * Eigen::MatrixXd::Identity(d, d);
  auto raw = oracle::random_vec(g, n * d);
  std::vector<float> x(n * d);
  for (size_t i = 0; i < n; ++i)
    for (size_t a = 0; a < d; ++a) {
      double s = 0;
      for (size_t b = 0; b < d; ++b) s += mix(a, b) * raw[i * d + b];
      x[i * d + a] = static_cast<float>(s + 3.0);
    }
  auto w = fit_whitening(RowView<float>(x, d));
  auto y = apply(w, x, d);
  EXPECT_LE(oracle::rel_frobenius_from_identity(oracle::covariance(y, d), d), 1e-3);
}

TEST(LookupKeys, DegenerateGroupingIsHeadQuery) {
  ModelGeometry g{1, 2, 2, 4};
  std::vector<float> q = {1, 2, 3, 4, 5, 6, 7, 8};
  auto k = make_lookup_keys(q, KeyMode{}, nullptr, 0, g, 4, CentroidOrg::individual);
  EXPECT_EQ(k.n_slots, 2u);
  EXPECT_EQ(k.chunks, 1u);
  EXPECT_EQ(std::vector<float>(k.key(1, 0).begin(), k.key(1, 0).end()),
            (std::vector<float>{5, 6, 7, 8}));
}

TEST(LookupKeys, GroupConcatenationSplitIntoChunks) {
  ModelGeometry g{1, 4, 1, 4};  // G = 4, d_h = 4
  std::vector<float> q(16);
  std::iota(q.begin(), q.end(), 0.0f);
  auto k = make_lookup_keys(q, KeyMode{}, nullptr, 0, g, 8, CentroidOrg::individual);
  EXPECT_EQ(k.chunks, 2u);
  EXPECT_EQ(k.key_dim, 8u);
  EXPECT_EQ(k.key(0, 0)[0], 0.0f);
  EXPECT_EQ(k.key(0, 0)[7], 7.0f);
  EXPECT_EQ(k.key(0, 1)[0], 8.0f);
  EXPECT_EQ(k.key(0, 1)[7], 15.0f);
}

TEST(LookupKeys, JointOrganisationConcatenatesGroups) {
  ModelGeometry g{1, 4, 2, 2};  // G = 2, group width 4
  std::vector<float> q = {0, 1, 2, 3, 10, 11, 12, 13};
  auto k = make_lookup_keys(q, KeyMode{}, nullptr, 0, g, 2, CentroidOrg::joint);
  EXPECT_EQ(k.n_slots, 1u);
  EXPECT_EQ(k.chunks, 2u);
  EXPECT_EQ(k.key_dim, 4u);
  EXPECT_EQ(std::vector<float>(k.key(0, 0).begin(), k.key(0, 0).end()),
            (std::vector<float>{0, 1, 10, 11}));
  EXPECT_EQ(std::vector<float>(k.key(0, 1).begin(), k.key(0, 1).end()),
            (std::vector<float>{2, 3, 12, 13}));
}

TEST(LookupKeys, UnifiedAtPositionZeroEqualsPreRope) {
  ModelGeometry g{1, 2, 1, 4};
  std::mt19937_64 gen(4);
  auto q = oracle::random_vec(gen, 8);
  KeyMode unified{RopeMode::rope_unified, false, 0};
  auto a = make_lookup_keys(q, unified, nullptr, 0, g, 8, CentroidOrg::individual);
  auto b = make_lookup_keys(q, KeyMode{}, nullptr, 0, g, 8, CentroidOrg::individual);
  EXPECT_EQ(a.data, b.data);
  KeyMode shifted{RopeMode::rope_unified, false, 7};
  auto c = make_lookup_keys(q, shifted, nullptr, 0, g, 8, CentroidOrg::individual);
  EXPECT_NE(c.data, b.data);
}

TEST(LookupKeys, Validation) {
  ModelGeometry g{1, 2, 1, 4};
  std::vector<float> q(8, 1.0f);
  EXPECT_THROW(make_lookup_keys(q, KeyMode{}, nullptr, 0, g, 3, CentroidOrg::individual),
               InvalidArgument);
  KeyMode white{RopeMode::pre_rope, true, 0};
  EXPECT_THROW(make_lookup_keys(q, white, nullptr, 0, g, 8, CentroidOrg::individual),
               InvalidArgument);
}

TEST(AggregateCluster, SingletonIsIdentity) {
  CalibSample s{{0.1f, -0.2f, 0.3f}, {1.5f, -2.5f, 0.25f, 4.0f}, {0.7, -1.3}};
  auto e = aggregate_cluster(std::span<const CalibSample>(&s, 1));
  EXPECT_EQ(e.key, s.key);
  EXPECT_EQ(e.a, s.a);
  EXPECT_EQ(e.log_z, s.log_z);
}

TEST(AggregateCluster, MassWeightedOutputAndMeanMass) {
  // Hand computation: Z = (1, 3), a1 = (1, 0), a2 = (0, 2):
  // a = (1*a1 + 3*a2)/4 = (0.25, 1.5), Z = 2.
  std::vector<CalibSample> m = {{{1.0f, 0.0f}, {1.0f, 0.0f}, {std::log(1.0)}},
                                {{0.0f, 1.0f}, {0.0f, 2.0f}, {std::log(3.0)}}};
  auto e = aggregate_cluster(m);
  EXPECT_FLOAT_EQ(e.a[0], 0.25f);
  EXPECT_FLOAT_EQ(e.a[1], 1.5f);
  EXPECT_NEAR(e.log_z[0], std::log(2.0), 1e-15);
  EXPECT_FLOAT_EQ(e.key[0], 0.5f);
  EXPECT_FLOAT_EQ(e.key[1], 0.5f);
}

TEST(AggregateCluster, PropertiesOverRandomClusters) {
  std::mt19937_64 g(5);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 200; ++trial) {
    const size_t n = 1 + g() % 12, heads = 1 + g() % 3, dh = 4;
    std::vector<CalibSample> m;
    for (size_t i = 0; i < n; ++i) {
      CalibSample s{oracle::random_vec(g, 6), oracle::random_vec(g, heads * dh), {}};
      for (size_t h = 0; h < heads; ++h) s.log_z.push_back(nd(g) * 4.0);
      m.push_back(s);
    }
    auto e = aggregate_cluster(m);
    // Raw-domain reference in long double.
    for (size_t h = 0; h < heads; ++h) {
      long double zsum = 0;
      std::vector<long double> acc(dh, 0);
      for (const auto &s : m) {
        const long double z = std::exp(static_cast<long double>(s.log_z[h]));
        zsum += z;
        for (size_t j = 0; j < dh; ++j) acc[j] += z * s.a[h * dh + j];
      }
      EXPECT_NEAR(std::exp(e.log_z[h]) / static_cast<double>(zsum / n), 1.0, 1e-6);
      for (size_t j = 0; j < dh; ++j)
        EXPECT_NEAR(e.a[h * dh + j], static_cast<double>(acc[j] / zsum), 1e-5);
    }
    // Member order invariance.
    auto shuffled = m;
    std::shuffle(shuffled.begin(), shuffled.end(), g);
    auto e2 = aggregate_cluster(shuffled);
    for (size_t j = 0; j < e.a.size(); ++j) EXPECT_NEAR(e.a[j], e2.a[j], 1e-6 * (1 + std::abs(e.a[j])));
    for (size_t h = 0; h < heads; ++h) EXPECT_NEAR(e.log_z[h], e2.log_z[h], 1e-6);
  }
}

TEST(AggregateCluster, IdenticalOutputsAreKept) {
  std::vector<float> a = {0.3f, -0.7f};
  std::vector<CalibSample> m = {{{1, 0}, a, {2.0}}, {{0, 1}, a, {-5.0}}, {{1, 1}, a, {0.1}}};
  auto e = aggregate_cluster(m);
  EXPECT_NEAR(e.a[0], a[0], 1e-7);
  EXPECT_NEAR(e.a[1], a[1], 1e-7);
  EXPECT_THROW(aggregate_cluster(std::span<const CalibSample>{}), InvalidArgument);
}

TEST(BuildBank, SingleTokenReproducesState) {
  TraceSet ts;
  ts.geometry = {1, 2, 1, 2};
  ts.prefix_len = 5;
  ts.n_tokens = 1;
  ts.layers.push_back({{1, 2, 3, 4}, {1, 2, 3, 4}, {0.5f, 0.25f, -1, 2}, {1.5, -0.5}});
  BuildConfig cfg;
  cfg.cluster.k = 1;
  auto bank = build_bank(ts, cfg);
  ASSERT_EQ(bank.slot(0, 0).entries.size(), 1u);
  auto e = bank.slot(0, 0).entries.entry(0);
  EXPECT_EQ(e.a, ts.layers[0].attn_out);
  EXPECT_EQ(e.log_z, ts.layers[0].log_z);
  EXPECT_EQ(e.key, ts.layers[0].pre_rope_q);
}

TEST(BuildBank, PlantedClustersAreRetrieved) {
  auto data = generate(small_spec());
  BuildConfig cfg;
  cfg.cluster.k = 8;
  cfg.cluster.seed = 3;
  BuildStats stats;
  auto bank = build_bank(data.trace, cfg, &stats);
  EXPECT_EQ(stats.dropped_clusters, 0u);
  // Each planted cluster must map onto one entry: retrieval of a token
  // returns the entry shared by its cluster-mates.
  const auto &g = data.trace.geometry;
  size_t agree = 0, total = 0;
  for (size_t l = 0; l < g.n_layers; ++l)
    for (size_t s = 0; s < bank.n_slots(); ++s) {
      std::map<uint32_t, std::map<size_t, size_t>> votes;
      std::vector<size_t> hit(data.trace.n_tokens);
      for (size_t t = 0; t < data.trace.n_tokens; ++t) {
        auto keys = bank.lookup_keys(data.trace.pre_rope_q(l, t), l);
        hit[t] = retrieve_linear(keys.key(s, 0), bank.slot(l, s).entries).index;
        ++votes[data.labels[t]][hit[t]];
      }
      for (auto &[label, v] : votes) {
        size_t best = 0;
        for (auto &[e, c] : v) best = std::max(best, c);
        agree += best;
      }
      total += data.trace.n_tokens;
    }
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(total), 0.95);
}

TEST(BuildBank, DeterministicAndThreadInvariant) {
  auto data = generate(small_spec());
  BuildConfig cfg;
  cfg.cluster.k = 6;
  cfg.cluster.batch_size = 16;
  cfg.cluster.seed = 9;
  cfg.mode.whitening = true;
  cfg.hier_n_l1 = 2;
  auto b1 = serialize_bank(build_bank(data.trace, cfg));
  auto b2 = serialize_bank(build_bank(data.trace, cfg));
  cfg.threads = 4;
  auto b3 = serialize_bank(build_bank(data.trace, cfg));
  EXPECT_EQ(b1, b2);
  EXPECT_EQ(b1, b3);
}

TEST(BuildBank, JointOrganisation) {
  auto data = generate(small_spec());
  BuildConfig cfg;
  cfg.cluster.k = 8;
  cfg.cluster.centroid_org = CentroidOrg::joint;
  auto bank = build_bank(data.trace, cfg);
  EXPECT_EQ(bank.n_slots(), 1u);
  EXPECT_EQ(bank.key_dim(), 2u * 16u);
  EXPECT_EQ(bank.slot(0, 0).entries.heads(), 4u);
}

TEST(BuildBank, TooManyEmptyClustersRejected) {
  auto spec = small_spec();
  spec.spread = 0.0;  // 8 distinct queries per layer/group
  auto data = generate(spec);
  BuildConfig cfg;
  cfg.cluster.k = 20;
  EXPECT_THROW(build_bank(data.trace, cfg), Error);
  cfg.cluster.k = 12;  // 4 of 12 empty: warning only
  BuildStats stats;
  auto bank = build_bank(data.trace, cfg, &stats);
  EXPECT_EQ(bank.slot(0, 0).entries.size(), 8u);
  EXPECT_GT(stats.dropped_clusters, 0u);
  EXPECT_FALSE(stats.warnings.empty());
}

TEST(BuildBank, WhiteningMatchesPerHeadCovariance) {
  auto spec = small_spec();
  spec.spread = 0.5;
  spec.queries_per_cluster = 64;
  auto data = generate(spec);
  BuildConfig cfg;
  cfg.cluster.k = 4;
  cfg.mode.whitening = true;
  auto bank = build_bank(data.trace, cfg);
  const auto &g = data.trace.geometry;
  for (size_t l = 0; l < g.n_layers; ++l)
    for (size_t h = 0; h < g.h_q; ++h) {
      std::vector<float> y;
      for (size_t t = 0; t < data.trace.n_tokens; ++t) {
        auto q = data.trace.pre_rope_q(l, t).subspan(h * g.d_h, g.d_h);
        auto m = bank.whitening->matrix(l, h);
        for (size_t a = 0; a < g.d_h; ++a) {
          long double s = 0;
          for (size_t b = 0; b < g.d_h; ++b) s += m[a * g.d_h + b] * q[b];
          y.push_back(static_cast<float>(s));
        }
      }
      EXPECT_LE(oracle::rel_frobenius_from_identity(oracle::covariance(y, g.d_h), g.d_h), 1e-3);
    }
}

TEST(BuildBankChunked, SingleChunkEqualsMonolithic) {
  auto data = generate(small_spec());
  BuildConfig cfg;
  cfg.cluster.k = 8;
  std::vector<TraceSet> one = {data.trace};
  EXPECT_EQ(serialize_bank(build_bank_chunked(one, cfg)), serialize_bank(build_bank(data.trace, cfg)));
}

TEST(BuildBankChunked, MatchesMonolithicAndIsOrderIndependent) {
  auto spec = small_spec();
  spec.n_chunks = 4;
  auto data = generate(spec);
  auto merged = merge_chunk_traces(data.chunk_traces);
  EXPECT_EQ(merged.prefix_len, data.trace.prefix_len);
  const auto &g = data.trace.geometry;
  auto worst = [&](const TraceSet &x) {
    double w = 0;
    for (size_t l = 0; l < g.n_layers; ++l)
      for (size_t t = 0; t < x.n_tokens; ++t)
        for (size_t h = 0; h < g.h_q; ++h) {
          auto ra = data.trace.attn_out(l, t).subspan(h * g.d_h, g.d_h);
          auto xa = x.attn_out(l, t).subspan(h * g.d_h, g.d_h);
          AttentionState<float> ref{{ra.begin(), ra.end()}, data.trace.log_z(l, t)[h]};
          AttentionState<float> got{{xa.begin(), xa.end()}, x.log_z(l, t)[h]};
          w = std::max(w, state_error(got, ref));
        }
    return w;
  };
  EXPECT_LE(worst(merged), 1e-5);

  auto permuted = data.chunk_traces;
  std::reverse(permuted.begin(), permuted.end());
  std::swap(permuted[0], permuted[2]);
  auto merged_p = merge_chunk_traces(permuted);
  double w = 0;
  for (size_t l = 0; l < g.n_layers; ++l)
    for (size_t t = 0; t < merged.n_tokens; ++t)
      for (size_t h = 0; h < g.h_q; ++h) {
        auto a = merged.attn_out(l, t).subspan(h * g.d_h, g.d_h);
        auto b = merged_p.attn_out(l, t).subspan(h * g.d_h, g.d_h);
        w = std::max(w, state_error(AttentionState<float>{{b.begin(), b.end()}, merged_p.log_z(l, t)[h]},
                                    AttentionState<float>{{a.begin(), a.end()}, merged.log_z(l, t)[h]}));
      }
  EXPECT_LE(w, 1e-6);

  BuildConfig cfg;
  cfg.cluster.k = 8;
  auto chunked = build_bank_chunked(data.chunk_traces, cfg);
  auto mono = build_bank(data.trace, cfg);
  for (size_t l = 0; l < g.n_layers; ++l)
    for (size_t s = 0; s < mono.n_slots(); ++s) {
      const auto &x = chunked.slot(l, s).entries, &y = mono.slot(l, s).entries;
      ASSERT_EQ(x.size(), y.size());
      for (size_t i = 0; i < x.size(); ++i)
        for (size_t h = 0; h < x.heads(); ++h)
          EXPECT_LE(state_error(x.head_state(i, h), y.head_state(i, h)), 1e-4);
    }
}

TEST(BuildBankChunked, Misalignment) {
  auto spec = small_spec();
  spec.n_chunks = 2;
  auto data = generate(spec);
  auto chunks = data.chunk_traces;
  chunks[1].geometry.n_layers = 1;
  chunks[1].layers.resize(1);
  EXPECT_THROW(merge_chunk_traces(chunks), InvalidArgument);
  spec.queries_per_cluster = 3;
  auto other = generate(spec);
  std::vector<TraceSet> mis = {data.chunk_traces[0], other.chunk_traces[1]};
  EXPECT_THROW(merge_chunk_traces(mis), InvalidArgument);
}
