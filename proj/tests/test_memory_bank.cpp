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

#include <filesystem>
#include <random>

#include "asmem/accounting.hpp"
#include "asmem/calibration.hpp"
#include "asmem/memory_bank.hpp"
#include "asmem/synth.hpp"
#include "oracle.hpp"

using namespace asmem;

namespace {

EntryList random_entries(std::mt19937_64 &g, size_t k, size_t d) {
  EntryList e(d, 1, 2);
  for (size_t i = 0; i < k; ++i) {
    auto key = oracle::random_vec(g, d);
    auto a = oracle::random_vec(g, 2);
    std::vector<double> z = {0.5};
    e.push_back(key, a, z);
  }
  return e;
}

// Keys scattered around `c` random directions, entries interleaved.
EntryList planted_entries(std::mt19937_64 &g, size_t k, size_t c, size_t d, double noise,
                          std::vector<float> *centers = nullptr) {
  std::vector<float> cs;
  for (size_t i = 0; i < c; ++i) {
    auto v = oracle::random_vec(g, d);
    long double n = 0;
    for (float f : v) n += static_cast<long double>(f) * f;
    for (float f : v) cs.push_back(static_cast<float>(f / std::sqrt(n)));
  }
  EntryList e(d, 1, 1);
  const float a = 0;
  const double z = 0;
  for (size_t i = 0; i < k; ++i) {
    auto noise_v = oracle::random_vec(g, d, noise / std::sqrt(static_cast<double>(d)));
    std::vector<float> key(d);
    for (size_t j = 0; j < d; ++j) key[j] = cs[(i % c) * d + j] + noise_v[j];
    e.push_back(key, std::span<const float>(&a, 1), std::span<const double>(&z, 1));
  }
  if (centers) *centers = cs;
  return e;
}

MemoryBank small_bank(bool whiten, size_t hier_n_l1) {
  SynthSpec s;
  s.geometry = {2, 4, 2, 8};
  s.prefix_len = 32;
  s.n_clusters = 6;
  s.queries_per_cluster = 8;
  s.seed = 4;
  auto data = generate(s);
  BuildConfig cfg;
  cfg.cluster.k = 6;
  cfg.mode.whitening = whiten;
  cfg.hier_n_l1 = hier_n_l1;
  cfg.top_m = 2;
  return build_bank(data.trace, cfg);
}

}  // namespace

TEST(RetrieveLinear, SingleEntry) {
  std::mt19937_64 g(1);
  auto e = random_entries(g, 1, 4);
  auto q = oracle::random_vec(g, 4);
  auto r = retrieve_linear(q, e);
  EXPECT_EQ(r.index, 0u);
  EXPECT_EQ(r.ops, 1u);
}

TEST(RetrieveLinear, ExactKeyMatch) {
  std::mt19937_64 g(2);
  auto e = random_entries(g, 10, 6);
  auto k3 = e.key(3);
  auto r = retrieve_linear(std::vector<float>(k3.begin(), k3.end()), e);
  EXPECT_EQ(r.index, 3u);
  EXPECT_NEAR(r.similarity, 1.0, 1e-12);
}

TEST(RetrieveLinear, MatchesBruteForceOracle) {
  std::mt19937_64 g(3);
  for (int trial = 0; trial < 200; ++trial) {
    auto e = random_entries(g, 256, 16);
    auto q = oracle::random_vec(g, 16);
    auto r = retrieve_linear(q, e);
    EXPECT_EQ(r.index, oracle::cosine_argmax(q, e.keys(), 16));
    EXPECT_EQ(r.ops, 256u);
  }
}

TEST(RetrieveLinear, TiesGoToLowestIndex) {
  EntryList e(2, 1, 1);
  const float a = 0;
  const double z = 0;
  for (auto key : {std::vector<float>{0, 1}, {2, 0}, {1, 0}, {5, 0}})
    e.push_back(key, std::span<const float>(&a, 1), std::span<const double>(&z, 1));
  std::vector<float> q = {3, 0};
  EXPECT_EQ(retrieve_linear(q, e).index, 1u);
}

TEST(RetrieveLinear, Errors) {
  EntryList empty(2, 1, 1);
  std::vector<float> q = {1, 0};
  EXPECT_THROW(retrieve_linear(q, empty), InvalidArgument);
  std::mt19937_64 g(4);
  auto e = random_entries(g, 3, 2);
  std::vector<float> zero = {0, 0};
  EXPECT_THROW(retrieve_linear(zero, e), InvalidArgument);
}

TEST(HierIndex, PartitionOfThousandEntries) {
  std::mt19937_64 g(5);
  auto e = random_entries(g, 1024, 16);
  auto h = build_hier_index(e, 32, 7);
  EXPECT_EQ(h.n_l1(), 32u);
  size_t total = 0;
  std::vector<int> seen(1024, 0);
  for (size_t b = 0; b < h.n_l1(); ++b) {
    total += h.bucket(b).size();
    for (uint32_t id : h.bucket(b)) ++seen[id];
  }
  EXPECT_EQ(total, 1024u);
  for (int s : seen) EXPECT_EQ(s, 1);
  EXPECT_EQ(h.top_m(), kDefaultTopM);
}

TEST(HierIndex, SingleBucketScansEverything) {
  std::mt19937_64 g(6);
  auto e = random_entries(g, 50, 8);
  auto h = build_hier_index(e, 1, 1);
  EXPECT_EQ(h.top_m(), 1u);
  auto q = oracle::random_vec(g, 8);
  auto r = retrieve_hier(q, h, e);
  EXPECT_EQ(r.ops, 51u);
  EXPECT_EQ(r.index, retrieve_linear(q, e).index);
}

TEST(HierIndex, SingletonBuckets) {
  std::mt19937_64 g(7);
  auto e = random_entries(g, 40, 8);
  auto h = build_hier_index(e, 40, 3);
  ASSERT_EQ(h.n_l1(), 40u);
  for (size_t b = 0; b < 40; ++b) EXPECT_EQ(h.bucket(b).size(), 1u);
  for (int t = 0; t < 50; ++t) {
    auto q = oracle::random_vec(g, 8);
    EXPECT_EQ(retrieve_hier(q, h, e, 1).index, retrieve_linear(q, e).index);
  }
}

TEST(HierIndex, DeterministicForSeed) {
  std::mt19937_64 g(8);
  auto e = random_entries(g, 300, 8);
  EXPECT_EQ(build_hier_index(e, 17, 5), build_hier_index(e, 17, 5));
}

TEST(HierIndex, Errors) {
  std::mt19937_64 g(9);
  auto e = random_entries(g, 5, 4);
  EXPECT_THROW(build_hier_index(e, 6, 0), InvalidArgument);
  EXPECT_THROW(build_hier_index(e, 0, 0), InvalidArgument);
  std::vector<float> l1 = {1, 0, 0, 0, 0, 1, 0, 0};
  EXPECT_THROW(HierarchicalIndex::from_partition(4, l1, {{0, 1}, {1, 2, 3, 4}}, 5, 1),
               InvalidArgument);
  EXPECT_THROW(HierarchicalIndex::from_partition(4, l1, {{0, 1}, {}}, 2, 1), InvalidArgument);
  EXPECT_THROW(HierarchicalIndex::from_partition(4, l1, {{0, 1}, {2}}, 5, 1), InvalidArgument);
  auto h = HierarchicalIndex::from_partition(4, l1, {{0, 1}, {2, 3, 4}}, 5, 2);
  EXPECT_THROW(h.set_top_m(3), InvalidArgument);
  EXPECT_THROW(h.set_top_m(0), InvalidArgument);
}

TEST(RetrieveHier, ExhaustiveFanOutEqualsFlat) {
  std::mt19937_64 g(10);
  auto e = random_entries(g, 512, 12);
  auto h = build_hier_index(e, 23, 1);
  for (int t = 0; t < 1000; ++t) {
    auto q = oracle::random_vec(g, 12);
    auto hr = retrieve_hier(q, h, e, h.n_l1());
    auto fr = retrieve_linear(q, e);
    ASSERT_EQ(hr.index, fr.index);
    EXPECT_EQ(hr.similarity, fr.similarity);
    EXPECT_EQ(hr.ops, 23u + 512u);
  }
}

TEST(RetrieveHier, SoundnessAndOpsAccounting) {
  std::mt19937_64 g(11);
  auto e = random_entries(g, 400, 8);
  auto h = build_hier_index(e, 20, 2);
  for (int t = 0; t < 500; ++t) {
    auto q = oracle::random_vec(g, 8);
    const size_t m = 1 + g() % 20;
    auto hr = retrieve_hier(q, h, e, m);
    auto fr = retrieve_linear(q, e);
    EXPECT_LE(hr.similarity, fr.similarity);

    // Independent recount of the fan-out: buckets ranked by cosine, ties low.
    std::vector<std::pair<long double, size_t>> ranked;
    for (size_t b = 0; b < h.n_l1(); ++b) {
      long double dot = 0, qn = 0, kn = 0;
      for (size_t j = 0; j < 8; ++j) {
        dot += static_cast<long double>(q[j]) * h.l1_key(b)[j];
        qn += static_cast<long double>(q[j]) * q[j];
        kn += static_cast<long double>(h.l1_key(b)[j]) * h.l1_key(b)[j];
      }
      ranked.push_back({-dot / std::sqrt(qn * kn), b});
    }
    std::sort(ranked.begin(), ranked.end());
    size_t scanned = 0;
    bool best_inside = false;
    for (size_t i = 0; i < m; ++i)
      for (uint32_t id : h.bucket(ranked[i].second)) {
        ++scanned;
        best_inside |= id == fr.index;
      }
    EXPECT_EQ(hr.ops, 20u + scanned);
    if (best_inside) {
      EXPECT_EQ(hr.index, fr.index);
      EXPECT_EQ(hr.similarity, fr.similarity);
    }
  }
}

TEST(RetrieveHier, PlantedClustersAgreeWithFlat) {
  std::mt19937_64 g(12);
  auto e = planted_entries(g, 2048, 256, 32, 0.3);
  auto h = build_hier_index(e, 45, 3, 16);
  size_t agree = 0, n = 0;
  for (size_t i = 0; i < 2048; i += 2) {
    auto noise = oracle::random_vec(g, 32, 0.05);
    std::vector<float> q(32);
    for (size_t j = 0; j < 32; ++j) q[j] = e.key(i)[j] + noise[j];
    agree += retrieve_hier(q, h, e).index == retrieve_linear(q, e).index;
    ++n;
  }
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(n), 0.99);
}

TEST(RetrieveHier, BalancedBankOpsMatchModel) {
  auto b = make_balanced_bank(8192, 128, 32, 0.05, 16, 3);
  std::mt19937_64 g(13);
  for (int t = 0; t < 20; ++t) {
    auto q = oracle::random_vec(g, 32);
    auto r = retrieve_hier(q, b.index, b.entries, 16);
    EXPECT_EQ(r.ops, 128u + 16u * 64u);
    EXPECT_LT(r.ops, 8192u);
  }
}

TEST(BankSerialization, RoundTripIsByteIdentical) {
  for (bool whiten : {false, true})
    for (size_t nl1 : {size_t{0}, size_t{3}}) {
      auto bank = small_bank(whiten, nl1);
      EXPECT_EQ(bank.has_hier(), nl1 > 0);
      auto bytes = serialize_bank(bank);
      auto back = deserialize_bank(bytes);
      EXPECT_EQ(back, bank);
      EXPECT_EQ(serialize_bank(back), bytes);
    }
}

TEST(BankSerialization, FileRoundTrip) {
  auto bank = small_bank(false, 2);
  const auto path = (std::filesystem::temp_directory_path() / "asmem_mb_bank.asmt").string();
  save_bank(path, bank);
  EXPECT_EQ(load_bank(path), bank);
}

TEST(BankSerialization, MissingWhiteningRejected) {
  auto f = bank_to_tensor_file(small_bank(true, 0));
  std::erase_if(f.tensors, [](const Tensor &t) { return t.name == "whitening"; });
  EXPECT_THROW(bank_from_tensor_file(f), Error);
}

TEST(BankSerialization, SchemaErrors) {
  auto f = bank_to_tensor_file(small_bank(false, 0));
  auto wrong_kind = f;
  wrong_kind.metadata["kind"] = "trace";
  EXPECT_THROW(bank_from_tensor_file(wrong_kind), Error);
  auto wrong_version = f;
  wrong_version.metadata["format_version"] = "99";
  EXPECT_THROW(bank_from_tensor_file(wrong_version), Error);
  auto missing = f;
  std::erase_if(missing.tensors, [](const Tensor &t) { return t.name == "layer1.slot0.a"; });
  EXPECT_THROW(bank_from_tensor_file(missing), Error);
}

TEST(BankSerialization, EmptySlotRejected) {
  auto bank = small_bank(false, 0);
  bank.layers[1][0].entries = EntryList(bank.key_dim(), bank.heads_per_slot(), bank.geometry.d_h);
  EXPECT_THROW(serialize_bank(bank), Error);
}
