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
#include <limits>
#include <span>
#include <vector>

#include "asmem/common.hpp"

namespace asmem {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/*! Softmax attention output over one key/value block together with the
 *  log of the softmax normaliser of that block.
 *
 *  Two states for the same query over disjoint blocks combine exactly into
 *  the state of the concatenated block (see merge()). The empty block is
 *  a = 0, log_z = -inf, which is the identity of merge().
 */
template <typename T>
struct AttentionState {
  std::vector<T> a;
  double log_z = kNegInf;

  static AttentionState empty(size_t dim) {
    return AttentionState{std::vector<T>(dim, T(0)), kNegInf};
  }

  bool is_empty() const { return log_z == kNegInf; }
  size_t dim() const { return a.size(); }
};

//! Rows of a row-major matrix, possibly strided (e.g. one KV head out of a
//! [tokens x heads x d_h] tensor).
template <typename T>
struct RowView {
  const T *data = nullptr;
  size_t rows = 0;
  size_t dim = 0;
  size_t stride = 0;

  RowView() = default;
  RowView(const T *d, size_t n, size_t width, size_t row_stride)
      : data(d), rows(n), dim(width), stride(row_stride) {}
  //! Contiguous [n x dim] block.
  RowView(std::span<const T> m, size_t width)
      : data(m.data()), rows(width ? m.size() / width : 0), dim(width),
        stride(width) {}

  std::span<const T> row(size_t i) const { return {data + i * stride, dim}; }
};

/*! Attention of q over (keys, values) with max-subtraction, returning the
 *  output and log-sum-exp of the scaled scores. Accumulates in double.
 */
template <typename T>
AttentionState<T> attn_with_state(std::span<const T> q, RowView<T> keys,
                                  RowView<T> values) {
  const size_t d = q.size();
  if (keys.dim != d || values.dim != d || keys.rows != values.rows)
    throw InvalidArgument("attn_with_state: dimension mismatch");
  if (!all_finite(q)) throw InvalidArgument("attn_with_state: non-finite query");
  const size_t n = keys.rows;
  if (n == 0) return AttentionState<T>::empty(d);

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> scores(n);
  double m = kNegInf;
  for (size_t i = 0; i < n; ++i) {
    scores[i] = dot(q, keys.row(i)) * scale;
    if (!std::isfinite(scores[i]))
      throw InvalidArgument("attn_with_state: non-finite key");
    m = std::max(m, scores[i]);
  }
  double z = 0.0;
  std::vector<double> acc(d, 0.0);
  for (size_t i = 0; i < n; ++i) {
    const double w = std::exp(scores[i] - m);
    z += w;
    auto v = values.row(i);
    for (size_t j = 0; j < d; ++j) acc[j] += w * static_cast<double>(v[j]);
  }
  AttentionState<T> s;
  s.a.resize(d);
  for (size_t j = 0; j < d; ++j) s.a[j] = static_cast<T>(acc[j] / z);
  if (!all_finite<T>(s.a))
    throw InvalidArgument("attn_with_state: non-finite value");
  s.log_z = m + std::log(z);
  return s;
}

template <typename T>
AttentionState<T> attn_with_state(std::span<const T> q, std::span<const T> keys,
                                  std::span<const T> values) {
  const size_t d = q.size();
  if (d == 0 || keys.size() % d != 0 || values.size() != keys.size())
    throw InvalidArgument("attn_with_state: dimension mismatch");
  return attn_with_state<T>(q, RowView<T>(keys, d), RowView<T>(values, d));
}

/*! Exact combination of two states of the same query over disjoint blocks:
 *  Z = Z1 + Z2, a = (Z1 a1 + Z2 a2) / Z, evaluated in the log domain.
 */
template <typename T>
AttentionState<T> merge(const AttentionState<T> &s1, const AttentionState<T> &s2) {
  if (s1.dim() != s2.dim()) throw InvalidArgument("merge: dimension mismatch");
  if (s2.is_empty()) return s1;
  if (s1.is_empty()) return s2;
  AttentionState<T> out;
  out.log_z = logaddexp(s1.log_z, s2.log_z);
  const double w1 = std::exp(s1.log_z - out.log_z);
  const double w2 = std::exp(s2.log_z - out.log_z);
  out.a.resize(s1.dim());
  for (size_t j = 0; j < s1.dim(); ++j)
    out.a[j] = static_cast<T>(w1 * static_cast<double>(s1.a[j]) +
                              w2 * static_cast<double>(s2.a[j]));
  return out;
}

/*! Weight of the first state in merge(s1, s2), i.e. Z1 / (Z1 + Z2). */
inline double merge_weight(double log_z1, double log_z2) {
  if (log_z1 == kNegInf) return 0.0;
  if (log_z2 == kNegInf) return 1.0;
  return std::exp(log_z1 - logaddexp(log_z1, log_z2));
}

template <typename T>
struct Block {
  std::vector<T> keys;    // [n x d]
  std::vector<T> values;  // [n x d]
};

template <typename T>
struct DecomposeResult {
  AttentionState<T> merged;
  AttentionState<T> full;
  double max_rel_err = 0.0;
};

/*! Difference between two states: the largest absolute component deviation
 *  of a relative to the largest magnitude of the reference output, combined
 *  (max) with the absolute log_z deviation.
 */
template <typename T>
double state_error(const AttentionState<T> &got, const AttentionState<T> &ref) {
  if (got.dim() != ref.dim()) throw InvalidArgument("state_error: dimension mismatch");
  double scale = 0.0, dev = 0.0;
  for (size_t j = 0; j < ref.dim(); ++j) {
    scale = std::max(scale, std::abs(static_cast<double>(ref.a[j])));
    dev = std::max(dev, std::abs(static_cast<double>(got.a[j]) -
                                 static_cast<double>(ref.a[j])));
  }
  const double rel = scale > 0.0 ? dev / scale : dev;
  double lz = 0.0;
  if (got.is_empty() != ref.is_empty())
    lz = std::numeric_limits<double>::infinity();
  else if (!ref.is_empty())
    lz = std::abs(got.log_z - ref.log_z);
  return std::max(rel, lz);
}

/*! Folds merge() over per-block states and compares with attention over the
 *  concatenation of all blocks.
 */
template <typename T>
DecomposeResult<T> decompose_check(std::span<const T> q,
                                   std::span<const Block<T>> blocks) {
  if (blocks.empty()) throw InvalidArgument("decompose_check: no blocks");
  const size_t d = q.size();
  DecomposeResult<T> r;
  r.merged = AttentionState<T>::empty(d);
  std::vector<T> all_k, all_v;
  for (const auto &b : blocks) {
    r.merged = merge(r.merged, attn_with_state<T>(q, b.keys, b.values));
    all_k.insert(all_k.end(), b.keys.begin(), b.keys.end());
    all_v.insert(all_v.end(), b.values.begin(), b.values.end());
  }
  r.full = attn_with_state<T>(q, all_k, all_v);
  r.max_rel_err = state_error(r.merged, r.full);
  return r;
}

struct RopeConfig {
  double theta_base = 10000.0;
  size_t virtual_position = 0;
};

/*! Rotates each consecutive coordinate pair of every head by
 *  position * theta_base^(-2i/d_h). Position 0 returns the input unchanged.
 */
template <typename T>
std::vector<T> apply_rope(std::span<const T> q, size_t n_heads, size_t position,
                          const RopeConfig &cfg = {}) {
  require(n_heads > 0 && q.size() % n_heads == 0,
          "apply_rope: vector length is not a multiple of the head count");
  const size_t d = q.size() / n_heads;
  require(d % 2 == 0, "apply_rope: head dimension must be even");
  require(cfg.theta_base > 0.0, "apply_rope: theta_base must be positive");
  std::vector<T> out(q.begin(), q.end());
  if (position == 0) return out;
  for (size_t i = 0; i < d / 2; ++i) {
    const double freq = std::pow(cfg.theta_base, -2.0 * static_cast<double>(i) /
                                                     static_cast<double>(d));
    const double angle = static_cast<double>(position) * freq;
    const double c = std::cos(angle), s = std::sin(angle);
    for (size_t h = 0; h < n_heads; ++h) {
      const size_t base = h * d + 2 * i;
      const double x = q[base], y = q[base + 1];
      out[base] = static_cast<T>(x * c - y * s);
      out[base + 1] = static_cast<T>(x * s + y * c);
    }
  }
  return out;
}

}  // namespace asmem
