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

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace asmem {

/*! Error raised for malformed inputs, schema violations and I/O failures.
 */
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/*! Error raised when caller-supplied parameters are inconsistent
 *  (mapped to the usage exit code by the command line front end).
 */
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string &msg) {
  if (!cond) throw InvalidArgument(msg);
}

//! Deterministic random source. The engine is fully specified by the
//! standard; the distributions below are written out so that streams are
//! identical across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  //! Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  //! Uniform integer in [0, n).
  size_t index(size_t n) {
    return static_cast<size_t>(uniform() * static_cast<double>(n)) % n;
  }

  //! Standard normal via Box-Muller, caching the second variate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  //! Derive an independent child stream (for per-layer / per-group work).
  Rng fork(uint64_t salt) const {
    uint64_t z = seed_mix(salt);
    return Rng(z);
  }

 private:
  uint64_t seed_mix(uint64_t salt) const {
    // splitmix64 over a copy of the engine state and the salt
    std::mt19937_64 copy = engine_;
    uint64_t z = copy() + 0x9E3779B97F4A7C15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <typename T>
double norm2(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

template <typename T>
bool all_finite(std::span<const T> v) {
  for (const T &x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

//! log(exp(x) + exp(y)) with -inf handled as the additive identity.
inline double logaddexp(double x, double y) {
  if (x == -std::numeric_limits<double>::infinity()) return y;
  if (y == -std::numeric_limits<double>::infinity()) return x;
  const double m = x > y ? x : y;
  return m + std::log1p(std::exp(-std::abs(x - y)));
}

//! Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
//! processed exactly once; results must be written to per-index slots so
//! that the outcome is independent of the thread count.
inline void parallel_for(size_t n, unsigned threads,
                         const std::function<void(size_t)> &fn) {
  if (threads <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const size_t workers = std::min<size_t>(threads, n);
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (size_t i = w; i < n; i += workers) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto &e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace asmem
