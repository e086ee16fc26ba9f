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

// asmctl: synth, build, query, verify, bench and inspect.
//
// Exit codes: 0 success, 1 a verification check failed, 2 usage,
// validation, schema or I/O error.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "asmem/asmem.hpp"

namespace {

using namespace asmem;

struct Global {
  uint64_t seed = 0;
  unsigned threads = 1;
  std::string precision = "f32";
  std::string output;
};

std::string fmt(double v, const char *spec = "%.3e") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

// ---------------------------------------------------------------- synth

struct SynthOpts {
  size_t layers = 2, hq = 4, hkv = 2, dh = 8;
  size_t prefix = 256, clusters = 8, per_cluster = 16, eval = 4, local = 4, chunks = 1;
  double spread = 0.05, query_norm = 0.0, theta = 10000.0;
  bool positional = false;
};

int cmd_synth(const Global &gl, const SynthOpts &o) {
  SynthSpec s;
  s.geometry = {o.layers, o.hq, o.hkv, o.dh};
  s.prefix_len = o.prefix;
  s.n_clusters = o.clusters;
  s.queries_per_cluster = o.per_cluster;
  s.eval_per_cluster = o.eval;
  s.local_len = o.local;
  s.spread = o.spread;
  s.seed = gl.seed;
  s.n_chunks = o.chunks;
  s.query_norm = o.query_norm;
  s.positional = o.positional;
  s.theta_base = o.theta;
  s.validate();
  auto data = generate(s);
  const std::string base = gl.output.empty() ? "synth" : gl.output;
  const std::string trace = base + ".trace.asmt", oracle = base + ".oracle.asmt";
  save_trace_set(trace, data.trace);
  write_tensor_file(oracle, oracle_to_tensor_file(data));
  std::cout << "trace: " << trace << "\n" << "oracle: " << oracle << "\n";
  for (size_t c = 0; c < data.chunk_traces.size(); ++c) {
    const std::string p = base + ".chunk" + std::to_string(c) + ".asmt";
    save_trace_set(p, data.chunk_traces[c]);
    std::cout << "chunk: " << p << "\n";
  }
  std::cout << "tokens: " << data.trace.n_tokens << "\n"
            << "request_tokens: " << data.request.n_tokens << "\n"
            << "prefix_len: " << s.prefix_len << "\n";
  return 0;
}

// ---------------------------------------------------------------- build

struct BuildOpts {
  std::vector<std::string> traces;
  size_t k = 16;
  size_t iters = 50;
  size_t batch = 1024;
  std::string mode = "pre";
  bool whiten = false;
  long long vpos = -1;
  size_t dprime = 0;
  std::string org = "individual";
  size_t hier_nl1 = 0;
  size_t top_m = kDefaultTopM;
  bool chunked = false;
  bool strict = false;
};

int cmd_build(const Global &gl, const BuildOpts &o) {
  if (o.traces.empty()) throw InvalidArgument("--traces is required");
  if (!o.chunked && o.traces.size() != 1)
    throw InvalidArgument("several trace files need --chunked");
  BuildConfig cfg;
  cfg.mode.rope = parse_rope_mode(o.mode);
  cfg.mode.whitening = o.whiten;
  cfg.cluster.k = o.k;
  cfg.cluster.iterations = o.iters;
  cfg.cluster.batch_size = o.batch;
  cfg.cluster.seed = gl.seed;
  cfg.cluster.centroid_org = parse_centroid_org(o.org);
  cfg.d_prime = o.dprime;
  cfg.threads = gl.threads;
  cfg.hier_n_l1 = o.hier_nl1;
  cfg.top_m = o.top_m;
  cfg.cluster.validate();

  std::vector<TraceSet> traces;
  for (const auto &p : o.traces) traces.push_back(load_trace_set(p));
  TraceSet ts = o.chunked ? merge_chunk_traces(traces) : std::move(traces.front());
  cfg.mode.virtual_position = o.vpos < 0 ? ts.prefix_len : static_cast<size_t>(o.vpos);
  if (cfg.d_prime == 0) cfg.d_prime = default_d_prime(ts.geometry);
  check_d_prime(ts.geometry, cfg.d_prime);

  const auto t0 = std::chrono::steady_clock::now();
  BuildStats stats;
  auto bank = build_bank(ts, cfg, &stats);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto &w : stats.warnings) std::cerr << "warning: " << w << "\n";
  if (o.strict && stats.dropped_clusters > 0)
    throw InvalidArgument("insufficient calibration data for k = " + std::to_string(o.k) +
                          " (" + std::to_string(stats.dropped_clusters) +
                          " empty clusters, --strict)");

  const std::string out = gl.output.empty() ? "bank.asmt" : gl.output;
  save_bank(out, bank);
  std::cout << "bank: " << out << "\n";
  for (size_t l = 0; l < stats.entries.size(); ++l) {
    std::cout << "layer " << l << " entries:";
    for (size_t n : stats.entries[l]) std::cout << ' ' << n;
    std::cout << "\n";
  }
  std::cout << "dropped_clusters: " << stats.dropped_clusters << "\n";
  std::cerr << "build_time_s: " << fmt(secs, "%.3f") << "\n";
  return 0;
}

// ---------------------------------------------------------------- query

struct QueryOpts {
  std::string bank, request, csv;
  bool hier = false;
};

int cmd_query(const Global &gl, const QueryOpts &o) {
  auto bank = load_bank(o.bank);
  auto file = read_tensor_file(o.request);
  auto req = request_from_tensor_file(file);
  if (!(req.geometry == bank.geometry))
    throw InvalidArgument("request geometry does not match the bank");
  auto oracle = oracle_from_tensor_file(file);

  MergeReport rep;
  std::vector<double> row_error;
  if (oracle) {
    auto r = reconstruction_error(req, bank, *oracle, o.hier, gl.threads);
    rep = std::move(r.merge);
    row_error = std::move(r.row_error);
    auto errs = r.token_error;
    std::sort(errs.begin(), errs.end());
    std::cerr << "median_token_error: " << fmt(errs[errs.size() / 2]) << "\n"
              << "max_token_error: " << fmt(errs.back()) << "\n";
  } else {
    rep = infer_merge(req, bank, o.hier, gl.threads);
  }
  std::cerr << "mean_ops: " << fmt(rep.mean_ops(), "%.2f") << "\n";
  if (!gl.output.empty()) write_tensor_file(gl.output, report_to_tensor_file(rep));

  const std::vector<double> *err = oracle ? &row_error : nullptr;
  if (o.csv.empty() || o.csv == "-") {
    write_report_csv(std::cout, rep, err);
  } else {
    std::ofstream f(o.csv);
    if (!f) throw Error("cannot open '" + o.csv + "' for writing");
    write_report_csv(f, rep, err);
  }
  return 0;
}

// ---------------------------------------------------------------- verify

struct VerifyOpts {
  std::string bank;
  size_t instances = 1000;
  size_t queries = 2000;
};

struct Reporter {
  bool ok = true;
  void line(const std::string &name, bool pass, const std::string &detail) {
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << name << ' ' << detail << "\n";
  }
};

template <typename T>
double decomposition_worst(Rng &rng, size_t instances) {
  double worst = 0.0;
  const size_t dims[] = {4, 8, 64};
  for (size_t i = 0; i < instances; ++i) {
    const size_t d = dims[rng.index(3)];
    const size_t nb = 1 + rng.index(8);
    std::vector<Block<T>> blocks(nb);
    for (auto &b : blocks) {
      const size_t n = 1 + rng.index(32);
      b.keys.resize(n * d);
      b.values.resize(n * d);
      for (auto &x : b.keys) x = static_cast<T>(rng.normal());
      for (auto &x : b.values) x = static_cast<T>(rng.normal());
    }
    std::vector<T> q(d);
    for (auto &x : q) x = static_cast<T>(rng.normal());
    worst = std::max(worst, decompose_check<T>(q, blocks).max_rel_err);
  }
  return worst;
}

void check_decomposition(Reporter &r, const Global &gl, const VerifyOpts &o) {
  Rng rng = Rng(gl.seed).fork(1);
  const bool f64 = gl.precision == "f64";
  const double w = f64 ? decomposition_worst<double>(rng, o.instances)
                       : decomposition_worst<float>(rng, o.instances);
  const double tol = f64 ? 1e-12 : 1e-5;
  r.line("decomposition", w <= tol,
         "precision=" + gl.precision + " max_rel_err=" + fmt(w) + " tol=" + fmt(tol, "%.0e"));
}

// Evaluated on f64 states: with f32 outputs a near-cancelling merge turns
// the rounding of an intermediate state into a large relative error.
void check_merge_algebra(Reporter &r, const Global &gl, const VerifyOpts &o) {
  Rng rng = Rng(gl.seed).fork(2);
  double worst = 0.0;
  bool identity = true;
  auto random_state = [&](size_t d) {
    AttentionState<double> s{std::vector<double>(d), 3.0 * rng.normal()};
    for (auto &x : s.a) x = rng.normal();
    return s;
  };
  for (size_t i = 0; i < o.instances; ++i) {
    const size_t d = 1 + rng.index(16);
    auto a = random_state(d), b = random_state(d), c = random_state(d);
    worst = std::max(worst, state_error(merge(a, b), merge(b, a)));
    worst = std::max(worst, state_error(merge(merge(a, b), c), merge(a, merge(b, c))));
    const double mass = std::exp(merge(a, b).log_z);
    const double want = std::exp(a.log_z) + std::exp(b.log_z);
    worst = std::max(worst, std::abs(mass - want) / want);
    auto e = AttentionState<double>::empty(d);
    auto m = merge(a, e);
    identity = identity && m.a == a.a && m.log_z == a.log_z;
  }
  r.line("merge_algebra", worst <= 1e-6 && identity,
         "max_err=" + fmt(worst) + " identity=" + (identity ? "exact" : "broken"));
}

void check_chunked(Reporter &r, const Global &gl) {
  SynthSpec s;
  s.geometry = {2, 4, 2, 8};
  s.prefix_len = 256;
  s.n_chunks = 4;
  s.n_clusters = 8;
  s.queries_per_cluster = 16;
  s.seed = Rng(gl.seed).fork(3).next_u64();
  auto data = generate(s);
  auto merged = merge_chunk_traces(data.chunk_traces);
  const auto &g = s.geometry;
  double state_worst = 0.0;
  for (size_t l = 0; l < g.n_layers; ++l)
    for (size_t t = 0; t < merged.n_tokens; ++t)
      for (size_t h = 0; h < g.h_q; ++h) {
        auto x = merged.attn_out(l, t).subspan(h * g.d_h, g.d_h);
        auto y = data.trace.attn_out(l, t).subspan(h * g.d_h, g.d_h);
        state_worst = std::max(
            state_worst,
            state_error(AttentionState<float>{{x.begin(), x.end()}, merged.log_z(l, t)[h]},
                        AttentionState<float>{{y.begin(), y.end()}, data.trace.log_z(l, t)[h]}));
      }
  BuildConfig cfg;
  cfg.cluster.k = 8;
  cfg.cluster.seed = gl.seed;
  cfg.threads = gl.threads;
  auto a = build_bank(merged, cfg), b = build_bank(data.trace, cfg);
  double entry_worst = 0.0;
  bool same_shape = true;
  for (size_t l = 0; l < g.n_layers; ++l)
    for (size_t sl = 0; sl < a.n_slots(); ++sl) {
      const auto &x = a.slot(l, sl).entries, &y = b.slot(l, sl).entries;
      if (x.size() != y.size()) {
        same_shape = false;
        continue;
      }
      for (size_t i = 0; i < x.size(); ++i)
        for (size_t h = 0; h < x.heads(); ++h)
          entry_worst = std::max(entry_worst, state_error(x.head_state(i, h), y.head_state(i, h)));
    }
  r.line("chunked_equivalence", state_worst <= 1e-5 && entry_worst <= 1e-4 && same_shape,
         "state_err=" + fmt(state_worst) + " entry_err=" + fmt(entry_worst));
}

void check_hier(Reporter &r, const Global &gl, const VerifyOpts &o, const MemoryBank *bank) {
  Rng rng = Rng(gl.seed).fork(4);
  size_t checked = 0, agree = 0;
  auto run = [&](const EntryList &entries, const HierarchicalIndex &index) {
    for (size_t i = 0; i < o.queries; ++i) {
      std::vector<float> q(entries.key_dim());
      for (auto &x : q) x = static_cast<float>(rng.normal());
      auto h = retrieve_hier(q, index, entries, index.n_l1());
      auto f = retrieve_linear(q, entries);
      ++checked;
      agree += h.index == f.index;
    }
  };
  if (bank && bank->has_hier()) {
    for (const auto &layer : bank->layers)
      for (const auto &slot : layer) run(slot.entries, *slot.hier);
  } else {
    EntryList e(32, 1, 1);
    const float a = 0.0f;
    const double z = 0.0;
    std::vector<float> key(32);
    for (size_t i = 0; i < 1024; ++i) {
      for (auto &x : key) x = static_cast<float>(rng.normal());
      e.push_back(key, std::span<const float>(&a, 1), std::span<const double>(&z, 1));
    }
    run(e, build_hier_index(e, 32, rng.next_u64()));
  }
  r.line("hier_equals_flat", agree == checked,
         "agree=" + std::to_string(agree) + "/" + std::to_string(checked));
}

// Full-rank keys: random rotation of independent axes with scales in
// [e^-1, e].
void check_whitening(Reporter &r, const Global &gl) {
  Rng rng = Rng(gl.seed).fork(5);
  const size_t d = 64, n = 4096;
  Eigen::MatrixXd g(d, d);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  Eigen::VectorXd scale(d);
  for (Eigen::Index i = 0; i < scale.size(); ++i) scale(i) = std::exp(2.0 * rng.uniform() - 1.0);
  const Eigen::MatrixXd mix = q * scale.asDiagonal();
  std::vector<float> x(n * d);
  Eigen::VectorXd z(d);
  for (size_t i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = rng.normal();
    const Eigen::VectorXd v = mix * z;
    for (size_t a = 0; a < d; ++a) x[i * d + a] = static_cast<float>(v(static_cast<Eigen::Index>(a)) + 1.0);
  }
  auto w = fit_whitening(RowView<float>(x, d));
  Eigen::MatrixXd y(n, d);
  for (size_t i = 0; i < n; ++i)
    for (size_t a = 0; a < d; ++a) {
      double s = 0.0;
      for (size_t b = 0; b < d; ++b) s += w[a * d + b] * static_cast<double>(x[i * d + b]);
      y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = s;
    }
  y.rowwise() -= y.colwise().mean();
  Eigen::MatrixXd c = y.transpose() * y / static_cast<double>(n - 1);
  const double rel = (c - Eigen::MatrixXd::Identity(d, d)).norm() / std::sqrt(static_cast<double>(d));
  r.line("whitening_identity", rel <= 1e-3, "rel_frobenius=" + fmt(rel));
}

void check_footprint(Reporter &r, const Global &gl) {
  Rng rng = Rng(gl.seed).fork(6);
  bool ok = true;
  for (int i = 0; i < 100; ++i) {
    const size_t hkv = 1 + rng.index(16), grp = 1 + rng.index(8), dh = 2 * (1 + rng.index(128));
    const uint64_t len = 1 + rng.index(1 << 20);
    TrafficModel m{{1, hkv * grp, hkv, dh}, len, len, 2 * dh};
    ok = ok && asm_traffic(m) == gqa_traffic(m);
  }
  r.line("footprint_identity", ok, "geometries=100");
}

void check_exact_dictionary(Reporter &r, const Global &gl) {
  SynthSpec s;
  s.geometry = {2, 4, 2, 8};
  s.prefix_len = 128;
  s.n_clusters = 8;
  s.queries_per_cluster = 4;
  s.spread = 0.1;
  s.seed = Rng(gl.seed).fork(7).next_u64();
  auto data = generate(s);
  BuildConfig cfg;
  cfg.cluster.k = data.trace.n_tokens;
  cfg.cluster.seed = gl.seed;
  auto bank = build_bank(data.trace, cfg);
  std::vector<std::vector<float>> lk, lv;
  for (size_t l = 0; l < s.geometry.n_layers; ++l) {
    lk.push_back(data.request.layers[l].local_k);
    lv.push_back(data.request.layers[l].local_v);
  }
  auto req = request_from_trace(data.trace, lk, lv, s.local_len);
  auto rep = reconstruction_error(req, bank, data.oracle, false, gl.threads);
  const double w = *std::max_element(rep.token_error.begin(), rep.token_error.end());
  r.line("exact_dictionary", w <= 1e-5, "max_err=" + fmt(w));
}

int cmd_verify(const Global &gl, const VerifyOpts &o) {
  std::optional<MemoryBank> bank;
  if (!o.bank.empty()) bank = load_bank(o.bank);
  Reporter r;
  if (bank) r.line("bank_schema", true, o.bank);
  check_decomposition(r, gl, o);
  check_merge_algebra(r, gl, o);
  check_chunked(r, gl);
  check_hier(r, gl, o, bank ? &*bank : nullptr);
  check_whitening(r, gl);
  check_footprint(r, gl);
  check_exact_dictionary(r, gl);
  return r.ok ? 0 : 1;
}

// ---------------------------------------------------------------- bench

struct BenchOpts {
  std::vector<std::string> modes = {"full", "flat", "hier"};
  std::vector<size_t> ks = {1024, 2048, 4096, 8192, 16384};
  size_t trials = 256, key_dim = 256, dh = 128, top_m = kDefaultTopM;
  double spread = 0.05;
};

int cmd_bench(const Global &gl, const BenchOpts &o) {
  BenchConfig cfg;
  cfg.modes.clear();
  for (const auto &m : o.modes) cfg.modes.push_back(parse_bench_mode(m));
  cfg.ks = o.ks;
  cfg.trials = o.trials;
  cfg.seed = gl.seed;
  cfg.key_dim = o.key_dim;
  cfg.d_h = o.dh;
  cfg.top_m = o.top_m;
  cfg.spread = o.spread;
  auto rows = run_scaling_bench(cfg);
  if (gl.output.empty()) {
    write_bench_csv(std::cout, rows);
  } else {
    std::ofstream f(gl.output);
    if (!f) throw Error("cannot open '" + gl.output + "' for writing");
    write_bench_csv(f, rows);
  }
  return 0;
}

// ---------------------------------------------------------------- inspect

int cmd_inspect(const std::string &path) {
  auto b = load_bank(path);
  const auto &g = b.geometry;
  std::cout << "k: " << b.k << "\n"
            << "mode: " << to_string(b.mode.rope) << "\n"
            << "whitening: " << (b.mode.whitening ? 1 : 0) << "\n"
            << "virtual_position: " << b.mode.virtual_position << "\n"
            << "d_prime: " << b.d_prime << "\n"
            << "centroid_org: " << to_string(b.centroid_org) << "\n"
            << "n_l1: " << (b.has_hier() ? b.layers[0][0].hier->n_l1() : 0) << "\n"
            << "top_m: " << (b.has_hier() ? b.layers[0][0].hier->top_m() : 0) << "\n"
            << "n_layers: " << g.n_layers << "\n"
            << "h_q: " << g.h_q << "\n"
            << "h_kv: " << g.h_kv << "\n"
            << "d_h: " << g.d_h << "\n"
            << "prefix_len: " << b.prefix_len << "\n"
            << "seed: " << b.seed << "\n";
  for (size_t l = 0; l < b.layers.size(); ++l) {
    size_t lo = SIZE_MAX, hi = 0, total = 0;
    for (const auto &s : b.layers[l]) {
      lo = std::min(lo, s.entries.size());
      hi = std::max(hi, s.entries.size());
      total += s.entries.size();
    }
    std::cout << "layer " << l << ": slots=" << b.layers[l].size() << " entries=" << total
              << " min=" << lo << " max=" << hi << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"attention-state memory toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "key=value file; command-line flags take precedence");

  Global gl;
  app.add_option("--seed", gl.seed, "random seed")->capture_default_str();
  app.add_option("--threads", gl.threads, "worker threads")
      ->check(CLI::Range(1u, 1024u))
      ->capture_default_str();
  app.add_option("--precision", gl.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  app.add_option("--output,-o", gl.output, "output path (or prefix for synth)");

  SynthOpts so;
  auto *synth = app.add_subcommand("synth", "generate a planted-cluster trace and oracle");
  synth->add_option("--layers", so.layers)->capture_default_str();
  synth->add_option("--hq", so.hq)->capture_default_str();
  synth->add_option("--hkv", so.hkv)->capture_default_str();
  synth->add_option("--dh", so.dh)->capture_default_str();
  synth->add_option("--prefix", so.prefix)->capture_default_str();
  synth->add_option("--clusters", so.clusters)->capture_default_str();
  synth->add_option("--per-cluster", so.per_cluster, "calibration tokens per cluster")
      ->capture_default_str();
  synth->add_option("--eval", so.eval, "request tokens per cluster")->capture_default_str();
  synth->add_option("--local", so.local, "non-prefix tokens in the request")
      ->capture_default_str();
  synth->add_option("--spread", so.spread, "angular spread (radians)")->capture_default_str();
  synth->add_option("--chunks", so.chunks, "also write per-chunk traces")->capture_default_str();
  synth->add_option("--query-norm", so.query_norm, "0 = d_h")->capture_default_str();
  synth->add_option("--theta", so.theta, "rotary base")->capture_default_str();
  synth->add_flag("--positional", so.positional, "token i at position prefix + i");

  BuildOpts bo;
  auto *build = app.add_subcommand("build", "cluster traces into a memory bank");
  build->add_option("--traces", bo.traces, "trace file(s)")->required();
  build->add_option("--k", bo.k, "entries per layer/slot")->capture_default_str();
  build->add_option("--iters", bo.iters)->capture_default_str();
  build->add_option("--batch", bo.batch, "mini-batch size")->capture_default_str();
  build->add_option("--mode", bo.mode)
      ->check(CLI::IsMember({"pre", "unified"}))
      ->capture_default_str();
  build->add_flag("--whiten", bo.whiten);
  build->add_option("--vpos", bo.vpos, "virtual position for unified mode (default prefix)");
  build->add_option("--dprime", bo.dprime, "lookup key width (0 = 2*d_h)")->capture_default_str();
  build->add_option("--org", bo.org)
      ->check(CLI::IsMember({"individual", "joint"}))
      ->capture_default_str();
  build->add_option("--hier-nl1", bo.hier_nl1, "first-level buckets (0 = flat only)")
      ->capture_default_str();
  build->add_option("--top-m", bo.top_m)->capture_default_str();
  build->add_flag("--chunked", bo.chunked, "merge several chunk traces first");
  build->add_flag("--strict", bo.strict, "fail on any empty cluster");

  QueryOpts qo;
  auto *query = app.add_subcommand("query", "retrieve and merge for a request file");
  query->add_option("--bank", qo.bank)->required()->check(CLI::ExistingFile);
  query->add_option("--request", qo.request, "request or oracle file")
      ->required()
      ->check(CLI::ExistingFile);
  query->add_flag("--hier", qo.hier, "use the hierarchical index");
  query->add_option("--csv", qo.csv, "CSV path ('-' = stdout)");

  VerifyOpts vo;
  auto *verify = app.add_subcommand("verify", "run the invariant checks");
  verify->add_option("--bank", vo.bank, "also check this bank")->check(CLI::ExistingFile);
  verify->add_option("--instances", vo.instances)->capture_default_str();
  verify->add_option("--queries", vo.queries)->capture_default_str();

  BenchOpts beo;
  auto *bench = app.add_subcommand("bench", "op-count and wall-clock scaling");
  bench->add_option("--modes", beo.modes)->delimiter(',')->capture_default_str();
  bench->add_option("--k", beo.ks)->delimiter(',')->capture_default_str();
  bench->add_option("--trials", beo.trials)->capture_default_str();
  bench->add_option("--key-dim", beo.key_dim)->capture_default_str();
  bench->add_option("--dh", beo.dh)->capture_default_str();
  bench->add_option("--top-m", beo.top_m)->capture_default_str();
  bench->add_option("--spread", beo.spread)->capture_default_str();

  std::string inspect_path;
  auto *inspect = app.add_subcommand("inspect", "print bank metadata");
  inspect->add_option("bank", inspect_path)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(gl, so);
    if (*build) return cmd_build(gl, bo);
    if (*query) return cmd_query(gl, qo);
    if (*verify) return cmd_verify(gl, vo);
    if (*bench) return cmd_bench(gl, beo);
    if (*inspect) return cmd_inspect(inspect_path);
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
