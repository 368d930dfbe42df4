#include "meprop/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <new>
#include <ostream>
#include <thread>

#include "meprop/dataio.hpp"
#include "meprop/error.hpp"
#include "meprop/linalg.hpp"
#include "meprop/rng.hpp"
#include "meprop/sparsify.hpp"

namespace meprop {

void BenchOptions::validate() const {
  if (batch == 0 || n == 0 || m == 0) throw ConfigError("bench: dimensions must be >= 1");
  if (reps < 5) throw ConfigError("bench: reps must be >= 5");
  if (threads == 0) throw ConfigError("bench: threads must be >= 1");
  if (verify_every == 0) throw ConfigError("bench: verify-every must be >= 1");
  for (const std::size_t k : k_list) {
    if (k == 0 || k > n) {
      throw ConfigError("bench: k (" + std::to_string(k) + ") must be in [1, n=" +
                        std::to_string(n) + "]");
    }
  }
}

namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 == 1 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

/// Copies rows [begin, end) of `a`.
template <typename T>
Matrix<T> rows_of(const Matrix<T>& a, std::size_t begin, std::size_t end) {
  Matrix<T> out(end - begin, a.cols());
  std::copy(a.data().begin() + begin * a.cols(), a.data().begin() + end * a.cols(),
            out.data().begin());
  return out;
}

template <typename T>
struct Workspace {
  const MatmulProblem<T>* problem = nullptr;
  std::size_t threads = 1;
  std::vector<Matrix<T>> g_parts;  // batch slices of G (threaded mode)
  std::vector<Matrix<T>> x_parts;  // batch slices of X
  std::vector<Matrix<T>> dw_parts;
  std::vector<Matrix<T>> dx_parts;
  Matrix<T> dW;
  Matrix<T> dX;
};

template <typename T>
std::vector<std::size_t> split_points(std::size_t b, std::size_t parts) {
  std::vector<std::size_t> p(parts + 1);
  for (std::size_t i = 0; i <= parts; ++i) p[i] = b * i / parts;
  return p;
}

template <typename T>
void run_dense(Workspace<T>& ws, FlopCounter& flops) {
  const auto& pr = *ws.problem;
  if (ws.threads == 1) {
    matmul_tn_accumulate<T>(pr.grad_out, pr.input, ws.dW, flops);
    matmul_nn<T>(pr.grad_out, pr.weight, ws.dX, flops);
    return;
  }
  std::vector<FlopCounter> local(ws.threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < ws.threads; ++t) {
    pool.emplace_back([&, t] {
      matmul_tn_accumulate<T>(ws.g_parts[t], ws.x_parts[t], ws.dw_parts[t], local[t]);
      matmul_nn<T>(ws.g_parts[t], pr.weight, ws.dx_parts[t], local[t]);
    });
  }
  for (auto& th : pool) th.join();
  for (std::size_t t = 0; t < ws.threads; ++t) {
    flops += local[t];
    const T* src = ws.dw_parts[t].data().data();
    T* dst = ws.dW.data().data();
    for (std::size_t i = 0; i < ws.dW.size(); ++i) dst[i] += src[i];
  }
}

template <typename T>
std::vector<std::size_t> run_sparse(Workspace<T>& ws, std::size_t k, FlopCounter& flops) {
  const auto& pr = *ws.problem;
  auto sel = unified_topk<T>(pr.grad_out, k, UnifiedScore::MeanAbs, &flops);
  if (ws.threads == 1) {
    matmul_tn_accumulate_rows<T>(sel.block, sel.indices, pr.input, ws.dW, flops);
    matmul_nn_rows<T>(sel.block, sel.indices, pr.weight, ws.dX, flops);
    return std::move(sel.indices);
  }
  const auto cuts = split_points<T>(pr.grad_out.rows(), ws.threads);
  std::vector<FlopCounter> local(ws.threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < ws.threads; ++t) {
    pool.emplace_back([&, t] {
      const Matrix<T> block = rows_of(sel.block, cuts[t], cuts[t + 1]);
      matmul_tn_accumulate_rows<T>(block, sel.indices, ws.x_parts[t], ws.dw_parts[t], local[t]);
      matmul_nn_rows<T>(block, sel.indices, pr.weight, ws.dx_parts[t], local[t]);
    });
  }
  for (auto& th : pool) th.join();
  for (std::size_t t = 0; t < ws.threads; ++t) {
    flops += local[t];
    for (const std::size_t r : sel.indices) {
      const auto src = ws.dw_parts[t].row(r);
      auto dst = ws.dW.row(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
  return std::move(sel.indices);
}

template <typename T>
void reset_outputs(Workspace<T>& ws) {
  ws.dW.fill(T{0});
  for (auto& p : ws.dw_parts) p.fill(T{0});
}

/// Gathers dX from the per-thread slices when threaded.
template <typename T>
const Matrix<T>& gathered_dx(Workspace<T>& ws) {
  if (ws.threads == 1) return ws.dX;
  const auto& pr = *ws.problem;
  ws.dX.resize(pr.grad_out.rows(), pr.weight.cols());
  std::size_t r0 = 0;
  for (const auto& part : ws.dx_parts) {
    std::copy(part.data().begin(), part.data().end(), ws.dX.data().begin() + r0 * ws.dX.cols());
    r0 += part.rows();
  }
  return ws.dX;
}

/// Recomputes sampled rows of dW and dX from G masked to `kept` with plain
/// loops and compares against the sparse result.
template <typename T>
void check_against_masked_dense(Workspace<T>& ws, const std::vector<std::size_t>& kept,
                                Rng& rng) {
  const auto& pr = *ws.problem;
  const Matrix<T>& G = pr.grad_out;
  const std::size_t b = G.rows();
  const std::size_t n = G.cols();
  const std::size_t m = pr.input.cols();
  std::vector<char> keep(n, 0);
  for (const std::size_t i : kept) keep[i] = 1;
  const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-12;

  auto close = [&](double got, double want, double scale) {
    return std::abs(got - want) <= tol * std::max(1.0, scale);
  };

  constexpr std::size_t kSamples = 8;
  for (std::size_t s = 0; s < kSamples; ++s) {
    // A kept row and an arbitrary row of dW.
    const std::size_t row = s % 2 == 0 ? kept[rng.below(kept.size())] : rng.below(n);
    for (std::size_t j = 0; j < m; j += std::max<std::size_t>(1, m / 64)) {
      double want = 0;
      double scale = 0;
      if (keep[row]) {
        for (std::size_t e = 0; e < b; ++e) {
          const double term = static_cast<double>(G(e, row)) * pr.input(e, j);
          want += term;
          scale += std::abs(term);
        }
      }
      if (!close(ws.dW(row, j), want, scale)) {
        throw NumericError("bench: sparse dW differs from masked dense oracle at (" +
                           std::to_string(row) + ", " + std::to_string(j) + ")");
      }
    }
  }
  const Matrix<T>& dX = gathered_dx(ws);
  for (std::size_t s = 0; s < kSamples; ++s) {
    const std::size_t e = rng.below(b);
    for (std::size_t j = 0; j < m; j += std::max<std::size_t>(1, m / 64)) {
      double want = 0;
      double scale = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!keep[i]) continue;
        const double term = static_cast<double>(G(e, i)) * pr.weight(i, j);
        want += term;
        scale += std::abs(term);
      }
      if (!close(dX(e, j), want, scale)) {
        throw NumericError("bench: sparse dX differs from masked dense oracle at (" +
                           std::to_string(e) + ", " + std::to_string(j) + ")");
      }
    }
  }
}

template <typename T>
std::vector<BenchResult> bench_impl(const BenchOptions& opt) {
  std::vector<BenchResult> results;
  MatmulProblem<T> problem;
  Workspace<T> ws;
  try {
    problem = synth_matmul<T>(opt.batch, opt.n, opt.m, opt.seed);
    ws.problem = &problem;
    ws.threads = std::min(opt.threads, opt.batch);
    ws.dW = Matrix<T>(opt.n, opt.m);
    if (ws.threads > 1) {
      const auto cuts = split_points<T>(opt.batch, ws.threads);
      for (std::size_t t = 0; t < ws.threads; ++t) {
        ws.g_parts.push_back(rows_of(problem.grad_out, cuts[t], cuts[t + 1]));
        ws.x_parts.push_back(rows_of(problem.input, cuts[t], cuts[t + 1]));
        ws.dw_parts.emplace_back(opt.n, opt.m);
        ws.dx_parts.emplace_back();
      }
    }
  } catch (const std::bad_alloc&) {
    BenchResult r;
    r.method = "dense";
    r.batch = opt.batch;
    r.n = opt.n;
    r.m = opt.m;
    r.k = opt.n;
    r.skipped = true;
    r.note = "skipped: operands do not fit in memory";
    results.push_back(r);
    return results;
  }

  const std::uint64_t dense_madds = 2ull * opt.batch * opt.n * opt.m;

  BenchResult dense;
  dense.method = "dense";
  dense.batch = opt.batch;
  dense.n = opt.n;
  dense.m = opt.m;
  dense.k = opt.n;
  for (std::size_t r = 0; r < opt.warmup + opt.reps; ++r) {
    reset_outputs(ws);
    FlopCounter flops;
    const auto t0 = Clock::now();
    run_dense(ws, flops);
    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    if (r >= opt.warmup) dense.samples_ms.push_back(ms);
    dense.multiply_adds = flops.multiply_adds;
  }
  dense.median_ms = median(dense.samples_ms);
  results.push_back(dense);

  Rng check_rng = Rng(opt.seed).split(7);
  for (const std::size_t k : opt.k_list) {
    BenchResult res;
    res.method = "meprop";
    res.batch = opt.batch;
    res.n = opt.n;
    res.m = opt.m;
    res.k = k;
    for (std::size_t r = 0; r < opt.warmup + opt.reps; ++r) {
      reset_outputs(ws);
      FlopCounter flops;
      const auto t0 = Clock::now();
      const auto kept = run_sparse(ws, k, flops);
      const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      if (r % opt.verify_every == 0) {
        check_against_masked_dense(ws, kept, check_rng);
        res.verified = true;
      }
      if (r >= opt.warmup) res.samples_ms.push_back(ms);
      res.multiply_adds = flops.multiply_adds + flops.selections;
      res.selections = flops.selections;
      res.flop_speedup = static_cast<double>(dense_madds) /
                         static_cast<double>(flops.multiply_adds);
    }
    res.median_ms = median(res.samples_ms);
    res.speedup = dense.median_ms / res.median_ms;
    results.push_back(res);
  }
  return results;
}

}  // namespace

std::vector<BenchResult> bench_backward(const BenchOptions& options) {
  options.validate();
  return options.f64 ? bench_impl<double>(options) : bench_impl<float>(options);
}

void write_bench_csv(std::ostream& out, const std::vector<BenchResult>& results) {
  out << "method,k,time_ms,speedup,batch,n,m,multiply_adds,selections,flop_speedup,verified,note\n";
  char buf[256];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.4f,%.3f,%zu,%zu,%zu,%llu,%llu,%.3f,%d,",
                  r.method.c_str(), r.k, r.median_ms, r.speedup, r.batch, r.n, r.m,
                  static_cast<unsigned long long>(r.multiply_adds),
                  static_cast<unsigned long long>(r.selections), r.flop_speedup,
                  r.verified ? 1 : 0);
    out << buf << r.note << '\n';
  }
}

}  // namespace meprop
