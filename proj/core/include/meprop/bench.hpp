#pragma once

// Dense vs sparsified linear-backward micro-benchmark on synthetic operands.
//
// One "backward" is the pair dW += G^T X and dX = G W for a b x n output
// gradient G, a b x m input X and n x m weights W. The sparsified variant
// picks one index set for the whole batch (unified top-k), compresses G to a
// b x k block and runs both products on it; selection is inside the timed
// region.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace meprop {

struct BenchOptions {
  std::size_t batch = 256;
  std::size_t n = 2048;  ///< output dimension (rows of W)
  std::size_t m = 2048;  ///< input dimension (cols of W)
  std::vector<std::size_t> k_list = {8, 16, 32, 64, 128, 256, 512};
  std::size_t reps = 5;     ///< timed repetitions, at least 5
  std::size_t warmup = 2;   ///< untimed repetitions before timing
  std::size_t threads = 1;  ///< >1 splits the batch across threads
  std::uint64_t seed = 1;
  bool f64 = false;
  /// Every `verify_every`-th repetition (and the first) checks the sparse
  /// result against a masked dense oracle on sampled rows.
  std::size_t verify_every = 100;

  /// Throws ConfigError on empty dims, k > n, reps < 5.
  void validate() const;
};

struct BenchResult {
  std::string method;  ///< "dense" or "meprop"
  std::size_t batch = 0;
  std::size_t n = 0;
  std::size_t m = 0;
  std::size_t k = 0;  ///< n for the dense row
  double median_ms = 0;
  std::vector<double> samples_ms;
  std::uint64_t multiply_adds = 0;  ///< per backward, selection comparisons included
  std::uint64_t selections = 0;     ///< top-k comparisons per backward
  double speedup = 1;               ///< dense median / this median
  double flop_speedup = 1;          ///< dense multiply-adds / this multiply-adds (matmul only)
  bool verified = false;            ///< the masked-dense check ran and passed
  bool skipped = false;
  std::string note;
};

/// Dense row first, then one row per k. Throws NumericError if a
/// correctness check fails; a configuration that cannot be allocated is
/// returned with `skipped` set.
std::vector<BenchResult> bench_backward(const BenchOptions& options);

/// method,k,time_ms,speedup plus the extra columns.
void write_bench_csv(std::ostream& out, const std::vector<BenchResult>& results);

}  // namespace meprop
