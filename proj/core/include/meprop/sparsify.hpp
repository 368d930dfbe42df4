#pragma once

// Top-k gradient selection: per example, unified over a mini-batch, and the
// random-k ablation baseline.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "meprop/linalg.hpp"
#include "meprop/rng.hpp"
#include "meprop/sparse_grad.hpp"

namespace meprop {

enum class SelectionMode { Dense, TopK, RandomK };

std::string_view to_string(SelectionMode mode);
/// Accepts "dense", "topk", "randomk". Throws ConfigError otherwise.
SelectionMode parse_selection_mode(std::string_view text);

struct SelectionPolicy {
  SelectionMode mode = SelectionMode::Dense;
  std::size_t k = 0;
  std::uint64_t seed = 1;

  static SelectionPolicy dense() { return {}; }
  static SelectionPolicy top_k(std::size_t k) { return {SelectionMode::TopK, k, 1}; }
  static SelectionPolicy random_k(std::size_t k, std::uint64_t seed) {
    return {SelectionMode::RandomK, k, seed};
  }

  /// Throws ConfigError when k == 0 for a sparsifying mode.
  void validate() const;

  /// A sparsifying policy whose k covers the whole dimension behaves as Dense.
  bool sparsifies(std::size_t dim) const { return mode != SelectionMode::Dense && k < dim; }

  friend bool operator==(const SelectionPolicy&, const SelectionPolicy&) = default;
};

/// Min-heap top-k selector with a reusable O(k) buffer.
///
/// Keeps the min(k, n) entries of largest magnitude; equal magnitudes are
/// resolved in favour of the lower index. O(n log k) comparisons.
class TopKSelector {
 public:
  template <typename T>
  SparseGrad<T> select(std::span<const T> v, std::size_t k, FlopCounter* flops = nullptr);

  /// Indices only, ascending.
  template <typename T>
  std::vector<std::size_t> select_indices(std::span<const T> v, std::size_t k,
                                          FlopCounter* flops = nullptr);

 private:
  struct Entry {
    double magnitude;
    std::size_t index;
  };
  std::vector<Entry> heap_;
};

template <typename T>
SparseGrad<T> topk_select(std::span<const T> v, std::size_t k, FlopCounter* flops = nullptr);

/// k distinct positions drawn uniformly without replacement; values copied from v.
template <typename T>
SparseGrad<T> random_select(std::span<const T> v, std::size_t k, Rng& rng);

/// Dispatches on policy.mode. Dense returns every index.
template <typename T>
SparseGrad<T> apply_policy(const SelectionPolicy& policy, std::span<const T> v, Rng& rng,
                           FlopCounter* flops = nullptr);

/// How per-example gradients are scored for unified selection.
enum class UnifiedScore {
  MeanAbs,  ///< (1/b) sum_e |G[e][i]|  (default)
  AbsMean,  ///< |(1/b) sum_e G[e][i]|
};

std::string_view to_string(UnifiedScore score);
UnifiedScore parse_unified_score(std::string_view text);

template <typename T>
struct UnifiedSelection {
  std::vector<std::size_t> indices;  ///< shared by every example, ascending
  Matrix<T> block;                   ///< b x k: G restricted to `indices`
};

/// One index set for the whole batch, chosen from averaged per-position scores.
template <typename T>
UnifiedSelection<T> unified_topk(const Matrix<T>& G, std::size_t k,
                                 UnifiedScore score = UnifiedScore::MeanAbs,
                                 FlopCounter* flops = nullptr);

}  // namespace meprop
