#include "meprop/sparsify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "meprop/error.hpp"

namespace meprop {

std::string_view to_string(SelectionMode mode) {
  switch (mode) {
    case SelectionMode::Dense: return "dense";
    case SelectionMode::TopK: return "topk";
    case SelectionMode::RandomK: return "randomk";
  }
  return "?";
}

SelectionMode parse_selection_mode(std::string_view text) {
  if (text == "dense") return SelectionMode::Dense;
  if (text == "topk") return SelectionMode::TopK;
  if (text == "randomk") return SelectionMode::RandomK;
  throw ConfigError("unknown selection policy '" + std::string(text) +
                    "' (expected dense|topk|randomk)");
}

std::string_view to_string(UnifiedScore score) {
  return score == UnifiedScore::MeanAbs ? "mean_abs" : "abs_mean";
}

UnifiedScore parse_unified_score(std::string_view text) {
  if (text == "mean_abs") return UnifiedScore::MeanAbs;
  if (text == "abs_mean") return UnifiedScore::AbsMean;
  throw ConfigError("unknown unified score '" + std::string(text) +
                    "' (expected mean_abs|abs_mean)");
}

void SelectionPolicy::validate() const {
  if (mode != SelectionMode::Dense && k == 0) {
    throw ConfigError("selection policy " + std::string(to_string(mode)) + " requires k >= 1");
  }
}

template <typename T>
std::vector<std::size_t> TopKSelector::select_indices(std::span<const T> v, std::size_t k,
                                                      FlopCounter* flops) {
  if (k == 0) throw ConfigError("top-k selection requires k >= 1");
  if (v.empty()) throw ConfigError("top-k selection on an empty vector");
  const std::size_t n = v.size();
  std::vector<std::size_t> out;
  if (k >= n) {
    out.resize(n);
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
  }

  std::uint64_t comparisons = 0;
  // "a ranks above b": larger magnitude, or equal magnitude and lower index.
  // Under this ordering the std heap keeps the weakest kept entry on top.
  auto ranks_above = [&comparisons](const Entry& a, const Entry& b) {
    ++comparisons;
    return a.magnitude > b.magnitude || (a.magnitude == b.magnitude && a.index < b.index);
  };

  heap_.clear();
  heap_.reserve(k);
  for (std::size_t i = 0; i < n; ++i) {
    const Entry e{std::fabs(static_cast<double>(v[i])), i};
    if (heap_.size() < k) {
      heap_.push_back(e);
      std::push_heap(heap_.begin(), heap_.end(), ranks_above);
    } else if (ranks_above(e, heap_.front())) {
      std::pop_heap(heap_.begin(), heap_.end(), ranks_above);
      heap_.back() = e;
      std::push_heap(heap_.begin(), heap_.end(), ranks_above);
    }
  }

  out.reserve(k);
  for (const Entry& e : heap_) out.push_back(e.index);
  std::sort(out.begin(), out.end());
  if (flops != nullptr) flops->selections += comparisons;
  return out;
}

template <typename T>
SparseGrad<T> TopKSelector::select(std::span<const T> v, std::size_t k, FlopCounter* flops) {
  SparseGrad<T> out;
  out.full_dim = v.size();
  out.indices = select_indices<T>(v, k, flops);
  out.values.reserve(out.indices.size());
  for (const std::size_t i : out.indices) out.values.push_back(v[i]);
  return out;
}

template <typename T>
SparseGrad<T> topk_select(std::span<const T> v, std::size_t k, FlopCounter* flops) {
  TopKSelector selector;
  return selector.select<T>(v, k, flops);
}

template <typename T>
SparseGrad<T> random_select(std::span<const T> v, std::size_t k, Rng& rng) {
  if (k == 0) throw ConfigError("random-k selection requires k >= 1");
  if (v.empty()) throw ConfigError("random-k selection on an empty vector");
  const std::size_t n = v.size();
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  const std::size_t take = std::min(k, n);
  if (take < n) {
    // Partial Fisher-Yates: the first `take` slots become a uniform sample.
    for (std::size_t i = 0; i < take; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(n - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(take);
    std::sort(pool.begin(), pool.end());
  }
  SparseGrad<T> out;
  out.full_dim = n;
  out.indices = std::move(pool);
  out.values.reserve(out.indices.size());
  for (const std::size_t i : out.indices) out.values.push_back(v[i]);
  return out;
}

template <typename T>
SparseGrad<T> apply_policy(const SelectionPolicy& policy, std::span<const T> v, Rng& rng,
                           FlopCounter* flops) {
  switch (policy.mode) {
    case SelectionMode::TopK: return topk_select<T>(v, policy.k, flops);
    case SelectionMode::RandomK: return random_select<T>(v, policy.k, rng);
    case SelectionMode::Dense: break;
  }
  SparseGrad<T> out;
  out.full_dim = v.size();
  out.indices.resize(v.size());
  std::iota(out.indices.begin(), out.indices.end(), std::size_t{0});
  out.values.assign(v.begin(), v.end());
  return out;
}

template <typename T>
UnifiedSelection<T> unified_topk(const Matrix<T>& G, std::size_t k, UnifiedScore score,
                                 FlopCounter* flops) {
  const std::size_t b = G.rows();
  const std::size_t n = G.cols();
  if (b == 0) throw ConfigError("unified top-k requires at least one example");
  if (k == 0) throw ConfigError("unified top-k requires k >= 1");

  std::vector<T> scores(n, T{0});
  for (std::size_t e = 0; e < b; ++e) {
    const auto row = G.row(e);
    if (score == UnifiedScore::MeanAbs) {
      for (std::size_t i = 0; i < n; ++i) scores[i] += std::fabs(row[i]);
    } else {
      for (std::size_t i = 0; i < n; ++i) scores[i] += row[i];
    }
  }
  const T inv_b = T{1} / static_cast<T>(b);
  for (auto& s : scores) s *= inv_b;

  TopKSelector selector;
  UnifiedSelection<T> out;
  out.indices = selector.select_indices<T>(scores, k, flops);
  out.block = Matrix<T>(b, out.indices.size());
  for (std::size_t e = 0; e < b; ++e) {
    const auto row = G.row(e);
    auto dst = out.block.row(e);
    for (std::size_t c = 0; c < out.indices.size(); ++c) dst[c] = row[out.indices[c]];
  }
  return out;
}

#define MEPROP_INSTANTIATE_SPARSIFY(T)                                                         \
  template std::vector<std::size_t> TopKSelector::select_indices<T>(std::span<const T>,         \
                                                                    std::size_t, FlopCounter*); \
  template SparseGrad<T> TopKSelector::select<T>(std::span<const T>, std::size_t, FlopCounter*); \
  template SparseGrad<T> topk_select<T>(std::span<const T>, std::size_t, FlopCounter*);         \
  template SparseGrad<T> random_select<T>(std::span<const T>, std::size_t, Rng&);               \
  template SparseGrad<T> apply_policy<T>(const SelectionPolicy&, std::span<const T>, Rng&,      \
                                         FlopCounter*);                                         \
  template UnifiedSelection<T> unified_topk<T>(const Matrix<T>&, std::size_t, UnifiedScore,     \
                                               FlopCounter*);

MEPROP_INSTANTIATE_SPARSIFY(float)
MEPROP_INSTANTIATE_SPARSIFY(double)

}  // namespace meprop
