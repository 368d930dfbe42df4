#pragma once

#include <cstddef>
#include <vector>

namespace meprop {

/// A gradient vector of dimension `full_dim` that keeps at most k entries.
/// `indices` are strictly increasing and aligned with `values`.
template <typename T>
struct SparseGrad {
  std::size_t full_dim = 0;
  std::vector<std::size_t> indices;
  std::vector<T> values;

  std::size_t nnz() const { return indices.size(); }

  /// Dense form with zeros at unselected positions.
  std::vector<T> to_dense() const {
    std::vector<T> out(full_dim, T{0});
    for (std::size_t c = 0; c < indices.size(); ++c) out[indices[c]] = values[c];
    return out;
  }
};

}  // namespace meprop
