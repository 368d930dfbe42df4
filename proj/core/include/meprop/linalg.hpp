#pragma once

// Dense storage and the matmul kernels used by forward and backward passes.
//
// Layout follows y = W x with W of shape n x m (row-major). A top-k selection
// on the output gradient therefore sparsifies ROWS of dW and reads only the
// selected rows of W when forming dx.
//
// Every kernel sums in ascending index order and counts its multiply-adds, so
// results are bit-stable across call paths and FLOP ratios are exact.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

#include "meprop/sparse_grad.hpp"

namespace meprop {

/// Process-wide switch for finiteness checks (off for speed in training runs).
void set_verification_mode(bool on);
bool verification_mode();

struct FlopCounter {
  std::uint64_t multiply_adds = 0;
  /// Comparisons performed by top-k selection.
  std::uint64_t selections = 0;

  void reset() { *this = FlopCounter{}; }

  FlopCounter& operator+=(const FlopCounter& other) {
    multiply_adds += other.multiply_adds;
    selections += other.selections;
    return *this;
  }
};

template <typename T>
using Vector = std::vector<T>;

template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::initializer_list<std::initializer_list<T>> rows);

  static Matrix identity(std::size_t n);

  /// Writes the transpose into `out`, resizing it as needed.
  void transpose_into(Matrix& out) const;

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  void fill(T value);
  void resize(std::size_t rows, std::size_t cols);

  /// True iff every entry is finite.
  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// dW restricted to a set of rows: `block` row c holds dW row `row_indices[c]`.
template <typename T>
struct RowSparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> row_indices;
  Matrix<T> block;

  Matrix<T> to_dense() const;
};

template <typename T>
struct DenseLinearGrads {
  Matrix<T> dW;
  Vector<T> dx;
};

template <typename T>
struct SparseLinearGrads {
  RowSparseMatrix<T> dW;
  Vector<T> dx;
};

// ---------------------------------------------------------------------------
// Single-example kernels.

/// y = W x. Counts n*m multiply-adds.
template <typename T>
Vector<T> matmul_forward(const Matrix<T>& W, std::span<const T> x, FlopCounter& flops);

/// In-place form of matmul_forward; y must have W.rows() entries.
template <typename T>
void matvec(const Matrix<T>& W, std::span<const T> x, std::span<T> y, FlopCounter& flops);

/// dW = g_y x^T, dx = W^T g_y. Counts 2*n*m multiply-adds.
template <typename T>
DenseLinearGrads<T> backward_dense(std::span<const T> g_y, const Matrix<T>& W,
                                   std::span<const T> x, FlopCounter& flops);

/// Backward through y = W x using only the rows of W selected in g_y.
/// Counts exactly 2*k*m multiply-adds, k = g_y.nnz().
template <typename T>
SparseLinearGrads<T> backward_sparse(const SparseGrad<T>& g_y, const Matrix<T>& W,
                                     std::span<const T> x, FlopCounter& flops);

/// Throws ConfigError unless g's indices are strictly increasing and < g.full_dim.
template <typename T>
void validate_sparse_grad(const SparseGrad<T>& g);

/// dW += g_y x^T. n*m multiply-adds.
template <typename T>
void accumulate_outer(std::span<const T> g_y, std::span<const T> x, Matrix<T>& dW,
                      FlopCounter& flops);

/// dW[t] += g_y[t] x^T for t in g_y.indices. k*m multiply-adds.
template <typename T>
void accumulate_outer(const SparseGrad<T>& g_y, std::span<const T> x, Matrix<T>& dW,
                      FlopCounter& flops);

/// y = Wt^T x for a weight stored transposed (Wt: m x n). Same value, bit for
/// bit, as matvec on the untransposed weight, but the inner loop runs along
/// contiguous memory. Zero entries of x are skipped; the count stays n*m.
template <typename T>
void matvec_pretransposed(const Matrix<T>& Wt, std::span<const T> x, std::span<T> y,
                          FlopCounter& flops);

/// dx = W^T g_y (overwrites dx). n*m multiply-adds.
template <typename T>
void transpose_matvec(const Matrix<T>& W, std::span<const T> g_y, std::span<T> dx,
                      FlopCounter& flops);

/// dx = sum over selected t of g_y[t] * W[t] (overwrites dx). k*m multiply-adds.
template <typename T>
void transpose_matvec(const Matrix<T>& W, const SparseGrad<T>& g_y, std::span<T> dx,
                      FlopCounter& flops);

// ---------------------------------------------------------------------------
// Mini-batch kernels. Rows of X, Y, G are examples.

/// Y = X W^T  (b x m times (n x m)^T -> b x n). b*n*m multiply-adds.
template <typename T>
void matmul_nt(const Matrix<T>& X, const Matrix<T>& W, Matrix<T>& Y, FlopCounter& flops);

/// dW += G^T X  (G: b x n, X: b x m). b*n*m multiply-adds.
template <typename T>
void matmul_tn_accumulate(const Matrix<T>& G, const Matrix<T>& X, Matrix<T>& dW,
                          FlopCounter& flops);

/// dX = G W  (G: b x n, W: n x m). b*n*m multiply-adds.
template <typename T>
void matmul_nn(const Matrix<T>& G, const Matrix<T>& W, Matrix<T>& dX, FlopCounter& flops);

/// Compressed form of matmul_tn_accumulate: G has been restricted to the
/// columns `cols` (Gk: b x k). dW[cols[c]] += sum_s Gk[s][c] X[s]. b*k*m multiply-adds.
template <typename T>
void matmul_tn_accumulate_rows(const Matrix<T>& Gk, std::span<const std::size_t> cols,
                               const Matrix<T>& X, Matrix<T>& dW, FlopCounter& flops);

/// Compressed form of matmul_nn: dX[s] = sum_c Gk[s][c] W[cols[c]]. b*k*m multiply-adds.
template <typename T>
void matmul_nn_rows(const Matrix<T>& Gk, std::span<const std::size_t> cols,
                    const Matrix<T>& W, Matrix<T>& dX, FlopCounter& flops);

}  // namespace meprop
