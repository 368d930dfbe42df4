#include "meprop/linalg.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include "meprop/error.hpp"

namespace meprop {

namespace {

std::atomic<bool> g_verification{false};

[[noreturn]] void dim_error(const char* op, std::size_t a, std::size_t b) {
  throw ConfigError(std::string(op) + ": dimension mismatch (" + std::to_string(a) +
                    " vs " + std::to_string(b) + ")");
}

void require(bool ok, const char* op, std::size_t a, std::size_t b) {
  if (!ok) dim_error(op, a, b);
}

// out += alpha * in, element by element.
template <typename T>
inline void axpy(T alpha, const T* __restrict in, T* __restrict out, std::size_t len) {
  for (std::size_t j = 0; j < len; ++j) out[j] += alpha * in[j];
}

template <typename T>
void check_finite(std::span<const T> v, const char* what) {
  if (!verification_mode()) return;
  for (const T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value");
  }
}

// Row tile for kernels that stream W once per example.
constexpr std::size_t kRowTile = 64;
// Example tile for kernels that stream X once per output row.
constexpr std::size_t kExampleTile = 32;

}  // namespace

void set_verification_mode(bool on) { g_verification.store(on, std::memory_order_relaxed); }
bool verification_mode() { return g_verification.load(std::memory_order_relaxed); }

// ---------------------------------------------------------------------------
// Matrix

template <typename T>
Matrix<T>::Matrix(std::initializer_list<std::initializer_list<T>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ConfigError("Matrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

template <typename T>
Matrix<T> Matrix<T>::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
  return m;
}

template <typename T>
void Matrix<T>::transpose_into(Matrix& out) const {
  out.resize(cols_, rows_);
  constexpr std::size_t kBlock = 32;
  for (std::size_t r0 = 0; r0 < rows_; r0 += kBlock) {
    const std::size_t r1 = std::min(rows_, r0 + kBlock);
    for (std::size_t c0 = 0; c0 < cols_; c0 += kBlock) {
      const std::size_t c1 = std::min(cols_, c0 + kBlock);
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = c0; c < c1; ++c) out.data_[c * rows_ + r] = data_[r * cols_ + c];
      }
    }
  }
}

template <typename T>
void Matrix<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void Matrix<T>::resize(std::size_t rows, std::size_t cols) {
  rows_ = rows;
  cols_ = cols;
  data_.assign(rows * cols, T{0});
}

template <typename T>
bool Matrix<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
Matrix<T> RowSparseMatrix<T>::to_dense() const {
  Matrix<T> out(rows, cols);
  for (std::size_t c = 0; c < row_indices.size(); ++c) {
    std::copy(block.row(c).begin(), block.row(c).end(), out.row(row_indices[c]).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Single-example kernels

template <typename T>
void matvec(const Matrix<T>& W, std::span<const T> x, std::span<T> y, FlopCounter& flops) {
  const std::size_t n = W.rows();
  const std::size_t m = W.cols();
  require(x.size() == m, "matmul_forward", W.cols(), x.size());
  require(y.size() == n, "matmul_forward", W.rows(), y.size());
  check_finite<T>(x, "matmul_forward input");

  const T* xp = x.data();
  std::size_t i = 0;
  // Eight independent accumulators hide add latency; each one is still a
  // plain ascending-j sum.
  for (; i + 8 <= n; i += 8) {
    const T* r0 = W.row(i).data();
    T s0{0}, s1{0}, s2{0}, s3{0}, s4{0}, s5{0}, s6{0}, s7{0};
    for (std::size_t j = 0; j < m; ++j) {
      const T xj = xp[j];
      s0 += r0[j] * xj;
      s1 += r0[m + j] * xj;
      s2 += r0[2 * m + j] * xj;
      s3 += r0[3 * m + j] * xj;
      s4 += r0[4 * m + j] * xj;
      s5 += r0[5 * m + j] * xj;
      s6 += r0[6 * m + j] * xj;
      s7 += r0[7 * m + j] * xj;
    }
    y[i] = s0;
    y[i + 1] = s1;
    y[i + 2] = s2;
    y[i + 3] = s3;
    y[i + 4] = s4;
    y[i + 5] = s5;
    y[i + 6] = s6;
    y[i + 7] = s7;
  }
  for (; i < n; ++i) {
    const T* r = W.row(i).data();
    T s{0};
    for (std::size_t j = 0; j < m; ++j) s += r[j] * xp[j];
    y[i] = s;
  }
  flops.multiply_adds += static_cast<std::uint64_t>(n) * m;
}

template <typename T>
Vector<T> matmul_forward(const Matrix<T>& W, std::span<const T> x, FlopCounter& flops) {
  Vector<T> y(W.rows());
  matvec<T>(W, x, y, flops);
  return y;
}

template <typename T>
void accumulate_outer(std::span<const T> g_y, std::span<const T> x, Matrix<T>& dW,
                      FlopCounter& flops) {
  require(dW.rows() == g_y.size(), "accumulate_outer", dW.rows(), g_y.size());
  require(dW.cols() == x.size(), "accumulate_outer", dW.cols(), x.size());
  const std::size_t m = x.size();
  for (std::size_t i = 0; i < g_y.size(); ++i) axpy(g_y[i], x.data(), dW.row(i).data(), m);
  flops.multiply_adds += static_cast<std::uint64_t>(g_y.size()) * m;
}

template <typename T>
void accumulate_outer(const SparseGrad<T>& g_y, std::span<const T> x, Matrix<T>& dW,
                      FlopCounter& flops) {
  require(dW.rows() == g_y.full_dim, "accumulate_outer", dW.rows(), g_y.full_dim);
  require(dW.cols() == x.size(), "accumulate_outer", dW.cols(), x.size());
  const std::size_t m = x.size();
  for (std::size_t c = 0; c < g_y.nnz(); ++c) {
    axpy(g_y.values[c], x.data(), dW.row(g_y.indices[c]).data(), m);
  }
  flops.multiply_adds += static_cast<std::uint64_t>(g_y.nnz()) * m;
}

template <typename T>
void transpose_matvec(const Matrix<T>& W, std::span<const T> g_y, std::span<T> dx,
                      FlopCounter& flops) {
  require(W.rows() == g_y.size(), "backward dx", W.rows(), g_y.size());
  require(W.cols() == dx.size(), "backward dx", W.cols(), dx.size());
  const std::size_t m = W.cols();
  std::fill(dx.begin(), dx.end(), T{0});
  // A zero coefficient adds +-0 to a sum that started at +0, which leaves it
  // unchanged, so skipping it keeps the result bit-identical.
  for (std::size_t i = 0; i < g_y.size(); ++i) {
    if (g_y[i] != T{0}) axpy(g_y[i], W.row(i).data(), dx.data(), m);
  }
  flops.multiply_adds += static_cast<std::uint64_t>(W.rows()) * m;
}

template <typename T>
void matvec_pretransposed(const Matrix<T>& Wt, std::span<const T> x, std::span<T> y,
                          FlopCounter& flops) {
  require(Wt.rows() == x.size(), "matmul_forward", Wt.rows(), x.size());
  require(Wt.cols() == y.size(), "matmul_forward", Wt.cols(), y.size());
  check_finite<T>(x, "matmul_forward input");
  std::fill(y.begin(), y.end(), T{0});
  const std::size_t n = Wt.cols();
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (x[j] != T{0}) axpy(x[j], Wt.row(j).data(), y.data(), n);
  }
  flops.multiply_adds += static_cast<std::uint64_t>(n) * Wt.rows();
}

template <typename T>
void transpose_matvec(const Matrix<T>& W, const SparseGrad<T>& g_y, std::span<T> dx,
                      FlopCounter& flops) {
  require(W.rows() == g_y.full_dim, "backward dx", W.rows(), g_y.full_dim);
  require(W.cols() == dx.size(), "backward dx", W.cols(), dx.size());
  const std::size_t m = W.cols();
  std::fill(dx.begin(), dx.end(), T{0});
  for (std::size_t c = 0; c < g_y.nnz(); ++c) {
    axpy(g_y.values[c], W.row(g_y.indices[c]).data(), dx.data(), m);
  }
  flops.multiply_adds += static_cast<std::uint64_t>(g_y.nnz()) * m;
}

template <typename T>
DenseLinearGrads<T> backward_dense(std::span<const T> g_y, const Matrix<T>& W,
                                   std::span<const T> x, FlopCounter& flops) {
  require(W.rows() == g_y.size(), "backward_dense", W.rows(), g_y.size());
  require(W.cols() == x.size(), "backward_dense", W.cols(), x.size());
  DenseLinearGrads<T> out{Matrix<T>(W.rows(), W.cols()), Vector<T>(W.cols())};
  accumulate_outer<T>(g_y, x, out.dW, flops);
  transpose_matvec<T>(W, g_y, out.dx, flops);
  return out;
}

template <typename T>
void validate_sparse_grad(const SparseGrad<T>& g) {
  if (g.indices.size() != g.values.size()) {
    throw ConfigError("SparseGrad: indices and values differ in length");
  }
  for (std::size_t c = 0; c < g.indices.size(); ++c) {
    if (g.indices[c] >= g.full_dim) {
      throw ConfigError("SparseGrad: index " + std::to_string(g.indices[c]) +
                        " out of range for dimension " + std::to_string(g.full_dim));
    }
    if (c > 0 && g.indices[c] <= g.indices[c - 1]) {
      throw ConfigError(g.indices[c] == g.indices[c - 1]
                            ? "SparseGrad: duplicate index " + std::to_string(g.indices[c])
                            : std::string("SparseGrad: indices not sorted ascending"));
    }
  }
}

template <typename T>
SparseLinearGrads<T> backward_sparse(const SparseGrad<T>& g_y, const Matrix<T>& W,
                                     std::span<const T> x, FlopCounter& flops) {
  validate_sparse_grad(g_y);
  require(W.rows() == g_y.full_dim, "backward_sparse", W.rows(), g_y.full_dim);
  require(W.cols() == x.size(), "backward_sparse", W.cols(), x.size());
  const std::size_t k = g_y.nnz();
  const std::size_t m = W.cols();

  SparseLinearGrads<T> out;
  out.dW.rows = W.rows();
  out.dW.cols = m;
  out.dW.row_indices = g_y.indices;
  out.dW.block = Matrix<T>(k, m);
  for (std::size_t c = 0; c < k; ++c) axpy(g_y.values[c], x.data(), out.dW.block.row(c).data(), m);
  flops.multiply_adds += static_cast<std::uint64_t>(k) * m;

  out.dx.assign(m, T{0});
  transpose_matvec<T>(W, g_y, out.dx, flops);
  return out;
}

// ---------------------------------------------------------------------------
// Mini-batch kernels

template <typename T>
void matmul_nt(const Matrix<T>& X, const Matrix<T>& W, Matrix<T>& Y, FlopCounter& flops) {
  require(X.cols() == W.cols(), "matmul_nt", X.cols(), W.cols());
  const std::size_t b = X.rows();
  const std::size_t n = W.rows();
  const std::size_t m = W.cols();
  if (Y.rows() != b || Y.cols() != n) Y.resize(b, n);

  // 4x4 register tile; every output is an ascending-j sum.
  std::size_t s = 0;
  for (; s + 4 <= b; s += 4) {
    const T* x0 = X.row(s).data();
    const T* x1 = X.row(s + 1).data();
    const T* x2 = X.row(s + 2).data();
    const T* x3 = X.row(s + 3).data();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
      const T* w0 = W.row(i).data();
      const T* w1 = W.row(i + 1).data();
      const T* w2 = W.row(i + 2).data();
      const T* w3 = W.row(i + 3).data();
      T acc[4][4] = {};
      for (std::size_t j = 0; j < m; ++j) {
        const T a0 = x0[j], a1 = x1[j], a2 = x2[j], a3 = x3[j];
        const T b0 = w0[j], b1 = w1[j], b2 = w2[j], b3 = w3[j];
        acc[0][0] += a0 * b0; acc[0][1] += a0 * b1; acc[0][2] += a0 * b2; acc[0][3] += a0 * b3;
        acc[1][0] += a1 * b0; acc[1][1] += a1 * b1; acc[1][2] += a1 * b2; acc[1][3] += a1 * b3;
        acc[2][0] += a2 * b0; acc[2][1] += a2 * b1; acc[2][2] += a2 * b2; acc[2][3] += a2 * b3;
        acc[3][0] += a3 * b0; acc[3][1] += a3 * b1; acc[3][2] += a3 * b2; acc[3][3] += a3 * b3;
      }
      for (std::size_t u = 0; u < 4; ++u) {
        for (std::size_t v = 0; v < 4; ++v) Y(s + u, i + v) = acc[u][v];
      }
    }
    for (; i < n; ++i) {
      const T* w = W.row(i).data();
      for (std::size_t u = 0; u < 4; ++u) {
        const T* xr = X.row(s + u).data();
        T acc{0};
        for (std::size_t j = 0; j < m; ++j) acc += xr[j] * w[j];
        Y(s + u, i) = acc;
      }
    }
  }
  for (; s < b; ++s) matvec<T>(W, X.row(s), Y.row(s), flops);
  flops.multiply_adds += static_cast<std::uint64_t>(b - b % 4) * n * m;
}

template <typename T>
void matmul_tn_accumulate(const Matrix<T>& G, const Matrix<T>& X, Matrix<T>& dW,
                          FlopCounter& flops) {
  require(G.rows() == X.rows(), "matmul_tn", G.rows(), X.rows());
  require(dW.rows() == G.cols(), "matmul_tn", dW.rows(), G.cols());
  require(dW.cols() == X.cols(), "matmul_tn", dW.cols(), X.cols());
  const std::size_t b = G.rows();
  const std::size_t n = G.cols();
  const std::size_t m = X.cols();
  for (std::size_t s0 = 0; s0 < b; s0 += kExampleTile) {
    const std::size_t s1 = std::min(b, s0 + kExampleTile);
    for (std::size_t i = 0; i < n; ++i) {
      T* out = dW.row(i).data();
      for (std::size_t s = s0; s < s1; ++s) axpy(G(s, i), X.row(s).data(), out, m);
    }
  }
  flops.multiply_adds += static_cast<std::uint64_t>(b) * n * m;
}

template <typename T>
void matmul_nn(const Matrix<T>& G, const Matrix<T>& W, Matrix<T>& dX, FlopCounter& flops) {
  require(G.cols() == W.rows(), "matmul_nn", G.cols(), W.rows());
  const std::size_t b = G.rows();
  const std::size_t n = W.rows();
  const std::size_t m = W.cols();
  if (dX.rows() != b || dX.cols() != m) {
    dX.resize(b, m);
  } else {
    dX.fill(T{0});
  }
  for (std::size_t i0 = 0; i0 < n; i0 += kRowTile) {
    const std::size_t i1 = std::min(n, i0 + kRowTile);
    for (std::size_t s = 0; s < b; ++s) {
      T* out = dX.row(s).data();
      const T* g = G.row(s).data();
      for (std::size_t i = i0; i < i1; ++i) {
        if (g[i] != T{0}) axpy(g[i], W.row(i).data(), out, m);
      }
    }
  }
  flops.multiply_adds += static_cast<std::uint64_t>(b) * n * m;
}

template <typename T>
void matmul_tn_accumulate_rows(const Matrix<T>& Gk, std::span<const std::size_t> cols,
                               const Matrix<T>& X, Matrix<T>& dW, FlopCounter& flops) {
  require(Gk.cols() == cols.size(), "matmul_tn_rows", Gk.cols(), cols.size());
  require(Gk.rows() == X.rows(), "matmul_tn_rows", Gk.rows(), X.rows());
  require(dW.cols() == X.cols(), "matmul_tn_rows", dW.cols(), X.cols());
  const std::size_t b = Gk.rows();
  const std::size_t k = cols.size();
  const std::size_t m = X.cols();
  for (std::size_t c = 0; c < k; ++c) {
    if (cols[c] >= dW.rows()) dim_error("matmul_tn_rows index", cols[c], dW.rows());
  }
  for (std::size_t s0 = 0; s0 < b; s0 += kExampleTile) {
    const std::size_t s1 = std::min(b, s0 + kExampleTile);
    for (std::size_t c = 0; c < k; ++c) {
      T* out = dW.row(cols[c]).data();
      for (std::size_t s = s0; s < s1; ++s) axpy(Gk(s, c), X.row(s).data(), out, m);
    }
  }
  flops.multiply_adds += static_cast<std::uint64_t>(b) * k * m;
}

template <typename T>
void matmul_nn_rows(const Matrix<T>& Gk, std::span<const std::size_t> cols, const Matrix<T>& W,
                    Matrix<T>& dX, FlopCounter& flops) {
  require(Gk.cols() == cols.size(), "matmul_nn_rows", Gk.cols(), cols.size());
  const std::size_t b = Gk.rows();
  const std::size_t k = cols.size();
  const std::size_t m = W.cols();
  for (std::size_t c = 0; c < k; ++c) {
    if (cols[c] >= W.rows()) dim_error("matmul_nn_rows index", cols[c], W.rows());
  }
  if (dX.rows() != b || dX.cols() != m) {
    dX.resize(b, m);
  } else {
    dX.fill(T{0});
  }
  for (std::size_t c0 = 0; c0 < k; c0 += kRowTile) {
    const std::size_t c1 = std::min(k, c0 + kRowTile);
    for (std::size_t s = 0; s < b; ++s) {
      T* out = dX.row(s).data();
      const T* g = Gk.row(s).data();
      for (std::size_t c = c0; c < c1; ++c) axpy(g[c], W.row(cols[c]).data(), out, m);
    }
  }
  flops.multiply_adds += static_cast<std::uint64_t>(b) * k * m;
}

// ---------------------------------------------------------------------------

#define MEPROP_INSTANTIATE_LINALG(T)                                                         \
  template class Matrix<T>;                                                                  \
  template struct RowSparseMatrix<T>;                                                        \
  template void matvec<T>(const Matrix<T>&, std::span<const T>, std::span<T>, FlopCounter&); \
  template Vector<T> matmul_forward<T>(const Matrix<T>&, std::span<const T>, FlopCounter&);  \
  template DenseLinearGrads<T> backward_dense<T>(std::span<const T>, const Matrix<T>&,       \
                                                 std::span<const T>, FlopCounter&);          \
  template SparseLinearGrads<T> backward_sparse<T>(const SparseGrad<T>&, const Matrix<T>&,   \
                                                   std::span<const T>, FlopCounter&);        \
  template void validate_sparse_grad<T>(const SparseGrad<T>&);                               \
  template void accumulate_outer<T>(std::span<const T>, std::span<const T>, Matrix<T>&,      \
                                    FlopCounter&);                                           \
  template void accumulate_outer<T>(const SparseGrad<T>&, std::span<const T>, Matrix<T>&,    \
                                    FlopCounter&);                                           \
  template void transpose_matvec<T>(const Matrix<T>&, std::span<const T>, std::span<T>,      \
                                    FlopCounter&);                                           \
  template void transpose_matvec<T>(const Matrix<T>&, const SparseGrad<T>&, std::span<T>,    \
                                    FlopCounter&);                                           \
  template void matmul_nt<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&, FlopCounter&);  \
  template void matmul_tn_accumulate<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&,      \
                                        FlopCounter&);                                       \
  template void matvec_pretransposed<T>(const Matrix<T>&, std::span<const T>, std::span<T>,  \
                                        FlopCounter&);                                     \
  template void matmul_nn<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&, FlopCounter&);  \
  template void matmul_tn_accumulate_rows<T>(const Matrix<T>&, std::span<const std::size_t>, \
                                             const Matrix<T>&, Matrix<T>&, FlopCounter&);    \
  template void matmul_nn_rows<T>(const Matrix<T>&, std::span<const std::size_t>,            \
                                  const Matrix<T>&, Matrix<T>&, FlopCounter&);

MEPROP_INSTANTIATE_LINALG(float)
MEPROP_INSTANTIATE_LINALG(double)

}  // namespace meprop
