#pragma once

// Plain SGD, AdaGrad and Adam. The adaptive optimizers are not modified for
// sparse gradients: rows that received no gradient are updated as zeros, so
// Adam's moments keep decaying there. A lazy mode that skips untouched rows
// exists for speed experiments only.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "meprop/autograd.hpp"
#include "meprop/linalg.hpp"

namespace meprop {

enum class OptimizerKind { Sgd, AdaGrad, Adam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(std::string_view text);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Skip rows with no gradient (AdaGrad/Adam). Off for faithful runs.
  bool lazy = false;

  /// Defaults used for MNIST: Adam 1e-3 / eps 1e-8, AdaGrad 0.1 / eps 1e-6, SGD 0.1.
  static OptimizerConfig defaults_for(OptimizerKind kind);
};

// ---------------------------------------------------------------------------
// Flat-array steps.

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::uint64_t t = 0;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, T{0}), v(n, T{0}) {}
};

template <typename T>
struct AdaGradState {
  std::vector<T> sum_sq;
  double lr = 0.1;
  double eps = 1e-6;

  explicit AdaGradState(std::size_t n = 0) : sum_sq(n, T{0}) {}
};

/// m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2; theta -= lr mhat / (sqrt(vhat) + eps).
template <typename T>
void adam_step(AdamState<T>& state, std::span<T> params, std::span<const T> grads);

/// G <- G + g^2; theta -= lr g / (sqrt(G) + eps).
template <typename T>
void adagrad_step(AdaGradState<T>& state, std::span<T> params, std::span<const T> grads);

/// theta -= lr g.
template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, T lr);

/// Row-sparse SGD: only rows listed in `grads` are read or written.
template <typename T>
void sgd_step(Matrix<T>& params, const RowSparseMatrix<T>& grads, T lr);

// ---------------------------------------------------------------------------
// Store-level optimizers.

template <typename T>
class Optimizer {
 public:
  virtual ~Optimizer() = default;

  /// Applies the mean gradient (accumulated sum / batch_size). Does not clear `grads`.
  virtual void step(ParameterStore<T>& params, const GradientStore<T>& grads,
                    std::size_t batch_size) = 0;

  virtual OptimizerKind kind() const = 0;
  const OptimizerConfig& config() const { return config_; }
  std::uint64_t steps() const { return steps_; }

  /// Accumulator tensors in parameter order (empty for SGD), for checkpointing.
  virtual std::vector<std::span<T>> state_tensors() = 0;
  void set_steps(std::uint64_t steps) { steps_ = steps; }

 protected:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  OptimizerConfig config_;
  std::uint64_t steps_ = 0;
};

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(const OptimizerConfig& config,
                                             const ParameterStore<T>& params);

}  // namespace meprop
