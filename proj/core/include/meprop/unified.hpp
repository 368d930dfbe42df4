#pragma once

// Mini-batch execution of an Mlp with whole-batch matmuls. When a layer's
// policy sparsifies, one index set is chosen for the entire batch
// (unified_topk), the b x n output gradient shrinks to a dense b x k block,
// and both backward matmuls run on that block.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "meprop/autograd.hpp"
#include "meprop/nn.hpp"
#include "meprop/sparsify.hpp"

namespace meprop {

template <typename T>
class BatchedPass {
 public:
  explicit BatchedPass(const Mlp<T>& model, UnifiedScore score = UnifiedScore::MeanAbs)
      : model_(&model), score_(score) {}

  /// X is b x input_dim. Returns the b x output_dim logits.
  const Matrix<T>& forward(const Matrix<T>& X, bool train, Rng& dropout_rng);

  /// Softmax cross-entropy against `labels`; stores d(sum loss)/d logits and
  /// returns the summed loss.
  double loss(std::span<const std::uint8_t> labels);

  /// Adds the summed per-example gradients into `grads`.
  BackwardStats backward(GradientStore<T>& grads, Rng* selection_rng = nullptr);

  /// Output indices kept at layer `layer` in the last backward (all when dense).
  const std::vector<std::size_t>& selected(std::size_t layer) const { return selected_.at(layer); }
  const FlopCounter& forward_flops() const { return forward_flops_; }

 private:
  const Mlp<T>* model_;
  UnifiedScore score_;
  std::vector<Matrix<T>> inputs_;       // input of each layer
  std::vector<Matrix<T>> activations_;  // post-activation, pre-dropout (hidden layers)
  std::vector<Matrix<T>> masks_;        // dropout masks (empty when unused)
  Matrix<T> logits_;
  Matrix<T> weight_t_;
  Matrix<T> grad_;
  std::vector<std::vector<std::size_t>> selected_;
  FlopCounter forward_flops_;
};

}  // namespace meprop
