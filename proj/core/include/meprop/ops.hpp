#pragma once

// Element-wise building blocks shared by the tape and the batched trainer.

#include <cstddef>
#include <span>

#include "meprop/linalg.hpp"
#include "meprop/rng.hpp"

namespace meprop {

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// 1/(1-rate). Consumes exactly n uniforms from `rng`.
template <typename T>
Vector<T> dropout_mask(std::size_t n, T rate, Rng& rng);

template <typename T>
struct SoftmaxXent {
  T loss{};
  Vector<T> probabilities;

  /// d loss / d logits = softmax - onehot(target).
  Vector<T> gradient(std::size_t target) const;
};

/// loss = -log softmax(logits)[target], computed with a max shift.
template <typename T>
SoftmaxXent<T> softmax_cross_entropy(std::span<const T> logits, std::size_t target);

}  // namespace meprop
