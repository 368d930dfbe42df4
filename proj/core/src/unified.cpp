#include "meprop/unified.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "meprop/error.hpp"
#include "meprop/ops.hpp"

namespace meprop {

namespace {

using Clock = std::chrono::steady_clock;

template <typename T>
T activation_value(Activation act, T y) {
  switch (act) {
    case Activation::Identity: return y;
    case Activation::Relu: return y > T{0} ? y : T{0};
    case Activation::Tanh: return std::tanh(y);
    case Activation::Sigmoid: return T{1} / (T{1} + std::exp(-y));
  }
  return y;
}

// Derivative expressed through the activation output z.
template <typename T>
T activation_slope(Activation act, T z) {
  switch (act) {
    case Activation::Identity: return T{1};
    case Activation::Relu: return z > T{0} ? T{1} : T{0};
    case Activation::Tanh: return T{1} - z * z;
    case Activation::Sigmoid: return z * (T{1} - z);
  }
  return T{1};
}

}  // namespace

template <typename T>
const Matrix<T>& BatchedPass<T>::forward(const Matrix<T>& X, bool train, Rng& dropout_rng) {
  const MlpSpec& spec = model_->spec();
  const auto& layers = model_->layers();
  const auto& params = model_->params();
  if (X.cols() != spec.input_dim) throw ConfigError("BatchedPass: input dimension mismatch");
  const std::size_t b = X.rows();
  const T rate = static_cast<T>(spec.dropout_rate);

  inputs_.resize(layers.size());
  activations_.resize(layers.size());
  masks_.resize(layers.size());
  inputs_[0] = X;

  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    const bool is_output = l + 1 == layers.size();
    Matrix<T>& Y = is_output ? logits_ : activations_[l];
    // X W^T computed as X (W^T): same ascending sums, contiguous inner loop.
    params[layer.weight].value.transpose_into(weight_t_);
    matmul_nn<T>(inputs_[l], weight_t_, Y, forward_flops_);
    if (layer.bias) {
      const Matrix<T>& bias = params[*layer.bias].value;
      for (std::size_t s = 0; s < b; ++s) {
        auto row = Y.row(s);
        for (std::size_t i = 0; i < row.size(); ++i) row[i] += bias(i, 0);
      }
    }
    if (is_output) break;
    for (auto& v : Y.data()) v = activation_value(spec.activation, v);
    Matrix<T>& next = inputs_[l + 1];
    next = Y;
    if (train && rate > T{0}) {
      masks_[l] = Matrix<T>(b, Y.cols());
      const Vector<T> mask = dropout_mask<T>(Y.size(), rate, dropout_rng);
      std::copy(mask.begin(), mask.end(), masks_[l].data().begin());
      for (std::size_t i = 0; i < next.size(); ++i) next.data()[i] *= mask[i];
    } else {
      masks_[l] = Matrix<T>();
    }
  }
  return logits_;
}

template <typename T>
double BatchedPass<T>::loss(std::span<const std::uint8_t> labels) {
  if (labels.size() != logits_.rows()) throw ConfigError("BatchedPass: label count mismatch");
  grad_ = Matrix<T>(logits_.rows(), logits_.cols());
  double total = 0;
  for (std::size_t s = 0; s < labels.size(); ++s) {
    const auto r = softmax_cross_entropy<T>(logits_.row(s), labels[s]);
    total += static_cast<double>(r.loss);
    auto g = grad_.row(s);
    std::copy(r.probabilities.begin(), r.probabilities.end(), g.begin());
    g[labels[s]] -= T{1};
  }
  return total;
}

template <typename T>
BackwardStats BatchedPass<T>::backward(GradientStore<T>& grads, Rng* selection_rng) {
  const auto& layers = model_->layers();
  const auto& params = model_->params();
  if (grad_.empty() || inputs_.size() != layers.size()) {
    throw StateError("BatchedPass::backward called before forward/loss");
  }
  BackwardStats stats;
  selected_.assign(layers.size(), {});
  Matrix<T> G = grad_;
  Matrix<T> dX;

  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& layer = layers[l];
    const Matrix<T>& W = params[layer.weight].value;
    const Matrix<T>& A = inputs_[l];
    ParamGrad<T>& dW = grads[layer.weight];
    ParamGrad<T>* db = layer.bias ? &grads[*layer.bias] : nullptr;
    const std::size_t b = G.rows();
    const std::size_t n = W.rows();
    const bool need_dx = l > 0;
    stats.dense_multiply_adds += (need_dx ? 2 : 1) * b * n * W.cols();

    const auto start = Clock::now();
    if (layer.policy.sparsifies(n)) {
      std::vector<std::size_t> cols;
      Matrix<T> block;
      if (layer.policy.mode == SelectionMode::TopK) {
        auto sel = unified_topk<T>(G, layer.policy.k, score_, &stats.linear);
        cols = std::move(sel.indices);
        block = std::move(sel.block);
      } else {
        if (selection_rng == nullptr) throw StateError("random-k policy needs a selection rng");
        // One random index set shared by the batch.
        std::vector<T> scores(n, T{0});
        cols = random_select<T>(scores, layer.policy.k, *selection_rng).indices;
        block = Matrix<T>(b, cols.size());
        for (std::size_t s = 0; s < b; ++s) {
          for (std::size_t c = 0; c < cols.size(); ++c) block(s, c) = G(s, cols[c]);
        }
      }
      matmul_tn_accumulate_rows<T>(block, cols, A, dW.value(), stats.linear);
      for (std::size_t c = 0; c < cols.size(); ++c) {
        dW.mark_row(cols[c]);
        if (db != nullptr) {
          T sum{0};
          for (std::size_t s = 0; s < b; ++s) sum += block(s, c);
          db->value()(cols[c], 0) += sum;
          db->mark_row(cols[c]);
        }
      }
      if (need_dx) matmul_nn_rows<T>(block, cols, W, dX, stats.linear);
      selected_[l] = std::move(cols);
    } else {
      matmul_tn_accumulate<T>(G, A, dW.value(), stats.linear);
      dW.mark_all();
      if (db != nullptr) {
        for (std::size_t i = 0; i < n; ++i) {
          T sum{0};
          for (std::size_t s = 0; s < b; ++s) sum += G(s, i);
          db->value()(i, 0) += sum;
        }
        db->mark_all();
      }
      if (need_dx) matmul_nn<T>(G, W, dX, stats.linear);
      selected_[l].resize(n);
      std::iota(selected_[l].begin(), selected_[l].end(), std::size_t{0});
    }
    stats.linear_seconds += std::chrono::duration<double>(Clock::now() - start).count();

    if (!need_dx) break;
    // Through dropout and the activation of layer l-1.
    const Matrix<T>& Z = activations_[l - 1];
    const Matrix<T>& mask = masks_[l - 1];
    const Activation act = model_->spec().activation;
    G = std::move(dX);
    dX = Matrix<T>();
    auto g = G.data();
    const auto z = Z.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      T v = g[i];
      if (!mask.empty()) v *= mask.data()[i];
      g[i] = v * activation_slope(act, z[i]);
    }
  }
  return stats;
}

template class BatchedPass<float>;
template class BatchedPass<double>;

}  // namespace meprop
