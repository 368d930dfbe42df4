#pragma once

// Dynamic tape for reverse-mode differentiation.
//
// A Tape records one example's forward computation. backward() walks the tape
// in reverse and accumulates parameter gradients into a GradientStore, so a
// mini-batch is a loop of tapes sharing one store. Linear nodes consult their
// SelectionPolicy at backward time: the gradient arriving at the matmul output
// is sparsified before dW and dx are formed. Element-wise nodes always use the
// exact dense backward.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "meprop/linalg.hpp"
#include "meprop/rng.hpp"
#include "meprop/sparsify.hpp"

namespace meprop {

using ParamId = std::size_t;
using NodeId = std::size_t;

template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;  ///< weights are n x m; biases are n x 1
};

template <typename T>
class ParameterStore {
 public:
  ParamId add(std::string name, Matrix<T> value);

  Parameter<T>& operator[](ParamId id) { return params_.at(id); }
  const Parameter<T>& operator[](ParamId id) const { return params_.at(id); }

  std::size_t size() const { return params_.size(); }
  /// Total scalar count over all parameters.
  std::size_t num_scalars() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter<T>> params_;
};

/// Accumulated gradient for one parameter plus the set of rows that received
/// any contribution. Rows never touched are exactly zero.
template <typename T>
class ParamGrad {
 public:
  ParamGrad() = default;
  ParamGrad(std::size_t rows, std::size_t cols)
      : value_(rows, cols), touched_(rows, 0) {}

  Matrix<T>& value() { return value_; }
  const Matrix<T>& value() const { return value_; }

  void mark_row(std::size_t r);
  void mark_all();
  bool row_touched(std::size_t r) const { return touched_[r] != 0; }
  std::size_t touched_count() const { return touched_count_; }
  /// Ascending list of touched rows.
  std::vector<std::size_t> touched_rows() const;
  /// True when some rows were never touched.
  bool is_row_sparse() const { return touched_count_ < value_.rows(); }

  RowSparseMatrix<T> to_row_sparse() const;

  /// Zeroes touched rows and clears the touched set.
  void clear();

 private:
  Matrix<T> value_;
  std::vector<std::uint8_t> touched_;
  std::size_t touched_count_ = 0;
};

template <typename T>
class GradientStore {
 public:
  GradientStore() = default;
  explicit GradientStore(const ParameterStore<T>& params);

  ParamGrad<T>& operator[](ParamId id) { return grads_.at(id); }
  const ParamGrad<T>& operator[](ParamId id) const { return grads_.at(id); }
  std::size_t size() const { return grads_.size(); }

  void clear();

 private:
  std::vector<ParamGrad<T>> grads_;
};

enum class Activation { Identity, Relu, Tanh, Sigmoid };

std::string_view to_string(Activation act);
Activation parse_activation(std::string_view text);

/// Per-call accounting for backward().
struct BackwardStats {
  FlopCounter linear;          ///< matmul backward multiply-adds and top-k comparisons
  double linear_seconds = 0;   ///< time inside linear backward (selection included)
  std::uint64_t dense_multiply_adds = 0;  ///< what the same nodes would cost dense
};

template <typename T>
class Tape {
 public:
  explicit Tape(const ParameterStore<T>& params) : params_(&params) {}

  /// Leaf holding a copy of `x`; never receives a gradient unless `requires_grad`.
  NodeId input(std::span<const T> x, bool requires_grad = false);

  /// y = W x (+ b). `bias` is an n x 1 parameter. When `weight_t` is given it
  /// must hold the current transpose of W; the forward then uses it.
  NodeId linear(ParamId weight, std::optional<ParamId> bias, NodeId x,
                SelectionPolicy policy = SelectionPolicy::dense(),
                const Matrix<T>* weight_t = nullptr);

  NodeId activation(Activation act, NodeId x);

  /// Inverted dropout: survivors scaled by 1/(1-rate). Identity when !train or rate == 0.
  NodeId dropout(NodeId x, T rate, Rng& rng, bool train);

  NodeId add(NodeId a, NodeId b);
  /// Element-wise product.
  NodeId mul(NodeId a, NodeId b);
  NodeId slice(NodeId x, std::size_t offset, std::size_t length);

  /// Scalar loss -log softmax(logits)[target].
  NodeId softmax_cross_entropy(NodeId logits, std::size_t target);

  std::span<const T> value(NodeId id) const { return nodes_.at(id).value; }
  /// Softmax probabilities cached by a loss node.
  std::span<const T> probabilities(NodeId loss) const;
  std::size_t size() const { return nodes_.size(); }

  /// Reverse pass from a scalar loss node. Gradients are added into `grads`.
  /// `selection_rng` drives RandomK policies and may be null otherwise.
  BackwardStats backward(NodeId loss, GradientStore<T>& grads, Rng* selection_rng = nullptr);

  /// Convenience form returning a fresh gradient map.
  GradientStore<T> backward(NodeId loss, Rng* selection_rng = nullptr);

  /// Gradient of the loss w.r.t. a node's output after the last backward().
  std::span<const T> node_grad(NodeId id) const;

  /// Output indices kept at a linear node during the last backward(); every
  /// index when the node ran dense.
  const std::vector<std::size_t>& selected(NodeId linear_node) const;

  /// Linear nodes in recording order.
  std::vector<NodeId> linear_nodes() const;

  const FlopCounter& forward_flops() const { return forward_flops_; }

  void clear();

 private:
  enum class Kind { Input, Linear, Activation, Dropout, Add, Mul, Slice, SoftmaxXent };

  struct Node {
    Kind kind = Kind::Input;
    NodeId a = 0;
    NodeId b = 0;
    ParamId weight = 0;
    std::optional<ParamId> bias;
    SelectionPolicy policy;
    Activation act = Activation::Identity;
    std::size_t offset = 0;  ///< slice offset or loss target
    bool requires_grad = false;
    Vector<T> value;
    Vector<T> aux;  ///< dropout mask or softmax probabilities
    std::vector<std::size_t> selected;
  };

  NodeId push(Node node);
  const Node& at(NodeId id, const char* op) const;
  void add_into(NodeId target, std::span<const T> g);

  const ParameterStore<T>* params_;
  std::vector<Node> nodes_;
  std::vector<Vector<T>> grads_;
  FlopCounter forward_flops_;
  TopKSelector selector_;
};

}  // namespace meprop
