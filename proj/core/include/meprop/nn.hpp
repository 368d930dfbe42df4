#pragma once

// Model builders on top of the tape: an MLP of configurable depth and a
// single-direction LSTM cell with a sequence classifier around it.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "meprop/autograd.hpp"
#include "meprop/ops.hpp"
#include "meprop/sparsify.hpp"

namespace meprop {

struct MlpSpec {
  std::size_t input_dim = 784;
  std::size_t hidden_dim = 500;
  std::size_t num_hidden_layers = 2;  ///< 1..5
  std::size_t output_dim = 10;
  Activation activation = Activation::Tanh;
  double dropout_rate = 0.0;
  bool use_bias = true;
  SelectionPolicy hidden_policy;  ///< applied to every hidden layer
  SelectionPolicy output_policy;  ///< output layer; k >= output_dim means dense

  void validate() const;
  /// Weights plus biases.
  std::size_t parameter_count() const;
};

template <typename T>
class TransposedWeights;

template <typename T>
class Mlp {
 public:
  struct Layer {
    ParamId weight = 0;
    std::optional<ParamId> bias;
    SelectionPolicy policy;
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
  };

  /// Glorot-uniform weights, zero biases, drawn from `seed`.
  Mlp(const MlpSpec& spec, std::uint64_t seed);

  const MlpSpec& spec() const { return spec_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }
  /// Hidden layers first, output layer last.
  const std::vector<Layer>& layers() const { return layers_; }

  /// Records the network on `tape` and returns the logits node. Dropout
  /// follows every hidden activation when `train` is set.
  NodeId forward(Tape<T>& tape, std::span<const T> x, bool train, Rng& dropout_rng,
                 const TransposedWeights<T>* wt = nullptr) const;

  /// Eval-mode logits without a tape.
  Vector<T> logits(std::span<const T> x, const TransposedWeights<T>* wt = nullptr) const;
  std::size_t classify(std::span<const T> x, const TransposedWeights<T>* wt = nullptr) const;

 private:
  MlpSpec spec_;
  ParameterStore<T> params_;
  std::vector<Layer> layers_;
};

/// Transposed copies of every layer weight, used by the faster forward
/// kernel. Results are bit-identical to the plain forward as long as refresh()
/// is called after each parameter update.
template <typename T>
class TransposedWeights {
 public:
  TransposedWeights() = default;
  explicit TransposedWeights(const Mlp<T>& model) { refresh(model); }

  void refresh(const Mlp<T>& model);
  const Matrix<T>& layer(std::size_t l) const { return wt_.at(l); }
  std::size_t size() const { return wt_.size(); }

 private:
  std::vector<Matrix<T>> wt_;
};

/// Inverted dropout on a plain vector; identity in eval mode or at p == 0.
/// The applied mask is written to `mask` when non-null.
template <typename T>
Vector<T> dropout_forward(std::span<const T> v, T p, Rng& rng, bool train,
                          Vector<T>* mask = nullptr);

/// Fills `m` with U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
template <typename T>
void glorot_uniform(Matrix<T>& m, Rng& rng);

// ---------------------------------------------------------------------------

struct LstmSpec {
  std::size_t input_dim = 1;
  std::size_t hidden_dim = 1;
  /// Shared by the input-to-hidden and hidden-to-hidden matmuls.
  SelectionPolicy gate_policy;

  void validate() const;
};

/// Standard four-gate LSTM cell. Gate rows are laid out [input, forget,
/// output, candidate], each hidden_dim long.
template <typename T>
class LstmCell {
 public:
  struct State {
    NodeId h;
    NodeId c;
  };

  LstmCell(const LstmSpec& spec, ParameterStore<T>& params, Rng& init_rng);

  const LstmSpec& spec() const { return spec_; }
  ParamId input_weight() const { return w_input_; }
  ParamId hidden_weight() const { return w_hidden_; }
  ParamId bias() const { return bias_; }

  /// Zero h and c leaves.
  State initial_state(Tape<T>& tape) const;
  State forward(Tape<T>& tape, NodeId x, State prev) const;

 private:
  LstmSpec spec_;
  ParamId w_input_;
  ParamId w_hidden_;
  ParamId bias_;
};

template <typename T>
struct LstmStep {
  Vector<T> h;
  Vector<T> c;
};

/// One cell step on plain vectors.
template <typename T>
LstmStep<T> lstm_cell_forward(const LstmCell<T>& cell, const ParameterStore<T>& params,
                              std::span<const T> x, std::span<const T> h_prev,
                              std::span<const T> c_prev);

/// Token sequence -> LSTM -> linear head on the final hidden state.
template <typename T>
class LstmClassifier {
 public:
  LstmClassifier(std::size_t vocab, std::size_t hidden_dim, std::size_t num_classes,
                 SelectionPolicy policy, std::uint64_t seed);

  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }
  const LstmCell<T>& cell() const { return cell_; }
  std::size_t vocab() const { return vocab_; }

  NodeId forward(Tape<T>& tape, std::span<const std::uint8_t> tokens) const;
  std::size_t classify(std::span<const std::uint8_t> tokens) const;

 private:
  std::size_t vocab_;
  ParameterStore<T> params_;
  LstmCell<T> cell_;
  ParamId head_weight_;
  ParamId head_bias_;
};

}  // namespace meprop
