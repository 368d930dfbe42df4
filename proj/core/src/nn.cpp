#include "meprop/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "meprop/error.hpp"

namespace meprop {

namespace {

template <typename T>
void apply_activation(Activation act, std::span<T> v) {
  switch (act) {
    case Activation::Identity: break;
    case Activation::Relu:
      for (auto& x : v) x = x > T{0} ? x : T{0};
      break;
    case Activation::Tanh:
      for (auto& x : v) x = std::tanh(x);
      break;
    case Activation::Sigmoid:
      for (auto& x : v) x = T{1} / (T{1} + std::exp(-x));
      break;
  }
}

}  // namespace

void MlpSpec::validate() const {
  if (input_dim == 0 || hidden_dim == 0 || output_dim == 0) {
    throw ConfigError("MLP dimensions must be >= 1");
  }
  if (num_hidden_layers < 1 || num_hidden_layers > 5) {
    throw ConfigError("MLP needs 1..5 hidden layers, got " + std::to_string(num_hidden_layers));
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("dropout rate must be in [0, 1)");
  }
  hidden_policy.validate();
  output_policy.validate();
  if (hidden_policy.mode != SelectionMode::Dense && hidden_policy.k > hidden_dim) {
    throw ConfigError("k (" + std::to_string(hidden_policy.k) +
                      ") must not exceed the hidden dimension (" + std::to_string(hidden_dim) +
                      ")");
  }
}

std::size_t MlpSpec::parameter_count() const {
  std::size_t total = 0;
  std::size_t in = input_dim;
  for (std::size_t l = 0; l <= num_hidden_layers; ++l) {
    const std::size_t out = l < num_hidden_layers ? hidden_dim : output_dim;
    total += in * out + (use_bias ? out : 0);
    in = out;
  }
  return total;
}

template <typename T>
void glorot_uniform(Matrix<T>& m, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
  for (auto& v : m.data()) v = static_cast<T>(rng.uniform(-limit, limit));
}

template <typename T>
Vector<T> dropout_forward(std::span<const T> v, T p, Rng& rng, bool train, Vector<T>* mask) {
  if (!(p >= T{0} && p < T{1})) throw ConfigError("dropout rate must be in [0, 1)");
  Vector<T> out(v.begin(), v.end());
  if (!train || p == T{0}) {
    if (mask != nullptr) mask->assign(v.size(), T{1});
    return out;
  }
  Vector<T> m = dropout_mask<T>(v.size(), p, rng);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  if (mask != nullptr) *mask = std::move(m);
  return out;
}

// ---------------------------------------------------------------------------
// Mlp

template <typename T>
Mlp<T>::Mlp(const MlpSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  Rng rng(seed);
  std::size_t in = spec_.input_dim;
  for (std::size_t l = 0; l <= spec_.num_hidden_layers; ++l) {
    const bool is_output = l == spec_.num_hidden_layers;
    const std::size_t out = is_output ? spec_.output_dim : spec_.hidden_dim;
    const std::string tag = is_output ? "output" : "hidden" + std::to_string(l);
    Layer layer;
    Matrix<T> w(out, in);
    glorot_uniform(w, rng);
    layer.weight = params_.add(tag + ".weight", std::move(w));
    if (spec_.use_bias) layer.bias = params_.add(tag + ".bias", Matrix<T>(out, 1));
    layer.policy = is_output ? spec_.output_policy : spec_.hidden_policy;
    layer.in_dim = in;
    layer.out_dim = out;
    layers_.push_back(layer);
    in = out;
  }
}

template <typename T>
NodeId Mlp<T>::forward(Tape<T>& tape, std::span<const T> x, bool train, Rng& dropout_rng,
                       const TransposedWeights<T>* wt) const {
  if (x.size() != spec_.input_dim) {
    throw ConfigError("MLP input has " + std::to_string(x.size()) + " features, expected " +
                      std::to_string(spec_.input_dim));
  }
  NodeId h = tape.input(x);
  const T rate = static_cast<T>(spec_.dropout_rate);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    h = tape.linear(layer.weight, layer.bias, h, layer.policy,
                    wt != nullptr ? &wt->layer(l) : nullptr);
    if (l + 1 < layers_.size()) {
      h = tape.activation(spec_.activation, h);
      if (train && rate > T{0}) h = tape.dropout(h, rate, dropout_rng, true);
    }
  }
  return h;
}

template <typename T>
Vector<T> Mlp<T>::logits(std::span<const T> x, const TransposedWeights<T>* wt) const {
  if (x.size() != spec_.input_dim) throw ConfigError("MLP input dimension mismatch");
  FlopCounter flops;
  Vector<T> h(x.begin(), x.end());
  Vector<T> next;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    next.resize(layer.out_dim);
    if (wt != nullptr) {
      matvec_pretransposed<T>(wt->layer(l), h, next, flops);
    } else {
      matvec<T>(params_[layer.weight].value, h, next, flops);
    }
    if (layer.bias) {
      const Matrix<T>& b = params_[*layer.bias].value;
      for (std::size_t i = 0; i < next.size(); ++i) next[i] += b(i, 0);
    }
    if (l + 1 < layers_.size()) apply_activation<T>(spec_.activation, next);
    std::swap(h, next);
  }
  return h;
}

template <typename T>
std::size_t Mlp<T>::classify(std::span<const T> x, const TransposedWeights<T>* wt) const {
  const Vector<T> z = logits(x, wt);
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

template <typename T>
void TransposedWeights<T>::refresh(const Mlp<T>& model) {
  const auto& layers = model.layers();
  wt_.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    model.params()[layers[l].weight].value.transpose_into(wt_[l]);
  }
}

// ---------------------------------------------------------------------------
// LSTM

void LstmSpec::validate() const {
  if (input_dim == 0 || hidden_dim == 0) throw ConfigError("LSTM dimensions must be >= 1");
  gate_policy.validate();
}

template <typename T>
LstmCell<T>::LstmCell(const LstmSpec& spec, ParameterStore<T>& params, Rng& init_rng)
    : spec_(spec) {
  spec_.validate();
  const std::size_t h = spec_.hidden_dim;
  Matrix<T> wx(4 * h, spec_.input_dim);
  Matrix<T> wh(4 * h, h);
  glorot_uniform(wx, init_rng);
  glorot_uniform(wh, init_rng);
  w_input_ = params.add("lstm.input_weight", std::move(wx));
  w_hidden_ = params.add("lstm.hidden_weight", std::move(wh));
  bias_ = params.add("lstm.bias", Matrix<T>(4 * h, 1));
}

template <typename T>
typename LstmCell<T>::State LstmCell<T>::initial_state(Tape<T>& tape) const {
  const Vector<T> zeros(spec_.hidden_dim, T{0});
  return {tape.input(zeros), tape.input(zeros)};
}

template <typename T>
typename LstmCell<T>::State LstmCell<T>::forward(Tape<T>& tape, NodeId x, State prev) const {
  const std::size_t h = spec_.hidden_dim;
  if (tape.value(x).size() != spec_.input_dim) throw ConfigError("LSTM input dimension mismatch");
  if (tape.value(prev.h).size() != h || tape.value(prev.c).size() != h) {
    throw ConfigError("LSTM state dimension mismatch");
  }
  const NodeId from_input = tape.linear(w_input_, bias_, x, spec_.gate_policy);
  const NodeId from_hidden = tape.linear(w_hidden_, std::nullopt, prev.h, spec_.gate_policy);
  const NodeId pre = tape.add(from_input, from_hidden);
  const NodeId in_gate = tape.activation(Activation::Sigmoid, tape.slice(pre, 0, h));
  const NodeId forget = tape.activation(Activation::Sigmoid, tape.slice(pre, h, h));
  const NodeId out_gate = tape.activation(Activation::Sigmoid, tape.slice(pre, 2 * h, h));
  const NodeId candidate = tape.activation(Activation::Tanh, tape.slice(pre, 3 * h, h));
  const NodeId c = tape.add(tape.mul(forget, prev.c), tape.mul(in_gate, candidate));
  const NodeId out = tape.mul(out_gate, tape.activation(Activation::Tanh, c));
  return {out, c};
}

template <typename T>
LstmStep<T> lstm_cell_forward(const LstmCell<T>& cell, const ParameterStore<T>& params,
                              std::span<const T> x, std::span<const T> h_prev,
                              std::span<const T> c_prev) {
  Tape<T> tape(params);
  const typename LstmCell<T>::State prev{tape.input(h_prev), tape.input(c_prev)};
  const auto next = cell.forward(tape, tape.input(x), prev);
  const auto h = tape.value(next.h);
  const auto c = tape.value(next.c);
  return {Vector<T>(h.begin(), h.end()), Vector<T>(c.begin(), c.end())};
}

namespace {

template <typename T>
LstmCell<T> make_cell(std::size_t vocab, std::size_t hidden, SelectionPolicy policy,
                      ParameterStore<T>& params, Rng& rng) {
  return LstmCell<T>(LstmSpec{vocab, hidden, policy}, params, rng);
}

}  // namespace

template <typename T>
LstmClassifier<T>::LstmClassifier(std::size_t vocab, std::size_t hidden_dim,
                                  std::size_t num_classes, SelectionPolicy policy,
                                  std::uint64_t seed)
    : vocab_(vocab),
      params_(),
      cell_([&] {
        Rng rng(seed);
        return make_cell<T>(vocab, hidden_dim, policy, params_, rng);
      }()) {
  if (num_classes == 0) throw ConfigError("classifier needs at least one class");
  Rng rng = Rng(seed).split(1);
  Matrix<T> w(num_classes, hidden_dim);
  glorot_uniform(w, rng);
  head_weight_ = params_.add("head.weight", std::move(w));
  head_bias_ = params_.add("head.bias", Matrix<T>(num_classes, 1));
}

template <typename T>
NodeId LstmClassifier<T>::forward(Tape<T>& tape, std::span<const std::uint8_t> tokens) const {
  auto state = cell_.initial_state(tape);
  Vector<T> one_hot(vocab_, T{0});
  for (const std::uint8_t tok : tokens) {
    if (tok >= vocab_) throw ConfigError("token " + std::to_string(tok) + " outside vocabulary");
    one_hot[tok] = T{1};
    state = cell_.forward(tape, tape.input(one_hot), state);
    one_hot[tok] = T{0};
  }
  return tape.linear(head_weight_, head_bias_, state.h, SelectionPolicy::dense());
}

template <typename T>
std::size_t LstmClassifier<T>::classify(std::span<const std::uint8_t> tokens) const {
  Tape<T> tape(params_);
  const auto z = tape.value(forward(tape, tokens));
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

#define MEPROP_INSTANTIATE_NN(T)                                                           \
  template void glorot_uniform<T>(Matrix<T>&, Rng&);                                       \
  template Vector<T> dropout_forward<T>(std::span<const T>, T, Rng&, bool, Vector<T>*);    \
  template class Mlp<T>;                                                                   \
  template class TransposedWeights<T>;                                                     \
  template class LstmCell<T>;                                                              \
  template LstmStep<T> lstm_cell_forward<T>(const LstmCell<T>&, const ParameterStore<T>&,  \
                                            std::span<const T>, std::span<const T>,        \
                                            std::span<const T>);                           \
  template class LstmClassifier<T>;

MEPROP_INSTANTIATE_NN(float)
MEPROP_INSTANTIATE_NN(double)

}  // namespace meprop
