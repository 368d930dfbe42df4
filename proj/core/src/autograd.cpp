#include "meprop/autograd.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "meprop/error.hpp"
#include "meprop/ops.hpp"

namespace meprop {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

}  // namespace

template <typename T>
Vector<T> dropout_mask(std::size_t n, T rate, Rng& rng) {
  if (!(rate >= T{0} && rate < T{1})) throw ConfigError("dropout rate must be in [0, 1)");
  const T scale = T{1} / (T{1} - rate);
  Vector<T> mask(n);
  for (auto& m : mask) m = rng.uniform() < static_cast<double>(rate) ? T{0} : scale;
  return mask;
}

template <typename T>
Vector<T> SoftmaxXent<T>::gradient(std::size_t target) const {
  Vector<T> g = probabilities;
  g.at(target) -= T{1};
  return g;
}

template <typename T>
SoftmaxXent<T> softmax_cross_entropy(std::span<const T> logits, std::size_t target) {
  if (target >= logits.size()) {
    throw ConfigError("softmax_cross_entropy: target " + std::to_string(target) +
                      " out of range for " + std::to_string(logits.size()) + " classes");
  }
  if (verification_mode()) {
    for (const T v : logits) {
      if (!std::isfinite(v)) throw NumericError("softmax_cross_entropy: non-finite logit");
    }
  }
  SoftmaxXent<T> out;
  const T max_z = *std::max_element(logits.begin(), logits.end());
  out.probabilities.resize(logits.size());
  T sum{0};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.probabilities[i] = std::exp(logits[i] - max_z);
    sum += out.probabilities[i];
  }
  for (auto& p : out.probabilities) p /= sum;
  out.loss = std::log(sum) + max_z - logits[target];
  return out;
}

template Vector<float> dropout_mask<float>(std::size_t, float, Rng&);
template Vector<double> dropout_mask<double>(std::size_t, double, Rng&);
template struct SoftmaxXent<float>;
template struct SoftmaxXent<double>;
template SoftmaxXent<float> softmax_cross_entropy<float>(std::span<const float>, std::size_t);
template SoftmaxXent<double> softmax_cross_entropy<double>(std::span<const double>, std::size_t);

std::string_view to_string(Activation act) {
  switch (act) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

Activation parse_activation(std::string_view text) {
  if (text == "relu") return Activation::Relu;
  if (text == "tanh") return Activation::Tanh;
  if (text == "sigmoid") return Activation::Sigmoid;
  if (text == "identity") return Activation::Identity;
  throw ConfigError("unknown activation '" + std::string(text) +
                    "' (expected relu|tanh|sigmoid|identity)");
}

// ---------------------------------------------------------------------------
// ParameterStore / ParamGrad / GradientStore

template <typename T>
ParamId ParameterStore<T>::add(std::string name, Matrix<T> value) {
  params_.push_back({std::move(name), std::move(value)});
  return params_.size() - 1;
}

template <typename T>
std::size_t ParameterStore<T>::num_scalars() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.value.size();
  return total;
}

template <typename T>
void ParamGrad<T>::mark_row(std::size_t r) {
  if (touched_[r] == 0) {
    touched_[r] = 1;
    ++touched_count_;
  }
}

template <typename T>
void ParamGrad<T>::mark_all() {
  std::fill(touched_.begin(), touched_.end(), std::uint8_t{1});
  touched_count_ = touched_.size();
}

template <typename T>
std::vector<std::size_t> ParamGrad<T>::touched_rows() const {
  std::vector<std::size_t> rows;
  rows.reserve(touched_count_);
  for (std::size_t r = 0; r < touched_.size(); ++r) {
    if (touched_[r] != 0) rows.push_back(r);
  }
  return rows;
}

template <typename T>
RowSparseMatrix<T> ParamGrad<T>::to_row_sparse() const {
  RowSparseMatrix<T> out;
  out.rows = value_.rows();
  out.cols = value_.cols();
  out.row_indices = touched_rows();
  out.block = Matrix<T>(out.row_indices.size(), out.cols);
  for (std::size_t c = 0; c < out.row_indices.size(); ++c) {
    const auto src = value_.row(out.row_indices[c]);
    std::copy(src.begin(), src.end(), out.block.row(c).begin());
  }
  return out;
}

template <typename T>
void ParamGrad<T>::clear() {
  if (touched_count_ == touched_.size()) {
    value_.fill(T{0});
  } else {
    for (std::size_t r = 0; r < touched_.size(); ++r) {
      if (touched_[r] != 0) std::fill(value_.row(r).begin(), value_.row(r).end(), T{0});
    }
  }
  std::fill(touched_.begin(), touched_.end(), std::uint8_t{0});
  touched_count_ = 0;
}

template <typename T>
GradientStore<T>::GradientStore(const ParameterStore<T>& params) {
  grads_.reserve(params.size());
  for (const auto& p : params) grads_.emplace_back(p.value.rows(), p.value.cols());
}

template <typename T>
void GradientStore<T>::clear() {
  for (auto& g : grads_) g.clear();
}

// ---------------------------------------------------------------------------
// Tape: forward

template <typename T>
NodeId Tape<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

template <typename T>
const typename Tape<T>::Node& Tape<T>::at(NodeId id, const char* op) const {
  if (id >= nodes_.size()) {
    throw StateError(std::string(op) + ": node " + std::to_string(id) + " does not exist");
  }
  return nodes_[id];
}

template <typename T>
NodeId Tape<T>::input(std::span<const T> x, bool requires_grad) {
  Node node;
  node.kind = Kind::Input;
  node.requires_grad = requires_grad;
  node.value.assign(x.begin(), x.end());
  return push(std::move(node));
}

template <typename T>
NodeId Tape<T>::linear(ParamId weight, std::optional<ParamId> bias, NodeId x,
                       SelectionPolicy policy, const Matrix<T>* weight_t) {
  policy.validate();
  const auto& in = at(x, "linear");
  const Matrix<T>& W = (*params_)[weight].value;
  if (W.cols() != in.value.size()) {
    throw ConfigError("linear: weight '" + (*params_)[weight].name + "' expects input dim " +
                      std::to_string(W.cols()) + ", got " + std::to_string(in.value.size()));
  }
  Node node;
  node.kind = Kind::Linear;
  node.a = x;
  node.weight = weight;
  node.bias = bias;
  node.policy = policy;
  node.requires_grad = true;
  node.value.resize(W.rows());
  if (weight_t != nullptr) {
    if (weight_t->rows() != W.cols() || weight_t->cols() != W.rows()) {
      throw ConfigError("linear: transposed weight for '" + (*params_)[weight].name +
                        "' has the wrong shape");
    }
    matvec_pretransposed<T>(*weight_t, in.value, node.value, forward_flops_);
  } else {
    matvec<T>(W, in.value, node.value, forward_flops_);
  }
  if (bias) {
    const Matrix<T>& b = (*params_)[*bias].value;
    if (b.rows() != W.rows() || b.cols() != 1) {
      throw ConfigError("linear: bias '" + (*params_)[*bias].name + "' must be " +
                        std::to_string(W.rows()) + "x1");
    }
    for (std::size_t i = 0; i < node.value.size(); ++i) node.value[i] += b(i, 0);
  }
  return push(std::move(node));
}

template <typename T>
NodeId Tape<T>::activation(Activation act, NodeId x) {
  const auto& in = at(x, "activation");
  Node node;
  node.kind = Kind::Activation;
  node.a = x;
  node.act = act;
  node.requires_grad = in.requires_grad;
  node.value = in.value;
  switch (act) {
    case Activation::Identity: break;
    case Activation::Relu:
      for (auto& v : node.value) v = v > T{0} ? v : T{0};
      break;
    case Activation::Tanh:
      for (auto& v : node.value) v = std::tanh(v);
      break;
    case Activation::Sigmoid:
      for (auto& v : node.value) v = T{1} / (T{1} + std::exp(-v));
      break;
  }
  return push(std::move(node));
}

template <typename T>
NodeId Tape<T>::dropout(NodeId x, T rate, Rng& rng, bool train) {
  if (!(rate >= T{0} && rate < T{1})) throw ConfigError("dropout rate must be in [0, 1)");
  const auto& in = at(x, "dropout");
  Node node;
  node.kind = Kind::Dropout;
  node.a = x;
  node.requires_grad = in.requires_grad;
  node.value = in.value;
  if (train && rate > T{0}) {
    node.aux = dropout_mask<T>(node.value.size(), rate, rng);
    for (std::size_t i = 0; i < node.value.size(); ++i) node.value[i] *= node.aux[i];
  }
  return push(std::move(node));
}

template <typename T>
NodeId Tape<T>::add(NodeId a, NodeId b) {
  const auto& na = at(a, "add");
  const auto& nb = at(b, "add");
  if (na.value.size() != nb.value.size()) throw ConfigError("add: operand sizes differ");
  Node node;
  node.kind = Kind::Add;
  node.a = a;
  node.b = b;
  node.requires_grad = na.requires_grad || nb.requires_grad;
  node.value = na.value;
  for (std::size_t i = 0; i < node.value.size(); ++i) node.value[i] += nb.value[i];
  return push(std::move(node));
}

template <typename T>
NodeId Tape<T>::mul(NodeId a, NodeId b) {
  const auto& na = at(a, "mul");
  const auto& nb = at(b, "mul");
  if (na.value.size() != nb.value.size()) throw ConfigError("mul: operand sizes differ");
  Node node;
  node.kind = Kind::Mul;
  node.a = a;
  node.b = b;
  node.requires_grad = na.requires_grad || nb.requires_grad;
  node.value = na.value;
  for (std::size_t i = 0; i < node.value.size(); ++i) node.value[i] *= nb.value[i];
  return push(std::move(node));
}

template <typename T>
NodeId Tape<T>::slice(NodeId x, std::size_t offset, std::size_t length) {
  const auto& in = at(x, "slice");
  if (offset + length > in.value.size()) throw ConfigError("slice: range out of bounds");
  Node node;
  node.kind = Kind::Slice;
  node.a = x;
  node.offset = offset;
  node.requires_grad = in.requires_grad;
  node.value.assign(in.value.begin() + static_cast<std::ptrdiff_t>(offset),
                    in.value.begin() + static_cast<std::ptrdiff_t>(offset + length));
  return push(std::move(node));
}

template <typename T>
NodeId Tape<T>::softmax_cross_entropy(NodeId logits, std::size_t target) {
  const auto& in = at(logits, "softmax_cross_entropy");
  auto result = meprop::softmax_cross_entropy<T>(std::span<const T>(in.value), target);
  Node node;
  node.kind = Kind::SoftmaxXent;
  node.a = logits;
  node.offset = target;
  node.requires_grad = in.requires_grad;
  node.aux = std::move(result.probabilities);
  node.value.assign(1, result.loss);
  return push(std::move(node));
}

template <typename T>
std::span<const T> Tape<T>::probabilities(NodeId loss) const {
  const auto& node = at(loss, "probabilities");
  if (node.kind != Kind::SoftmaxXent) throw StateError("probabilities: not a loss node");
  return node.aux;
}

// ---------------------------------------------------------------------------
// Tape: backward

template <typename T>
void Tape<T>::add_into(NodeId target, std::span<const T> g) {
  auto& slot = grads_[target];
  if (slot.empty()) {
    slot.assign(g.begin(), g.end());
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }
}

template <typename T>
BackwardStats Tape<T>::backward(NodeId loss, GradientStore<T>& grads, Rng* selection_rng) {
  if (nodes_.empty() || loss >= nodes_.size()) {
    throw StateError("backward called before a forward pass recorded the loss node");
  }
  if (nodes_[loss].value.size() != 1) {
    throw ConfigError("backward: loss node is not scalar (size " +
                      std::to_string(nodes_[loss].value.size()) + ")");
  }
  if (grads.size() != params_->size()) {
    throw ConfigError("backward: gradient store does not match the parameter store");
  }

  BackwardStats stats;
  grads_.assign(nodes_.size(), Vector<T>{});
  grads_[loss] = {T{1}};
  Vector<T> scratch;

  for (NodeId id = loss + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (grads_[id].empty() || !node.requires_grad) continue;
    const Vector<T>& g = grads_[id];

    switch (node.kind) {
      case Kind::Input:
        break;

      case Kind::Linear: {
        const auto start = Clock::now();
        const Matrix<T>& W = (*params_)[node.weight].value;
        const Node& in = nodes_[node.a];
        ParamGrad<T>& dW = grads[node.weight];
        ParamGrad<T>* db = node.bias ? &grads[*node.bias] : nullptr;
        const std::size_t n = W.rows();
        stats.dense_multiply_adds += (in.requires_grad ? 2 : 1) * n * W.cols();

        if (node.policy.sparsifies(n)) {
          SparseGrad<T> sg;
          if (node.policy.mode == SelectionMode::TopK) {
            sg = selector_.select<T>(g, node.policy.k, &stats.linear);
          } else {
            if (selection_rng == nullptr) {
              throw StateError("backward: random-k policy needs a selection rng");
            }
            sg = random_select<T>(g, node.policy.k, *selection_rng);
          }
          accumulate_outer<T>(sg, in.value, dW.value(), stats.linear);
          for (std::size_t c = 0; c < sg.nnz(); ++c) {
            const std::size_t t = sg.indices[c];
            dW.mark_row(t);
            if (db != nullptr) {
              db->value()(t, 0) += sg.values[c];
              db->mark_row(t);
            }
          }
          if (in.requires_grad) {
            scratch.resize(W.cols());
            transpose_matvec<T>(W, sg, scratch, stats.linear);
            add_into(node.a, scratch);
          }
          node.selected = std::move(sg.indices);
        } else {
          accumulate_outer<T>(g, in.value, dW.value(), stats.linear);
          dW.mark_all();
          if (db != nullptr) {
            for (std::size_t t = 0; t < n; ++t) db->value()(t, 0) += g[t];
            db->mark_all();
          }
          if (in.requires_grad) {
            scratch.resize(W.cols());
            transpose_matvec<T>(W, g, scratch, stats.linear);
            add_into(node.a, scratch);
          }
          node.selected.resize(n);
          std::iota(node.selected.begin(), node.selected.end(), std::size_t{0});
        }
        stats.linear_seconds += seconds_since(start);
        break;
      }

      case Kind::Activation: {
        scratch.resize(g.size());
        const Vector<T>& z = node.value;
        for (std::size_t i = 0; i < g.size(); ++i) {
          T d{1};
          switch (node.act) {
            case Activation::Identity: break;
            case Activation::Relu: d = z[i] > T{0} ? T{1} : T{0}; break;
            case Activation::Tanh: d = T{1} - z[i] * z[i]; break;
            case Activation::Sigmoid: d = z[i] * (T{1} - z[i]); break;
          }
          scratch[i] = g[i] * d;
        }
        add_into(node.a, scratch);
        break;
      }

      case Kind::Dropout: {
        if (node.aux.empty()) {
          add_into(node.a, g);
        } else {
          scratch.resize(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) scratch[i] = g[i] * node.aux[i];
          add_into(node.a, scratch);
        }
        break;
      }

      case Kind::Add:
        if (nodes_[node.a].requires_grad) add_into(node.a, g);
        if (nodes_[node.b].requires_grad) add_into(node.b, g);
        break;

      case Kind::Mul: {
        scratch.resize(g.size());
        if (nodes_[node.a].requires_grad) {
          const auto& other = nodes_[node.b].value;
          for (std::size_t i = 0; i < g.size(); ++i) scratch[i] = g[i] * other[i];
          add_into(node.a, scratch);
        }
        if (nodes_[node.b].requires_grad) {
          const auto& other = nodes_[node.a].value;
          for (std::size_t i = 0; i < g.size(); ++i) scratch[i] = g[i] * other[i];
          add_into(node.b, scratch);
        }
        break;
      }

      case Kind::Slice: {
        auto& slot = grads_[node.a];
        if (slot.empty()) slot.assign(nodes_[node.a].value.size(), T{0});
        for (std::size_t i = 0; i < g.size(); ++i) slot[node.offset + i] += g[i];
        break;
      }

      case Kind::SoftmaxXent: {
        scratch.assign(node.aux.begin(), node.aux.end());
        scratch[node.offset] -= T{1};
        for (auto& v : scratch) v *= g[0];
        add_into(node.a, scratch);
        break;
      }
    }
  }
  return stats;
}

template <typename T>
GradientStore<T> Tape<T>::backward(NodeId loss, Rng* selection_rng) {
  GradientStore<T> grads(*params_);
  backward(loss, grads, selection_rng);
  return grads;
}

template <typename T>
std::span<const T> Tape<T>::node_grad(NodeId id) const {
  if (id >= grads_.size()) throw StateError("node_grad: no backward pass for this node");
  return grads_[id];
}

template <typename T>
const std::vector<std::size_t>& Tape<T>::selected(NodeId linear_node) const {
  const auto& node = at(linear_node, "selected");
  if (node.kind != Kind::Linear) throw StateError("selected: not a linear node");
  return node.selected;
}

template <typename T>
std::vector<NodeId> Tape<T>::linear_nodes() const {
  std::vector<NodeId> ids;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].kind == Kind::Linear) ids.push_back(id);
  }
  return ids;
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  grads_.clear();
  forward_flops_.reset();
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class ParamGrad<float>;
template class ParamGrad<double>;
template class GradientStore<float>;
template class GradientStore<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace meprop
