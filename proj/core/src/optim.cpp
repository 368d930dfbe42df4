#include "meprop/optim.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "meprop/error.hpp"

namespace meprop {

std::string_view to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::AdaGrad: return "adagrad";
    case OptimizerKind::Adam: return "adam";
  }
  return "?";
}

OptimizerKind parse_optimizer_kind(std::string_view text) {
  if (text == "sgd") return OptimizerKind::Sgd;
  if (text == "adagrad") return OptimizerKind::AdaGrad;
  if (text == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + std::string(text) + "' (expected adam|adagrad|sgd)");
}

OptimizerConfig OptimizerConfig::defaults_for(OptimizerKind kind) {
  OptimizerConfig c;
  c.kind = kind;
  switch (kind) {
    case OptimizerKind::Adam:
      c.lr = 0.001;
      c.eps = 1e-8;
      break;
    case OptimizerKind::AdaGrad:
      c.lr = 0.1;
      c.eps = 1e-6;
      break;
    case OptimizerKind::Sgd:
      c.lr = 0.1;
      break;
  }
  return c;
}

namespace {

template <typename T>
struct AdamCoefficients {
  T beta1, one_minus_beta1, beta2, one_minus_beta2;
  T step_size;      // lr / (1 - beta1^t)
  T inv_bias2;      // 1 / (1 - beta2^t)
  T eps;
  T grad_scale;
};

template <typename T>
AdamCoefficients<T> adam_coefficients(double lr, double beta1, double beta2, double eps,
                                      std::uint64_t t, double grad_scale) {
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  return {static_cast<T>(beta1), static_cast<T>(1.0 - beta1), static_cast<T>(beta2),
          static_cast<T>(1.0 - beta2), static_cast<T>(lr / bc1), static_cast<T>(1.0 / bc2),
          static_cast<T>(eps), static_cast<T>(grad_scale)};
}

template <typename T>
inline void adam_kernel(const AdamCoefficients<T>& k, T* __restrict theta,
                        const T* __restrict grad, T* __restrict m, T* __restrict v,
                        std::size_t len) {
  for (std::size_t i = 0; i < len; ++i) {
    const T g = grad[i] * k.grad_scale;
    T mi = k.beta1 * m[i] + k.one_minus_beta1 * g;
    T vi = k.beta2 * v[i] + k.one_minus_beta2 * (g * g);
    // Moments of rows that stop receiving gradient decay into subnormals,
    // which are orders of magnitude slower on common hardware.
    if (std::abs(mi) < std::numeric_limits<T>::min()) mi = T{0};
    if (vi < std::numeric_limits<T>::min()) vi = T{0};
    m[i] = mi;
    v[i] = vi;
    theta[i] -= k.step_size * m[i] / (std::sqrt(v[i] * k.inv_bias2) + k.eps);
  }
}

template <typename T>
inline void adagrad_kernel(T lr, T eps, T grad_scale, T* __restrict theta,
                           const T* __restrict grad, T* __restrict sum_sq, std::size_t len) {
  for (std::size_t i = 0; i < len; ++i) {
    const T g = grad[i] * grad_scale;
    sum_sq[i] += g * g;
    theta[i] -= lr * g / (std::sqrt(sum_sq[i]) + eps);
  }
}

template <typename T>
void check_finite(std::span<const T> values, const char* who) {
  if (!verification_mode()) return;
  for (const T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(who) + ": non-finite parameter update");
  }
}

void require_same_size(std::size_t a, std::size_t b, const char* who) {
  if (a != b) {
    throw ConfigError(std::string(who) + ": " + std::to_string(a) + " parameters but " +
                      std::to_string(b) + " gradients");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Flat steps

template <typename T>
void adam_step(AdamState<T>& state, std::span<T> params, std::span<const T> grads) {
  require_same_size(params.size(), grads.size(), "adam_step");
  if (state.m.size() != params.size()) state.m.assign(params.size(), T{0});
  if (state.v.size() != params.size()) state.v.assign(params.size(), T{0});
  ++state.t;
  const auto k =
      adam_coefficients<T>(state.lr, state.beta1, state.beta2, state.eps, state.t, 1.0);
  adam_kernel(k, params.data(), grads.data(), state.m.data(), state.v.data(), params.size());
  check_finite<T>(params, "adam_step");
}

template <typename T>
void adagrad_step(AdaGradState<T>& state, std::span<T> params, std::span<const T> grads) {
  require_same_size(params.size(), grads.size(), "adagrad_step");
  if (state.sum_sq.size() != params.size()) state.sum_sq.assign(params.size(), T{0});
  adagrad_kernel(static_cast<T>(state.lr), static_cast<T>(state.eps), T{1}, params.data(),
                 grads.data(), state.sum_sq.data(), params.size());
  check_finite<T>(params, "adagrad_step");
}

template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, T lr) {
  require_same_size(params.size(), grads.size(), "sgd_step");
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

template <typename T>
void sgd_step(Matrix<T>& params, const RowSparseMatrix<T>& grads, T lr) {
  if (grads.rows != params.rows() || grads.cols != params.cols() ||
      grads.block.rows() != grads.row_indices.size() || grads.block.cols() != params.cols()) {
    throw ConfigError("sgd_step: row-sparse gradient shape does not match parameters");
  }
  for (std::size_t c = 0; c < grads.row_indices.size(); ++c) {
    const std::size_t r = grads.row_indices.at(c);
    if (r >= params.rows()) throw ConfigError("sgd_step: row index out of range");
    sgd_step<T>(params.row(r), grads.block.row(c), lr);
  }
}

// ---------------------------------------------------------------------------
// Store-level optimizers

namespace {

template <typename T>
class SgdOptimizer final : public Optimizer<T> {
 public:
  explicit SgdOptimizer(OptimizerConfig config) : Optimizer<T>(config) {}

  void step(ParameterStore<T>& params, const GradientStore<T>& grads,
            std::size_t batch_size) override {
    const T lr = static_cast<T>(this->config_.lr / static_cast<double>(batch_size));
    for (ParamId id = 0; id < params.size(); ++id) {
      const ParamGrad<T>& g = grads[id];
      Matrix<T>& theta = params[id].value;
      // Rows that received no gradient are neither read nor written.
      for (std::size_t r = 0; r < theta.rows(); ++r) {
        if (g.row_touched(r)) sgd_step<T>(theta.row(r), g.value().row(r), lr);
      }
    }
    ++this->steps_;
  }

  OptimizerKind kind() const override { return OptimizerKind::Sgd; }
  std::vector<std::span<T>> state_tensors() override { return {}; }
};

template <typename T>
class AdaGradOptimizer final : public Optimizer<T> {
 public:
  AdaGradOptimizer(OptimizerConfig config, const ParameterStore<T>& params)
      : Optimizer<T>(config) {
    for (const auto& p : params) sum_sq_.emplace_back(p.value.size(), T{0});
  }

  void step(ParameterStore<T>& params, const GradientStore<T>& grads,
            std::size_t batch_size) override {
    const T lr = static_cast<T>(this->config_.lr);
    const T eps = static_cast<T>(this->config_.eps);
    const T scale = static_cast<T>(1.0 / static_cast<double>(batch_size));
    for (ParamId id = 0; id < params.size(); ++id) {
      Matrix<T>& theta = params[id].value;
      const ParamGrad<T>& g = grads[id];
      const std::size_t cols = theta.cols();
      if (!this->config_.lazy) {
        adagrad_kernel(lr, eps, scale, theta.data().data(), g.value().data().data(),
                       sum_sq_[id].data(), theta.size());
      } else {
        for (std::size_t r = 0; r < theta.rows(); ++r) {
          if (!g.row_touched(r)) continue;
          adagrad_kernel(lr, eps, scale, theta.row(r).data(), g.value().row(r).data(),
                         sum_sq_[id].data() + r * cols, cols);
        }
      }
      check_finite<T>(theta.data(), "adagrad");
    }
    ++this->steps_;
  }

  OptimizerKind kind() const override { return OptimizerKind::AdaGrad; }

  std::vector<std::span<T>> state_tensors() override {
    std::vector<std::span<T>> out;
    for (auto& s : sum_sq_) out.emplace_back(s);
    return out;
  }

 private:
  std::vector<std::vector<T>> sum_sq_;
};

template <typename T>
class AdamOptimizer final : public Optimizer<T> {
 public:
  AdamOptimizer(OptimizerConfig config, const ParameterStore<T>& params) : Optimizer<T>(config) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.size(), T{0});
      v_.emplace_back(p.value.size(), T{0});
    }
  }

  void step(ParameterStore<T>& params, const GradientStore<T>& grads,
            std::size_t batch_size) override {
    ++this->steps_;
    const auto& c = this->config_;
    const auto k = adam_coefficients<T>(c.lr, c.beta1, c.beta2, c.eps, this->steps_,
                                        1.0 / static_cast<double>(batch_size));
    for (ParamId id = 0; id < params.size(); ++id) {
      Matrix<T>& theta = params[id].value;
      const ParamGrad<T>& g = grads[id];
      const std::size_t cols = theta.cols();
      if (!c.lazy) {
        adam_kernel(k, theta.data().data(), g.value().data().data(), m_[id].data(),
                    v_[id].data(), theta.size());
      } else {
        for (std::size_t r = 0; r < theta.rows(); ++r) {
          if (!g.row_touched(r)) continue;
          adam_kernel(k, theta.row(r).data(), g.value().row(r).data(), m_[id].data() + r * cols,
                      v_[id].data() + r * cols, cols);
        }
      }
      check_finite<T>(theta.data(), "adam");
    }
  }

  OptimizerKind kind() const override { return OptimizerKind::Adam; }

  std::vector<std::span<T>> state_tensors() override {
    std::vector<std::span<T>> out;
    for (auto& m : m_) out.emplace_back(m);
    for (auto& v : v_) out.emplace_back(v);
    return out;
  }

 private:
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
};

}  // namespace

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(const OptimizerConfig& config,
                                             const ParameterStore<T>& params) {
  if (!(config.lr >= 0.0) || !std::isfinite(config.lr)) {
    throw ConfigError("learning rate must be a finite value >= 0");
  }
  switch (config.kind) {
    case OptimizerKind::Sgd: return std::make_unique<SgdOptimizer<T>>(config);
    case OptimizerKind::AdaGrad: return std::make_unique<AdaGradOptimizer<T>>(config, params);
    case OptimizerKind::Adam: return std::make_unique<AdamOptimizer<T>>(config, params);
  }
  throw ConfigError("unknown optimizer kind");
}

#define MEPROP_INSTANTIATE_OPTIM(T)                                                         \
  template void adam_step<T>(AdamState<T>&, std::span<T>, std::span<const T>);              \
  template void adagrad_step<T>(AdaGradState<T>&, std::span<T>, std::span<const T>);        \
  template void sgd_step<T>(std::span<T>, std::span<const T>, T);                           \
  template void sgd_step<T>(Matrix<T>&, const RowSparseMatrix<T>&, T);                      \
  template std::unique_ptr<Optimizer<T>> make_optimizer<T>(const OptimizerConfig&,          \
                                                           const ParameterStore<T>&);

MEPROP_INSTANTIATE_OPTIM(float)
MEPROP_INSTANTIATE_OPTIM(double)

}  // namespace meprop
