#include "meprop/verify.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <sstream>

#include "meprop/autograd.hpp"
#include "meprop/config.hpp"
#include "meprop/dataio.hpp"
#include "meprop/error.hpp"
#include "meprop/linalg.hpp"
#include "meprop/nn.hpp"
#include "meprop/ops.hpp"
#include "meprop/optim.hpp"
#include "meprop/sparsify.hpp"
#include "meprop/unified.hpp"

namespace meprop {

namespace {

using Check = std::function<std::string()>;  // empty string = pass

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << v;
  return s.str();
}

Matrix<double> random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix<double> m(r, c);
  for (auto& v : m.data()) v = rng.uniform(-1, 1);
  return m;
}

std::vector<double> random_vector(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return v;
}

std::string check_topk_example() {
  const std::vector<double> v = {1, 2, 3, -4};
  const auto dense = topk_select<double>(v, 2).to_dense();
  if (dense != std::vector<double>{0, 0, 3, -4}) return "top-2 of <1,2,3,-4> is wrong";
  const std::vector<double> ties = {1, -1, 1, 0.5};
  const auto sg = topk_select<double>(ties, 2);
  if (sg.indices != std::vector<std::size_t>{0, 1}) return "ties not resolved to lower index";
  return {};
}

std::string check_oracle(const VerifyOptions& opt) {
  Rng rng = Rng(opt.seed).split(11);
  double worst = 0;
  for (std::size_t it = 0; it < opt.instances; ++it) {
    const std::size_t n = 1 + rng.below(64);
    const std::size_t m = 1 + rng.below(64);
    const std::size_t k = 1 + rng.below(n);
    const auto W = random_matrix(n, m, rng);
    const auto x = random_vector(m, rng);
    const auto g = random_vector(n, rng);
    FlopCounter flops;
    const auto sg = topk_select<double>(g, k);
    const auto sparse = backward_sparse<double>(sg, W, x, flops);
    // Plain-loop dense backward of the masked gradient.
    const auto masked = sg.to_dense();
    const auto dW = sparse.dW.to_dense();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) worst = std::max(worst, std::abs(dW(i, j) - masked[i] * x[j]));
    }
    for (std::size_t j = 0; j < m; ++j) {
      double want = 0;
      for (std::size_t i = 0; i < n; ++i) want += W(i, j) * masked[i];
      worst = std::max(worst, std::abs(sparse.dx[j] - want));
    }
  }
  if (worst > 1e-12) return "max abs difference " + fmt(worst);
  return {};
}

std::string check_flop_ratio() {
  Rng rng(3);
  const std::size_t n = 64;
  const std::size_t m = 48;
  const auto W = random_matrix(n, m, rng);
  const auto x = random_vector(m, rng);
  const auto g = random_vector(n, rng);
  FlopCounter dense;
  backward_dense<double>(g, W, x, dense);
  for (const std::size_t k : {1u, 5u, 16u, 63u, 64u}) {
    FlopCounter sparse;
    backward_sparse<double>(topk_select<double>(g, k), W, x, sparse);
    if (sparse.multiply_adds * n != dense.multiply_adds * k) {
      return "k=" + std::to_string(k) + ": " + std::to_string(sparse.multiply_adds) + " vs " +
             std::to_string(dense.multiply_adds);
    }
  }
  return {};
}

template <typename Loss>
double numeric_grad(Matrix<double>& value, std::size_t i, const Loss& loss) {
  constexpr double h = 1e-6;
  const double saved = value.data()[i];
  value.data()[i] = saved + h;
  const double up = loss();
  value.data()[i] = saved - h;
  const double down = loss();
  value.data()[i] = saved;
  return (up - down) / (2 * h);
}

/// Worst per-tensor ||analytic - numeric|| / (||analytic|| + ||numeric||).
template <typename Loss>
double worst_relative_error(ParameterStore<double>& params, const GradientStore<double>& grads,
                            const Loss& loss) {
  double worst = 0;
  for (ParamId p = 0; p < params.size(); ++p) {
    double diff = 0;
    double norm = 0;
    auto& value = params[p].value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double a = grads[p].value().data()[i];
      const double num = numeric_grad(value, i, loss);
      diff += (a - num) * (a - num);
      norm += a * a + num * num;
    }
    if (norm > 0) worst = std::max(worst, std::sqrt(diff) / std::sqrt(norm));
  }
  return worst;
}

std::string check_mlp_gradients() {
  Rng rng(5);
  double worst = 0;
  for (const Activation act : {Activation::Tanh, Activation::Sigmoid, Activation::Relu}) {
    for (std::size_t layers = 1; layers <= 3; ++layers) {
      MlpSpec spec;
      spec.input_dim = 7;
      spec.hidden_dim = 6;
      spec.num_hidden_layers = layers;
      spec.output_dim = 4;
      spec.activation = act;
      Mlp<double> model(spec, rng.next_u64());
      const auto x = random_vector(spec.input_dim, rng);
      const std::size_t target = rng.below(spec.output_dim);
      Tape<double> tape(model.params());
      Rng unused;
      const NodeId loss = tape.softmax_cross_entropy(model.forward(tape, x, false, unused), target);
      const auto grads = tape.backward(loss);
      auto f = [&] {
        const auto logits = model.logits(x);
        return softmax_cross_entropy<double>(logits, target).loss;
      };
      worst = std::max(worst, worst_relative_error(model.params(), grads, f));
    }
  }
  if (worst > 1e-4) return "relative error " + fmt(worst);
  return {};
}

std::string check_lstm_gradients() {
  Rng rng(6);
  LstmClassifier<double> model(3, 5, 2, SelectionPolicy::dense(), 17);
  std::vector<std::uint8_t> tokens(4);
  for (auto& t : tokens) t = static_cast<std::uint8_t>(rng.below(3));
  Tape<double> tape(model.params());
  const NodeId loss = tape.softmax_cross_entropy(model.forward(tape, tokens), 1);
  const auto grads = tape.backward(loss);
  auto f = [&] {
    Tape<double> t(model.params());
    return t.value(t.softmax_cross_entropy(model.forward(t, tokens), 1))[0];
  };
  const double worst = worst_relative_error(model.params(), grads, f);
  if (worst > 1e-4) return "relative error " + fmt(worst);
  return {};
}

std::string check_sgd_untouched_rows() {
  MlpSpec spec;
  spec.input_dim = 12;
  spec.hidden_dim = 16;
  spec.num_hidden_layers = 2;
  spec.output_dim = 5;
  spec.hidden_policy = SelectionPolicy::top_k(3);
  spec.output_policy = SelectionPolicy::top_k(2);
  Mlp<double> model(spec, 9);
  const ParameterStore<double> before = model.params();
  Rng rng(10);
  const auto x = random_vector(spec.input_dim, rng);
  Tape<double> tape(model.params());
  const NodeId loss = tape.softmax_cross_entropy(model.forward(tape, x, false, rng), 3);
  GradientStore<double> grads(model.params());
  tape.backward(loss, grads);
  OptimizerConfig cfg = OptimizerConfig::defaults_for(OptimizerKind::Sgd);
  make_optimizer<double>(cfg, model.params())->step(model.params(), grads, 1);

  const auto nodes = tape.linear_nodes();
  const auto& layers = model.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& kept = tape.selected(nodes[l]);
    const auto& w0 = before[layers[l].weight].value;
    const auto& w1 = model.params()[layers[l].weight].value;
    for (std::size_t r = 0; r < w0.rows(); ++r) {
      const bool selected = std::binary_search(kept.begin(), kept.end(), r);
      const bool same = std::equal(w0.row(r).begin(), w0.row(r).end(), w1.row(r).begin());
      if (!selected && !same) return "unselected row " + std::to_string(r) + " changed";
    }
  }
  return {};
}

std::string check_adagrad_zero_row() {
  ParameterStore<double> params;
  Rng rng(12);
  params.add("w", random_matrix(4, 3, rng));
  const Matrix<double> before = params[0].value;
  GradientStore<double> grads(params);
  for (std::size_t j = 0; j < 3; ++j) {
    grads[0].value()(0, j) = 0.5;
    grads[0].value()(2, j) = -0.25;
  }
  grads[0].mark_row(0);
  grads[0].mark_row(2);
  auto opt = make_optimizer<double>(OptimizerConfig::defaults_for(OptimizerKind::AdaGrad), params);
  opt->step(params, grads, 1);
  for (const std::size_t r : {1u, 3u}) {
    if (!std::equal(before.row(r).begin(), before.row(r).end(), params[0].value.row(r).begin())) {
      return "zero-gradient row " + std::to_string(r) + " changed";
    }
  }
  return {};
}

std::string check_unified_batch() {
  Rng rng(13);
  MlpSpec spec;
  spec.input_dim = 10;
  spec.hidden_dim = 12;
  spec.num_hidden_layers = 2;
  spec.output_dim = 4;
  const std::size_t b = 5;
  const Matrix<double> X = random_matrix(b, spec.input_dim, rng);
  std::vector<std::uint8_t> labels(b);
  for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(spec.output_dim));

  // Dense: the batched pass equals the sum of per-example tape gradients.
  Mlp<double> model(spec, 21);
  BatchedPass<double> pass(model);
  pass.forward(X, false, rng);
  pass.loss(labels);
  GradientStore<double> batched(model.params());
  pass.backward(batched);
  GradientStore<double> summed(model.params());
  for (std::size_t s = 0; s < b; ++s) {
    Tape<double> tape(model.params());
    const std::vector<double> x(X.row(s).begin(), X.row(s).end());
    tape.backward(tape.softmax_cross_entropy(model.forward(tape, x, false, rng), labels[s]),
                  summed);
  }
  double worst = 0;
  for (ParamId p = 0; p < model.params().size(); ++p) {
    const auto a = batched[p].value().data();
    const auto e = summed[p].value().data();
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - e[i]));
  }
  if (worst > 1e-12) return "dense batched gradient differs by " + fmt(worst);

  // Top-k: every hidden layer keeps exactly k rows shared by the batch.
  spec.hidden_policy = SelectionPolicy::top_k(4);
  Mlp<double> sparse_model(spec, 21);
  BatchedPass<double> sparse_pass(sparse_model);
  sparse_pass.forward(X, false, rng);
  sparse_pass.loss(labels);
  GradientStore<double> grads(sparse_model.params());
  sparse_pass.backward(grads);
  for (std::size_t l = 0; l + 1 < sparse_model.layers().size(); ++l) {
    const auto& kept = sparse_pass.selected(l);
    const auto& dW = grads[sparse_model.layers()[l].weight];
    if (kept.size() != 4) return "hidden layer kept " + std::to_string(kept.size()) + " rows";
    if (dW.touched_rows() != kept) return "touched rows differ from the shared index set";
  }
  return {};
}

std::string check_config_round_trip() {
  TrainConfig c;
  c.policy = SelectionMode::TopK;
  c.k = 30;
  c.unified = true;
  c.batch = 50;
  c.dropout = 0.1;
  c.seed = 7;
  const TrainConfig back = parse_config_text(format_config(c));
  if (to_key_values(back) != to_key_values(c)) return "formatted config does not parse back";
  try {
    TrainConfig bad;
    bad.policy = SelectionMode::TopK;
    bad.k = 600;
    bad.hidden = 500;
    bad.validate();
    return "k > hidden accepted";
  } catch (const ConfigError&) {
  }
  return {};
}

std::string check_idx_round_trip() {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("meprop-verify-" + std::to_string(Rng(std::random_device{}()).next_u64()));
  std::filesystem::create_directories(dir);
  std::string result;
  try {
    Rng rng(14);
    const std::size_t count = 6;
    std::vector<std::uint8_t> pixels(count * 4 * 3);
    for (auto& p : pixels) p = static_cast<std::uint8_t>(rng.below(256));
    std::vector<std::uint8_t> labels(count);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(10));
    write_idx_images(dir / "img", count, 4, 3, pixels);
    write_idx_labels(dir / "lbl", labels);
    const Dataset d = load_idx(dir / "img", dir / "lbl");
    if (d.size() != count || d.image_rows != 4 || d.image_cols != 3 || d.labels != labels) {
      result = "shape or labels differ after round trip";
    }
    for (std::size_t i = 0; result.empty() && i < pixels.size(); ++i) {
      if (d.pixels[i] != static_cast<float>(pixels[i]) / 255.0f) result = "pixel scaling differs";
    }
  } catch (const std::exception& e) {
    result = e.what();
  }
  std::filesystem::remove_all(dir);
  return result;
}

}  // namespace

std::vector<CheckResult> run_verification(const VerifyOptions& options,
                                          const std::function<void(const CheckResult&)>& on_result) {
  const std::vector<std::pair<std::string, Check>> checks = {
      {"topk-example", check_topk_example},
      {"sparse-backward-oracle", [&] { return check_oracle(options); }},
      {"flop-ratio", check_flop_ratio},
      {"mlp-gradcheck", check_mlp_gradients},
      {"lstm-gradcheck", check_lstm_gradients},
      {"sgd-untouched-rows", check_sgd_untouched_rows},
      {"adagrad-zero-row", check_adagrad_zero_row},
      {"unified-batch", check_unified_batch},
      {"config-round-trip", check_config_round_trip},
      {"idx-round-trip", check_idx_round_trip},
  };
  const bool saved_mode = verification_mode();
  set_verification_mode(true);
  std::vector<CheckResult> results;
  for (const auto& [name, fn] : checks) {
    CheckResult r{name, false, {}};
    try {
      r.detail = fn();
      r.passed = r.detail.empty();
    } catch (const std::exception& e) {
      r.detail = std::string("exception: ") + e.what();
    }
    if (on_result) on_result(r);
    results.push_back(std::move(r));
  }
  set_verification_mode(saved_mode);
  return results;
}

}  // namespace meprop
