#include <doctest.h>

#include <cmath>

#include "meprop/error.hpp"
#include "meprop/nn.hpp"
#include "meprop/ops.hpp"
#include "oracles.hpp"

using namespace meprop;

namespace {

MlpSpec small_spec(std::size_t in, std::size_t hidden, std::size_t layers, std::size_t out) {
  MlpSpec s;
  s.input_dim = in;
  s.hidden_dim = hidden;
  s.num_hidden_layers = layers;
  s.output_dim = out;
  return s;
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("mnist shape parameter count") {
  MlpSpec spec;
  CHECK(spec.parameter_count() == 648010);
  Mlp<float> model(spec, 1);
  CHECK(model.params().num_scalars() == 648010);
  spec.use_bias = false;
  CHECK(spec.parameter_count() == 784 * 500 + 500 * 500 + 500 * 10);
}

TEST_CASE("depth builds one policy-carrying linear layer per hidden layer") {
  for (std::size_t L = 1; L <= 5; ++L) {
    auto spec = small_spec(6, 8, L, 3);
    spec.hidden_policy = SelectionPolicy::top_k(3);
    spec.output_policy = SelectionPolicy::top_k(2);
    Mlp<double> model(spec, 1);
    REQUIRE(model.layers().size() == L + 1);
    for (std::size_t l = 0; l < L; ++l) {
      CHECK(model.layers()[l].policy == SelectionPolicy::top_k(3));
      CHECK(model.layers()[l].out_dim == 8);
    }
    CHECK(model.layers().back().policy == SelectionPolicy::top_k(2));
    CHECK(model.layers().back().out_dim == 3);
  }
  CHECK_THROWS_AS(Mlp<double>(small_spec(6, 8, 6, 3), 1), ConfigError);
  CHECK_THROWS_AS(Mlp<double>(small_spec(6, 8, 0, 3), 1), ConfigError);
  auto bad = small_spec(6, 8, 2, 3);
  bad.hidden_policy = SelectionPolicy::top_k(9);
  CHECK_THROWS_AS(Mlp<double>(bad, 1), ConfigError);
  bad = small_spec(6, 8, 2, 3);
  bad.dropout_rate = 1.0;
  CHECK_THROWS_AS(Mlp<double>(bad, 1), ConfigError);
}

TEST_CASE("one hidden layer with hand-set weights gives hand-computed logits") {
  auto spec = small_spec(2, 2, 1, 2);
  spec.activation = Activation::Relu;
  Mlp<double> model(spec, 1);
  auto& p = model.params();
  const auto& layers = model.layers();
  p[layers[0].weight].value = Matrix<double>{{1, 0}, {0, -1}};
  p[*layers[0].bias].value = Matrix<double>{{0.5}, {0}};
  p[layers[1].weight].value = Matrix<double>{{2, 1}, {-1, 3}};
  p[*layers[1].bias].value = Matrix<double>{{0}, {1}};
  // h = relu(<3 + 0.5, -4>) = <3.5, 0>; z = <7, -3.5 + 1>.
  CHECK(model.logits(std::vector<double>{3, 4}) == std::vector<double>{7, -2.5});
  CHECK(model.classify(std::vector<double>{3, 4}) == 0);
  CHECK_THROWS_AS(model.logits(std::vector<double>{1}), ConfigError);
}

TEST_CASE("tape forward, plain forward and transposed forward agree bitwise") {
  auto spec = small_spec(12, 9, 3, 4);
  spec.dropout_rate = 0.3;
  Mlp<double> model(spec, 5);
  Rng rng(6);
  const TransposedWeights<double> wt(model);
  for (int it = 0; it < 10; ++it) {
    auto x = oracle::random_vector(12, rng);
    x[0] = 0.0;
    Tape<double> a(model.params());
    Tape<double> b(model.params());
    Rng ra(1);
    Rng rb(1);
    const NodeId za = model.forward(a, x, false, ra);
    const NodeId zb = model.forward(b, x, false, rb, &wt);
    const auto plain = model.logits(x);
    const auto fast = model.logits(x, &wt);
    CHECK(std::vector<double>(a.value(za).begin(), a.value(za).end()) == plain);
    CHECK(std::vector<double>(b.value(zb).begin(), b.value(zb).end()) == plain);
    CHECK(fast == plain);
  }
}

TEST_CASE("dropout") {
  Rng rng(1);
  const std::vector<double> v = {1, -2, 3, 4};
  SUBCASE("rate 0 and eval mode are the identity") {
    CHECK(dropout_forward<double>(v, 0.0, rng, true) == v);
    CHECK(dropout_forward<double>(v, 0.5, rng, false) == v);
    auto spec = small_spec(4, 6, 2, 3);
    Mlp<double> model(spec, 2);
    Tape<double> t1(model.params());
    Tape<double> t2(model.params());
    const NodeId a = model.forward(t1, v, true, rng);
    const NodeId b = model.forward(t2, v, false, rng);
    CHECK(std::equal(t1.value(a).begin(), t1.value(a).end(), t2.value(b).begin()));
  }
  SUBCASE("fixed seed gives the same mask") {
    Rng a(9);
    Rng b(9);
    std::vector<double> ma;
    std::vector<double> mb;
    dropout_forward<double>(v, 0.4, a, true, &ma);
    dropout_forward<double>(v, 0.4, b, true, &mb);
    CHECK(ma == mb);
    for (const double m : ma) CHECK((m == 0.0 || m == doctest::Approx(1 / 0.6)));
  }
  SUBCASE("Monte Carlo mean matches the input within 1%") {
    const std::vector<double> ones = {1.0, 2.0};
    std::vector<double> sum(2, 0.0);
    const int draws = 100000;
    for (int d = 0; d < draws; ++d) {
      const auto out = dropout_forward<double>(ones, 0.2, rng, true);
      sum[0] += out[0];
      sum[1] += out[1];
    }
    CHECK(std::abs(sum[0] / draws - 1.0) <= 0.01);
    CHECK(std::abs(sum[1] / draws - 2.0) <= 0.02);
  }
}

TEST_CASE("softmax cross-entropy") {
  const std::vector<double> zero = {0, 0};
  CHECK(softmax_cross_entropy<double>(zero, 0).loss == doctest::Approx(std::log(2.0)));
  const std::vector<double> dominant = {100, 0, 0};
  CHECK(softmax_cross_entropy<double>(dominant, 0).loss < 1e-40);
  CHECK(softmax_cross_entropy<double>(dominant, 1).loss == doctest::Approx(100));
  Rng rng(3);
  for (int it = 0; it < 20; ++it) {
    auto z = oracle::random_vector(5, rng);
    const std::size_t t = rng.below(5);
    const auto g = softmax_cross_entropy<double>(z, t).gradient(t);
    double num = 0;
    double den = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      const double saved = z[i];
      z[i] = saved + 1e-5;
      const double up = softmax_cross_entropy<double>(z, t).loss;
      z[i] = saved - 1e-5;
      const double down = softmax_cross_entropy<double>(z, t).loss;
      z[i] = saved;
      const double fd = (up - down) / 2e-5;
      num += (fd - g[i]) * (fd - g[i]);
      den += g[i] * g[i];
    }
    CHECK(std::sqrt(num / den) <= 1e-6);
  }
  CHECK_THROWS_AS(softmax_cross_entropy<double>(zero, 2), ConfigError);
}

TEST_CASE("glorot bounds") {
  Rng rng(4);
  Matrix<double> m(30, 50);
  glorot_uniform(m, rng);
  const double a = std::sqrt(6.0 / 80.0);
  double lo = 0;
  double hi = 0;
  for (const double v : m.data()) {
    CHECK(std::abs(v) <= a);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(hi > 0.9 * a);
  CHECK(lo < -0.9 * a);
}

TEST_CASE("lstm") {
  Rng rng(5);
  SUBCASE("zero weights and zero state give zero output") {
    ParameterStore<double> params;
    LstmCell<double> cell(LstmSpec{3, 4, {}}, params, rng);
    for (auto& p : params) p.value.fill(0.0);
    const auto step = lstm_cell_forward<double>(cell, params, std::vector<double>{1, -1, 2},
                                                std::vector<double>(4, 0.0),
                                                std::vector<double>(4, 0.0));
    CHECK(step.h == std::vector<double>(4, 0.0));
    CHECK(step.c == std::vector<double>(4, 0.0));
  }

  auto run = [](LstmCell<double>& cell, const std::vector<std::vector<double>>& xs,
                Tape<double>& tape) {
    auto state = cell.initial_state(tape);
    for (const auto& x : xs) state = cell.forward(tape, tape.input(x), state);
    return tape.softmax_cross_entropy(state.h, 1);
  };
  std::vector<std::vector<double>> xs;
  for (int t = 0; t < 3; ++t) xs.push_back(oracle::random_vector(3, rng));

  SUBCASE("cell matches the four-gate equations") {
    ParameterStore<double> params;
    LstmCell<double> cell(LstmSpec{3, 4, {}}, params, rng);
    for (auto& v : params[cell.bias()].value.data()) v = rng.uniform(-1, 1);
    const auto& Wx = params[cell.input_weight()].value;
    const auto& Wh = params[cell.hidden_weight()].value;
    const auto& b = params[cell.bias()].value;
    auto sigmoid = [](double v) { return 1 / (1 + std::exp(-v)); };
    std::vector<double> h(4, 0.0);
    std::vector<double> c(4, 0.0);
    std::vector<double> h_ref(4, 0.0);
    std::vector<double> c_ref(4, 0.0);
    for (const auto& x : xs) {
      const auto step = lstm_cell_forward<double>(cell, params, x, h, c);
      auto z = oracle::matvec(Wx, x);
      const auto zh = oracle::matvec(Wh, h_ref);
      for (std::size_t r = 0; r < 16; ++r) z[r] += zh[r] + b(r, 0);
      for (std::size_t u = 0; u < 4; ++u) {
        const double ig = sigmoid(z[u]);
        const double fg = sigmoid(z[4 + u]);
        const double og = sigmoid(z[8 + u]);
        const double gg = std::tanh(z[12 + u]);
        c_ref[u] = fg * c_ref[u] + ig * gg;
        h_ref[u] = og * std::tanh(c_ref[u]);
      }
      h = step.h;
      c = step.c;
      CHECK(oracle::max_abs_diff(h, h_ref) < 1e-14);
      CHECK(oracle::max_abs_diff(c, c_ref) < 1e-14);
    }
  }

  SUBCASE("full-k gates equal the dense run bitwise") {
    ParameterStore<double> dense_params;
    Rng r1(11);
    LstmCell<double> dense(LstmSpec{3, 4, SelectionPolicy::dense()}, dense_params, r1);
    ParameterStore<double> full_params;
    Rng r2(11);
    LstmCell<double> full(LstmSpec{3, 4, SelectionPolicy::top_k(16)}, full_params, r2);
    Tape<double> ta(dense_params);
    Tape<double> tb(full_params);
    const auto ga = ta.backward(run(dense, xs, ta));
    const auto gb = tb.backward(run(full, xs, tb));
    for (ParamId p = 0; p < dense_params.size(); ++p) CHECK(ga[p].value() == gb[p].value());
  }

  SUBCASE("gradients match central differences") {
    ParameterStore<double> params;
    LstmCell<double> cell(LstmSpec{3, 4, {}}, params, rng);
    for (auto& v : params[cell.bias()].value.data()) v = rng.uniform(-0.5, 0.5);
    Tape<double> tape(params);
    const auto grads = tape.backward(run(cell, xs, tape));
    double num = 0;
    double den = 0;
    for (ParamId p = 0; p < params.size(); ++p) {
      auto& value = params[p].value;
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double saved = value.data()[i];
        auto loss = [&] {
          Tape<double> t(params);
          return t.value(run(cell, xs, t))[0];
        };
        value.data()[i] = saved + 1e-5;
        const double up = loss();
        value.data()[i] = saved - 1e-5;
        const double down = loss();
        value.data()[i] = saved;
        const double fd = (up - down) / 2e-5;
        const double an = grads[p].value().data()[i];
        num += (fd - an) * (fd - an);
        den += an * an;
      }
    }
    CHECK(std::sqrt(num / den) <= 1e-4);
  }

  SUBCASE("shape errors") {
    ParameterStore<double> params;
    LstmCell<double> cell(LstmSpec{3, 4, {}}, params, rng);
    CHECK_THROWS_AS(lstm_cell_forward<double>(cell, params, std::vector<double>{1, 2},
                                              std::vector<double>(4, 0.0),
                                              std::vector<double>(4, 0.0)),
                    ConfigError);
    CHECK_THROWS_AS(LstmCell<double>(LstmSpec{0, 4, {}}, params, rng), ConfigError);
  }
}

TEST_CASE("lstm classifier") {
  LstmClassifier<double> model(4, 6, 2, SelectionPolicy::top_k(3), 7);
  const std::vector<std::uint8_t> tokens = {0, 3, 1, 2};
  const std::size_t c = model.classify(tokens);
  CHECK(c < 2);
  CHECK(model.classify(tokens) == c);
  Tape<double> tape(model.params());
  const NodeId z = model.forward(tape, tokens);
  CHECK(tape.value(z).size() == 2);
  const std::vector<std::uint8_t> bad = {0, 9};
  CHECK_THROWS_AS(model.classify(bad), ConfigError);
}

}  // TEST_SUITE
