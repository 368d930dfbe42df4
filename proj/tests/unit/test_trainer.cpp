#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "meprop/error.hpp"
#include "meprop/trainer.hpp"

using namespace meprop;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.hidden = 32;
  c.epochs = 2;
  c.batch = 10;
  c.precision = Precision::F64;
  return c;
}

template <typename T>
double mean_loss(const Mlp<T>& model, const Dataset& data, std::size_t n) {
  double total = 0;
  std::vector<T> x;
  for (std::size_t i = 0; i < n; ++i) {
    const auto img = data.image(i);
    x.assign(img.begin(), img.end());
    total += softmax_cross_entropy<T>(model.logits(x), data.labels[i]).loss;
  }
  return total / static_cast<double>(n);
}

// Every field except wall-clock timings.
void check_same_metrics(const RunReport& a, const RunReport& b) {
  REQUIRE(a.epochs.size() == b.epochs.size());
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    CHECK(a.epochs[i].dev_acc == b.epochs[i].dev_acc);
    CHECK(a.epochs[i].test_acc == b.epochs[i].test_acc);
    CHECK(a.epochs[i].train_loss == b.epochs[i].train_loss);
    CHECK(a.epochs[i].flops_fwd == b.epochs[i].flops_fwd);
    CHECK(a.epochs[i].flops_bwd == b.epochs[i].flops_bwd);
    CHECK(a.epochs[i].selections == b.epochs[i].selections);
  }
  CHECK(a.chosen_iteration == b.chosen_iteration);
  CHECK(a.final_test_acc == b.final_test_acc);
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("one epoch on ten images lowers their loss") {
  const auto data = fixture::banded_splits(10, 10, 10);
  for (const auto policy : {SelectionMode::Dense, SelectionMode::TopK}) {
    auto c = small_config();
    c.epochs = 1;
    c.batch = 1;
    c.policy = policy;
    c.k = 8;
    MlpTrainer<double> trainer(c, data);
    const double before = mean_loss(trainer.model(), data.train, 10);
    trainer.run();
    CHECK(mean_loss(trainer.model(), data.train, 10) < before);
  }
}

TEST_CASE("evaluate") {
  const auto data = fixture::banded_splits(20, 50, 50);
  MlpSpec spec;
  spec.hidden_dim = 8;
  Mlp<double> model(spec, 1);
  SUBCASE("agrees with a per-example recount") {
    std::size_t correct = 0;
    std::vector<double> x;
    for (std::size_t i = 0; i < data.dev.size(); ++i) {
      const auto img = data.dev.image(i);
      x.assign(img.begin(), img.end());
      const auto z = model.logits(x);
      const auto arg = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
      correct += arg == data.dev.labels[i];
    }
    CHECK(evaluate(model, data.dev) == static_cast<double>(correct) / 50.0);
  }
  SUBCASE("constant output scores chance on balanced labels") {
    const auto& last = model.layers().back();
    model.params()[last.weight].value.fill(0.0);
    model.params()[*last.bias].value(3, 0) = 1.0;
    CHECK(evaluate(model, data.dev) == doctest::Approx(0.1));
  }
  SUBCASE("all-correct fixture") {
    Dataset relabelled = data.dev;
    std::vector<double> x;
    for (std::size_t i = 0; i < relabelled.size(); ++i) {
      const auto img = relabelled.image(i);
      x.assign(img.begin(), img.end());
      relabelled.labels[i] = static_cast<std::uint8_t>(model.classify(x));
    }
    CHECK(evaluate(model, relabelled) == 1.0);
  }
  CHECK_THROWS_AS(evaluate(model, Dataset{}), ConfigError);
}

TEST_CASE("chosen iteration is the first dev maximum") {
  RunReport r;
  const double dev[] = {0.5, 0.7, 0.7, 0.6};
  const double test[] = {0.9, 0.8, 0.99, 0.95};
  for (std::size_t i = 0; i < 4; ++i) {
    EpochRecord e;
    e.iteration = i + 1;
    e.dev_acc = dev[i];
    e.test_acc = test[i];
    r.epochs.push_back(e);
  }
  r.choose();
  CHECK(r.chosen_iteration == 2);
  CHECK(r.final_test_acc == 0.8);
  REQUIRE(r.chosen() != nullptr);
  CHECK(r.chosen()->iteration == 2);
  RunReport empty;
  empty.choose();
  CHECK(empty.chosen_iteration == 0);
  CHECK(empty.chosen() == nullptr);
}

TEST_CASE("identical config and seed reproduce the report") {
  const auto data = fixture::banded_splits(200, 50, 50);
  for (const bool unified : {false, true}) {
    auto c = small_config();
    c.policy = SelectionMode::TopK;
    c.k = 6;
    c.dropout = 0.1;
    c.unified = unified;
    const auto a = train(c, &data);
    const auto b = train(c, &data);
    check_same_metrics(a, b);
    c.seed = 2;
    const auto other = train(c, &data);
    CHECK(other.epochs[0].train_loss != a.epochs[0].train_loss);
  }
}

TEST_CASE("timings are recorded and ordered") {
  const auto data = fixture::banded_splits(200, 50, 50);
  for (const bool unified : {false, true}) {
    auto c = small_config();
    c.policy = SelectionMode::TopK;
    c.k = 4;
    c.unified = unified;
    const auto r = train(c, &data);
    REQUIRE(r.epochs.size() == 2);
    for (const auto& e : r.epochs) {
      CHECK(e.fp_time > 0);
      CHECK(e.linear_bp_time > 0);
      CHECK(e.linear_bp_time <= e.overall_bp_time);
      CHECK(e.overall_bp_time <= e.fp_time + e.overall_bp_time);
    }
  }
}

TEST_CASE("model-level backward flop ratio") {
  const auto data = fixture::banded_splits(100, 20, 20);
  auto c = small_config();
  c.epochs = 1;
  c.hidden = 40;
  const auto dense = train(c, &data);
  CHECK(dense.epochs[0].flops_bwd == dense.epochs[0].flops_bwd_dense);
  CHECK(dense.epochs[0].flops_bwd ==
        100 * dense_backward_flops_per_example(c.mlp_spec()));
  c.policy = SelectionMode::TopK;
  c.k = 10;
  const auto sparse = train(c, &data);
  // Hidden layers: 40 -> 10 rows. Output (10 wide) runs dense at k = 10.
  const double expected = (10.0 * 784 + 2.0 * 10 * 40 + 2.0 * 10 * 40) /
                          (40.0 * 784 + 2.0 * 40 * 40 + 2.0 * 10 * 40);
  const double ratio = static_cast<double>(sparse.epochs[0].flops_bwd) /
                       static_cast<double>(dense.epochs[0].flops_bwd);
  CHECK(ratio == doctest::Approx(expected).epsilon(0.01));
  CHECK(sparse.epochs[0].selections > 0);
}

TEST_CASE("dense backward flops per example") {
  MlpSpec spec;
  CHECK(dense_backward_flops_per_example(spec) == 784 * 500 + 2 * 500 * 500 + 2 * 10 * 500);
}

TEST_CASE("divergence stops the run with the epochs so far") {
  const auto data = fixture::banded_splits(100, 20, 20);
  auto c = small_config();
  c.optimizer = OptimizerKind::Sgd;
  // Unbounded activations so the huge step overflows the loss.
  c.activation = Activation::Relu;
  c.lr = 1e300;
  c.epochs = 3;
  const auto r = train(c, &data);
  CHECK(r.diverged);
  CHECK_FALSE(r.error.empty());
  CHECK(r.epochs.size() < 3);
}

TEST_CASE("sweep keeps going past a failing value") {
  const auto data = fixture::banded_splits(60, 20, 20);
  auto c = small_config();
  c.epochs = 1;
  c.policy = SelectionMode::TopK;
  const auto entries = sweep(c, SweepParameter::K, {"5", "999", "oops", "8"}, &data);
  REQUIRE(entries.size() == 4);
  CHECK(entries[0].report.error.empty());
  CHECK(entries[0].report.epochs.size() == 1);
  CHECK(entries[1].report.error.find("999") != std::string::npos);
  CHECK_FALSE(entries[2].report.error.empty());
  CHECK(entries[3].report.error.empty());
  CHECK(entries[3].config.k == 8);

  std::ostringstream csv;
  write_sweep_csv(csv, SweepParameter::K, entries);
  CHECK(csv.str().rfind("k,iteration,", 0) == 0);

  const auto hid = apply_sweep_value(c, SweepParameter::Hidden, "20");
  CHECK(hid.hidden == 20);
  CHECK(apply_sweep_value(c, SweepParameter::Policy, "randomk").policy == SelectionMode::RandomK);
  CHECK(apply_sweep_value(c, SweepParameter::Layers, "4").layers == 4);
  CHECK(parse_sweep_parameter("hidden") == SweepParameter::Hidden);
  CHECK_THROWS_AS(parse_sweep_parameter("width"), ConfigError);
}

TEST_CASE("report files") {
  const auto data = fixture::banded_splits(60, 20, 20);
  auto c = small_config();
  c.policy = SelectionMode::TopK;
  c.k = 4;
  const auto r = train(c, &data);
  std::ostringstream csv;
  write_csv(csv, r);
  std::istringstream lines(csv.str());
  std::string header;
  std::getline(lines, header);
  CHECK(header ==
        "iteration,dev_acc,test_acc,train_loss,fp_time,linear_bp_time,overall_bp_time,"
        "flops_fwd,flops_bwd");
  std::size_t rows = 0;
  for (std::string line; std::getline(lines, line);) ++rows;
  CHECK(rows == 2);

  std::ostringstream summary;
  write_summary(summary, c, r);
  CHECK(summary.str().find("chosen_iteration: " + std::to_string(r.chosen_iteration)) !=
        std::string::npos);
  CHECK(summary.str().find("speedup: n/a") != std::string::npos);
  std::ostringstream with_base;
  write_summary(with_base, c, r, &r);
  CHECK(with_base.str().find("speedup: 1") != std::string::npos);
}

TEST_CASE("parity task trains an LSTM") {
  auto c = small_config();
  c.task = Task::Parity;
  c.hidden = 8;
  c.seq_len = 4;
  c.seq_train = 200;
  c.seq_eval = 100;
  c.policy = SelectionMode::TopK;
  c.k = 8;
  const auto a = train(c, nullptr);
  REQUIRE(a.epochs.size() == 2);
  CHECK(a.error.empty());
  for (const auto& e : a.epochs) {
    CHECK(e.flops_bwd < e.flops_bwd_dense);
    CHECK(e.dev_acc >= 0.0);
  }
  check_same_metrics(a, train(c, nullptr));
}

TEST_CASE("mnist without data is a configuration error") {
  CHECK_THROWS_AS(train(small_config(), nullptr), ConfigError);
}

}  // TEST_SUITE
