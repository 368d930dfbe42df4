#include "meprop/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "meprop/error.hpp"
#include "meprop/unified.hpp"

namespace meprop {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point since) {
  return std::chrono::duration<double>(Clock::now() - since).count();
}

// Independent RNG streams derived from the run seed.
enum Stream : std::uint64_t { kInit = 1, kOrder = 2, kDropout = 3, kSelection = 4, kData = 5 };

template <typename T>
std::span<const T> as_scalar(std::span<const float> x, std::vector<T>& buffer) {
  if constexpr (std::is_same_v<T, float>) {
    return x;
  } else {
    buffer.assign(x.begin(), x.end());
    return buffer;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// RunReport

void RunReport::choose() {
  chosen_iteration = 0;
  final_test_acc = 0;
  double best = -1;
  for (const auto& e : epochs) {
    if (e.dev_acc > best) {
      best = e.dev_acc;
      chosen_iteration = e.iteration;
      final_test_acc = e.test_acc;
    }
  }
}

const EpochRecord* RunReport::chosen() const {
  for (const auto& e : epochs) {
    if (e.iteration == chosen_iteration) return &e;
  }
  return nullptr;
}

double RunReport::total_linear_bp_time() const {
  double total = 0;
  for (const auto& e : epochs) total += e.linear_bp_time;
  return total;
}

std::uint64_t RunReport::total_flops_bwd() const {
  std::uint64_t total = 0;
  for (const auto& e : epochs) total += e.flops_bwd;
  return total;
}

std::uint64_t RunReport::total_flops_bwd_dense() const {
  std::uint64_t total = 0;
  for (const auto& e : epochs) total += e.flops_bwd_dense;
  return total;
}

std::uint64_t dense_backward_flops_per_example(const MlpSpec& spec) {
  std::uint64_t total = 0;
  std::size_t in = spec.input_dim;
  for (std::size_t l = 0; l <= spec.num_hidden_layers; ++l) {
    const std::size_t out = l < spec.num_hidden_layers ? spec.hidden_dim : spec.output_dim;
    total += static_cast<std::uint64_t>(l == 0 ? 1 : 2) * out * in;
    in = out;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Evaluation

template <typename T>
double evaluate(const Mlp<T>& model, const Dataset& data) {
  if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
  std::vector<T> buffer;
  const TransposedWeights<T> wt(model);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (model.classify(as_scalar<T>(data.image(i), buffer), &wt) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// MlpTrainer

template <typename T>
MlpTrainer<T>::MlpTrainer(const TrainConfig& config, const MnistSplits& data)
    : config_(config),
      data_(&data),
      order_rng_(Rng(config.seed).split(kOrder)),
      dropout_rng_(Rng(config.seed).split(kDropout)),
      selection_rng_(Rng(config.seed).split(kSelection)) {
  config_.validate();
  if (config_.task != Task::Mnist) throw ConfigError("MlpTrainer runs the mnist task only");
  if (data.train.size() == 0) throw ConfigError("training set is empty");
  model_ = std::make_unique<Mlp<T>>(config_.mlp_spec(), Rng(config_.seed).split(kInit).next_u64());
  optimizer_ = make_optimizer<T>(config_.optimizer_config(), model_->params());
  grads_ = GradientStore<T>(model_->params());
  std::size_t n = data.train.size();
  if (config_.train_limit > 0) n = std::min(n, config_.train_limit);
  order_.resize(n);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
}

template <typename T>
MlpTrainer<T>::~MlpTrainer() = default;

template <typename T>
EpochRecord MlpTrainer<T>::run_epoch_per_example(std::size_t iteration) {
  EpochRecord rec;
  rec.iteration = iteration;
  const Dataset& train = data_->train;
  Tape<T> tape(model_->params());
  std::vector<T> buffer;
  double loss_sum = 0;
  FlopCounter fwd;
  FlopCounter bwd;
  TransposedWeights<T> wt;

  for (std::size_t start = 0; start < order_.size(); start += config_.batch) {
    const std::size_t end = std::min(order_.size(), start + config_.batch);
    const auto tw = Clock::now();
    wt.refresh(*model_);
    rec.fp_time += elapsed(tw);
    for (std::size_t p = start; p < end; ++p) {
      const std::size_t idx = order_[p];
      tape.clear();
      const auto t0 = Clock::now();
      const NodeId logits =
          model_->forward(tape, as_scalar<T>(train.image(idx), buffer), true, dropout_rng_, &wt);
      const NodeId loss = tape.softmax_cross_entropy(logits, train.labels[idx]);
      rec.fp_time += elapsed(t0);
      fwd += tape.forward_flops();
      const double l = static_cast<double>(tape.value(loss)[0]);
      if (!std::isfinite(l)) {
        diverged_ = true;
        return rec;
      }
      loss_sum += l;

      const auto t1 = Clock::now();
      const BackwardStats stats = tape.backward(loss, grads_, &selection_rng_);
      rec.overall_bp_time += elapsed(t1);
      rec.linear_bp_time += stats.linear_seconds;
      bwd += stats.linear;
    }
    optimizer_->step(model_->params(), grads_, end - start);
    grads_.clear();
  }
  rec.train_loss = loss_sum / static_cast<double>(order_.size());
  rec.flops_fwd = fwd.multiply_adds;
  rec.flops_bwd = bwd.multiply_adds;
  rec.selections = bwd.selections;
  return rec;
}

template <typename T>
EpochRecord MlpTrainer<T>::run_epoch_unified(std::size_t iteration) {
  EpochRecord rec;
  rec.iteration = iteration;
  const Dataset& train = data_->train;
  const std::size_t features = train.features();
  BatchedPass<T> pass(*model_, config_.unified_score);
  Matrix<T> X;
  std::vector<std::uint8_t> labels;
  double loss_sum = 0;
  FlopCounter bwd;

  for (std::size_t start = 0; start < order_.size(); start += config_.batch) {
    const std::size_t end = std::min(order_.size(), start + config_.batch);
    const std::size_t b = end - start;
    if (X.rows() != b) X = Matrix<T>(b, features);
    labels.resize(b);
    for (std::size_t s = 0; s < b; ++s) {
      const std::size_t idx = order_[start + s];
      const auto img = train.image(idx);
      std::copy(img.begin(), img.end(), X.row(s).begin());
      labels[s] = train.labels[idx];
    }
    const auto t0 = Clock::now();
    pass.forward(X, true, dropout_rng_);
    const double l = pass.loss(labels);
    rec.fp_time += elapsed(t0);
    if (!std::isfinite(l)) {
      diverged_ = true;
      return rec;
    }
    loss_sum += l;

    const auto t1 = Clock::now();
    const BackwardStats stats = pass.backward(grads_, &selection_rng_);
    rec.overall_bp_time += elapsed(t1);
    rec.linear_bp_time += stats.linear_seconds;
    bwd += stats.linear;

    optimizer_->step(model_->params(), grads_, b);
    grads_.clear();
  }
  rec.train_loss = loss_sum / static_cast<double>(order_.size());
  rec.flops_fwd = pass.forward_flops().multiply_adds;
  rec.flops_bwd = bwd.multiply_adds;
  rec.selections = bwd.selections;
  return rec;
}

template <typename T>
RunReport MlpTrainer<T>::run(const EpochCallback& on_epoch) {
  RunReport report;
  const std::uint64_t dense_per_example = dense_backward_flops_per_example(model_->spec());
  for (std::size_t it = 1; it <= config_.epochs; ++it) {
    order_rng_.shuffle(std::span<std::size_t>(order_));
    EpochRecord rec = config_.unified ? run_epoch_unified(it) : run_epoch_per_example(it);
    if (diverged_) {
      report.diverged = true;
      report.error = "non-finite training loss in iteration " + std::to_string(it);
      break;
    }
    rec.flops_bwd_dense = dense_per_example * order_.size();
    rec.dev_acc = evaluate(*model_, data_->dev);
    rec.test_acc = evaluate(*model_, data_->test);
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  report.choose();
  return report;
}

// ---------------------------------------------------------------------------
// ParityTrainer

template <typename T>
ParityTrainer<T>::ParityTrainer(const TrainConfig& config) : config_(config) {
  config_.validate();
  const Rng data_rng = Rng(config_.seed).split(kData);
  train_ = synth_sequences(config_.seq_train, config_.seq_len, data_rng.split(0).next_u64(),
                           config_.seq_vocab);
  dev_ = synth_sequences(config_.seq_eval, config_.seq_len, data_rng.split(1).next_u64(),
                         config_.seq_vocab);
  test_ = synth_sequences(config_.seq_eval, config_.seq_len, data_rng.split(2).next_u64(),
                          config_.seq_vocab);
  model_ = std::make_unique<LstmClassifier<T>>(config_.seq_vocab, config_.hidden, 2,
                                               config_.hidden_policy(),
                                               Rng(config_.seed).split(kInit).next_u64());
  optimizer_ = make_optimizer<T>(config_.optimizer_config(), model_->params());
}

template <typename T>
double ParityTrainer<T>::accuracy(const SequenceDataset& data) const {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (model_->classify(data.sequences[i]) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <typename T>
RunReport ParityTrainer<T>::run(const EpochCallback& on_epoch) {
  RunReport report;
  Rng order_rng = Rng(config_.seed).split(kOrder);
  Rng selection_rng = Rng(config_.seed).split(kSelection);
  GradientStore<T> grads(model_->params());
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t it = 1; it <= config_.epochs; ++it) {
    order_rng.shuffle(std::span<std::size_t>(order));
    EpochRecord rec;
    rec.iteration = it;
    double loss_sum = 0;
    FlopCounter fwd;
    FlopCounter bwd;
    std::uint64_t dense_equiv = 0;
    Tape<T> tape(model_->params());
    bool diverged = false;
    for (std::size_t start = 0; start < order.size() && !diverged; start += config_.batch) {
      const std::size_t end = std::min(order.size(), start + config_.batch);
      for (std::size_t p = start; p < end; ++p) {
        const std::size_t idx = order[p];
        tape.clear();
        const auto t0 = Clock::now();
        const NodeId logits = model_->forward(tape, train_.sequences[idx]);
        const NodeId loss = tape.softmax_cross_entropy(logits, train_.labels[idx]);
        rec.fp_time += elapsed(t0);
        fwd += tape.forward_flops();
        const double l = static_cast<double>(tape.value(loss)[0]);
        if (!std::isfinite(l)) {
          diverged = true;
          break;
        }
        loss_sum += l;
        const auto t1 = Clock::now();
        const BackwardStats stats = tape.backward(loss, grads, &selection_rng);
        rec.overall_bp_time += elapsed(t1);
        rec.linear_bp_time += stats.linear_seconds;
        bwd += stats.linear;
        dense_equiv += stats.dense_multiply_adds;
      }
      if (diverged) break;
      optimizer_->step(model_->params(), grads, end - start);
      grads.clear();
    }
    if (diverged) {
      report.diverged = true;
      report.error = "non-finite training loss in iteration " + std::to_string(it);
      break;
    }
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.flops_fwd = fwd.multiply_adds;
    rec.flops_bwd = bwd.multiply_adds;
    rec.flops_bwd_dense = dense_equiv;
    rec.selections = bwd.selections;
    rec.dev_acc = accuracy(dev_);
    rec.test_acc = accuracy(test_);
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  report.choose();
  return report;
}

// ---------------------------------------------------------------------------

RunReport train(const TrainConfig& config, const MnistSplits* data, const EpochCallback& on_epoch) {
  config.validate();
  if (config.task == Task::Parity) {
    if (config.precision == Precision::F64) return ParityTrainer<double>(config).run(on_epoch);
    return ParityTrainer<float>(config).run(on_epoch);
  }
  if (data == nullptr) throw ConfigError("mnist task requires loaded data");
  if (config.precision == Precision::F64) return MlpTrainer<double>(config, *data).run(on_epoch);
  return MlpTrainer<float>(config, *data).run(on_epoch);
}

// ---------------------------------------------------------------------------
// Sweeps

std::string_view to_string(SweepParameter p) {
  switch (p) {
    case SweepParameter::K: return "k";
    case SweepParameter::Hidden: return "hidden";
    case SweepParameter::Layers: return "layers";
    case SweepParameter::Policy: return "policy";
  }
  return "?";
}

SweepParameter parse_sweep_parameter(std::string_view text) {
  if (text == "k") return SweepParameter::K;
  if (text == "hidden") return SweepParameter::Hidden;
  if (text == "layers") return SweepParameter::Layers;
  if (text == "policy") return SweepParameter::Policy;
  throw ConfigError("unknown sweep parameter '" + std::string(text) +
                    "' (expected k|hidden|layers|policy)");
}

TrainConfig apply_sweep_value(const TrainConfig& base, SweepParameter p, std::string_view value) {
  TrainConfig c = base;
  apply_key_value(c, to_string(p), value);
  return c;
}

std::vector<SweepEntry> sweep(const TrainConfig& base, SweepParameter p,
                              const std::vector<std::string>& values, const MnistSplits* data,
                              const SweepCallback& on_run) {
  std::vector<SweepEntry> entries;
  for (const auto& value : values) {
    SweepEntry entry;
    entry.value = value;
    try {
      entry.config = apply_sweep_value(base, p, value);
      entry.report = train(entry.config, data);
    } catch (const std::exception& e) {
      entry.report.error = e.what();
    }
    if (on_run) on_run(entry);
    entries.push_back(std::move(entry));
  }
  return entries;
}

// ---------------------------------------------------------------------------
// Report files

namespace {

constexpr const char* kCsvHeader =
    "iteration,dev_acc,test_acc,train_loss,fp_time,linear_bp_time,overall_bp_time,flops_fwd,"
    "flops_bwd";

void write_row(std::ostream& out, const EpochRecord& e) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.9g,%.6f,%.6f,%.6f,%llu,%llu", e.iteration,
                e.dev_acc, e.test_acc, e.train_loss, e.fp_time, e.linear_bp_time,
                e.overall_bp_time, static_cast<unsigned long long>(e.flops_fwd),
                static_cast<unsigned long long>(e.flops_bwd));
  out << buf;
}

}  // namespace

void write_csv(std::ostream& out, const RunReport& report) {
  out << kCsvHeader << '\n';
  for (const auto& e : report.epochs) {
    write_row(out, e);
    out << '\n';
  }
}

void write_sweep_csv(std::ostream& out, SweepParameter p, const std::vector<SweepEntry>& entries) {
  out << to_string(p) << ',' << kCsvHeader << ",chosen_iteration,final_test_acc,error\n";
  for (const auto& entry : entries) {
    char tail[64];
    std::snprintf(tail, sizeof tail, "%zu,%.6f", entry.report.chosen_iteration,
                  entry.report.final_test_acc);
    std::string err = entry.report.error;
    for (auto& ch : err) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    if (entry.report.epochs.empty()) {
      out << entry.value << ",,,,,,,,,," << tail << ',' << err << '\n';
    }
    for (const auto& e : entry.report.epochs) {
      out << entry.value << ',';
      write_row(out, e);
      out << ',' << tail << ',' << err << '\n';
    }
  }
}

void write_summary(std::ostream& out, const TrainConfig& config, const RunReport& report,
                   const RunReport* dense_baseline) {
  char buf[128];
  out << "task: " << to_string(config.task) << '\n';
  out << "policy: " << to_string(config.policy) << '\n';
  out << "k: " << config.k << '\n';
  out << "unified: " << (config.unified ? "true" : "false") << '\n';
  out << "epochs_run: " << report.epochs.size() << '\n';
  out << "chosen_iteration: " << report.chosen_iteration << '\n';
  std::snprintf(buf, sizeof buf, "%.6f", report.final_test_acc);
  out << "final_test_acc: " << buf << '\n';
  if (const auto* best = report.chosen()) {
    std::snprintf(buf, sizeof buf, "%.6f", best->dev_acc);
    out << "best_dev_acc: " << buf << '\n';
  }
  std::snprintf(buf, sizeof buf, "%.6f", report.total_linear_bp_time());
  out << "linear_bp_time_total: " << buf << '\n';
  if (report.total_flops_bwd() > 0) {
    std::snprintf(buf, sizeof buf, "%.6f",
                  static_cast<double>(report.total_flops_bwd()) /
                      static_cast<double>(report.total_flops_bwd_dense()));
    out << "backprop_flop_ratio: " << buf << '\n';
  }
  if (dense_baseline != nullptr && report.total_linear_bp_time() > 0) {
    std::snprintf(buf, sizeof buf, "%.4f",
                  dense_baseline->total_linear_bp_time() / report.total_linear_bp_time());
    out << "speedup: " << buf << '\n';
  } else {
    out << "speedup: n/a\n";
  }
  out << "diverged: " << (report.diverged ? "true" : "false") << '\n';
  if (!report.error.empty()) out << "error: " << report.error << '\n';
}

template double evaluate<float>(const Mlp<float>&, const Dataset&);
template double evaluate<double>(const Mlp<double>&, const Dataset&);
template class MlpTrainer<float>;
template class MlpTrainer<double>;
template class ParityTrainer<float>;
template class ParityTrainer<double>;

}  // namespace meprop
