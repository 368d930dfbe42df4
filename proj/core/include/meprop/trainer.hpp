#pragma once

// Training loops, evaluation, dev-based iteration selection and reporting.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "meprop/autograd.hpp"
#include "meprop/config.hpp"
#include "meprop/dataio.hpp"
#include "meprop/nn.hpp"
#include "meprop/optim.hpp"

namespace meprop {

/// Metrics for one iteration (one pass over the training set).
struct EpochRecord {
  std::size_t iteration = 0;  ///< 1-based
  double dev_acc = 0;
  double test_acc = 0;
  double train_loss = 0;        ///< mean per-example loss over the epoch
  double fp_time = 0;           ///< seconds in forward passes (incl. loss)
  double linear_bp_time = 0;    ///< seconds in matmul backward (incl. top-k)
  double overall_bp_time = 0;   ///< seconds in the whole backward pass
  std::uint64_t flops_fwd = 0;  ///< forward multiply-adds
  std::uint64_t flops_bwd = 0;  ///< linear-backward multiply-adds
  std::uint64_t flops_bwd_dense = 0;  ///< what a dense backward would have counted
  std::uint64_t selections = 0;       ///< top-k comparisons

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct RunReport {
  std::vector<EpochRecord> epochs;
  std::size_t chosen_iteration = 0;  ///< argmax dev_acc, first on ties; 0 if no epochs
  double final_test_acc = 0;         ///< test_acc at chosen_iteration
  bool diverged = false;
  std::string error;

  /// Recomputes chosen_iteration / final_test_acc from `epochs`.
  void choose();

  const EpochRecord* chosen() const;
  double total_linear_bp_time() const;
  std::uint64_t total_flops_bwd() const;
  std::uint64_t total_flops_bwd_dense() const;
};

/// Called after every epoch with the record just completed.
using EpochCallback = std::function<void(const EpochRecord&)>;

/// argmax(logits) vs label over the whole dataset. Throws ConfigError if empty.
template <typename T>
double evaluate(const Mlp<T>& model, const Dataset& data);

/// Per-example tape training (or the unified batched path when
/// config.unified is set) for the MNIST task.
template <typename T>
class MlpTrainer {
 public:
  MlpTrainer(const TrainConfig& config, const MnistSplits& data);
  ~MlpTrainer();

  RunReport run(const EpochCallback& on_epoch = {});

  Mlp<T>& model() { return *model_; }
  Optimizer<T>& optimizer() { return *optimizer_; }

 private:
  EpochRecord run_epoch_per_example(std::size_t iteration);
  EpochRecord run_epoch_unified(std::size_t iteration);

  TrainConfig config_;
  const MnistSplits* data_;
  std::unique_ptr<Mlp<T>> model_;
  std::unique_ptr<Optimizer<T>> optimizer_;
  GradientStore<T> grads_;
  Rng order_rng_;
  Rng dropout_rng_;
  Rng selection_rng_;
  std::vector<std::size_t> order_;
  bool diverged_ = false;
};

/// LSTM parity classification on synthetic sequences.
template <typename T>
class ParityTrainer {
 public:
  explicit ParityTrainer(const TrainConfig& config);
  RunReport run(const EpochCallback& on_epoch = {});
  LstmClassifier<T>& model() { return *model_; }

 private:
  double accuracy(const SequenceDataset& data) const;

  TrainConfig config_;
  SequenceDataset train_;
  SequenceDataset dev_;
  SequenceDataset test_;
  std::unique_ptr<LstmClassifier<T>> model_;
  std::unique_ptr<Optimizer<T>> optimizer_;
};

/// Runs one configuration at its precision. MNIST data is required for the
/// mnist task and ignored otherwise.
RunReport train(const TrainConfig& config, const MnistSplits* data,
                const EpochCallback& on_epoch = {});

/// Analytic linear-backward multiply-adds of one dense example: the first
/// layer forms dW only, later layers form dW and dx.
std::uint64_t dense_backward_flops_per_example(const MlpSpec& spec);

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepParameter { K, Hidden, Layers, Policy };

std::string_view to_string(SweepParameter p);
SweepParameter parse_sweep_parameter(std::string_view text);

/// Applies one sweep value to a copy of `base`.
TrainConfig apply_sweep_value(const TrainConfig& base, SweepParameter p, std::string_view value);

struct SweepEntry {
  std::string value;
  TrainConfig config;
  RunReport report;
};

using SweepCallback = std::function<void(const SweepEntry&)>;

/// One training per value with the base seed. A failing run records its error
/// and the sweep continues.
std::vector<SweepEntry> sweep(const TrainConfig& base, SweepParameter p,
                              const std::vector<std::string>& values, const MnistSplits* data,
                              const SweepCallback& on_run = {});

// ---------------------------------------------------------------------------
// Report files

/// Header plus one row per epoch.
void write_csv(std::ostream& out, const RunReport& report);
/// Combined CSV: a leading column named after the swept parameter, then the
/// per-epoch fields.
void write_sweep_csv(std::ostream& out, SweepParameter p, const std::vector<SweepEntry>& entries);
/// key: value lines. `dense_baseline` enables the wall-clock speedup entry.
void write_summary(std::ostream& out, const TrainConfig& config, const RunReport& report,
                   const RunReport* dense_baseline = nullptr);

}  // namespace meprop
