#pragma once

// Experiment configuration and its flat key=value text form. Keys mirror the
// command-line flags one to one (e.g. `k-output=20` <-> `--k-output 20`).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "meprop/autograd.hpp"
#include "meprop/nn.hpp"
#include "meprop/optim.hpp"
#include "meprop/sparsify.hpp"

namespace meprop {

enum class Task { Mnist, Parity };
enum class Precision { F32, F64 };

std::string_view to_string(Task task);
Task parse_task(std::string_view text);
std::string_view to_string(Precision p);
Precision parse_precision(std::string_view text);

struct TrainConfig {
  Task task = Task::Mnist;

  // Model
  std::size_t hidden = 500;
  std::size_t layers = 2;
  Activation activation = Activation::Tanh;
  double dropout = 0.0;
  bool bias = true;

  // Selection
  SelectionMode policy = SelectionMode::Dense;
  std::size_t k = 20;
  std::optional<std::size_t> k_output;  ///< defaults to k
  bool unified = false;
  UnifiedScore unified_score = UnifiedScore::MeanAbs;

  // Optimization
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::optional<double> lr;  ///< defaults per optimizer
  bool lazy = false;
  std::size_t batch = 10;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
  Precision precision = Precision::F32;

  /// Use only the first N training examples (0 = all).
  std::size_t train_limit = 0;

  // Parity task (LSTM)
  std::size_t seq_len = 8;
  std::size_t seq_vocab = 4;
  std::size_t seq_train = 2000;
  std::size_t seq_eval = 500;

  std::filesystem::path data_dir;
  std::filesystem::path out_dir = "runs";

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  std::size_t effective_k_output() const { return k_output.value_or(k); }
  SelectionPolicy hidden_policy() const;
  SelectionPolicy output_policy() const;
  OptimizerConfig optimizer_config() const;
  /// MNIST model shape: 784 -> hidden x layers -> 10.
  MlpSpec mlp_spec() const;
};

/// Every key with its current value, in a stable order. Optional fields are
/// resolved (k-output, lr) so the output re-runs identically.
std::vector<std::pair<std::string, std::string>> to_key_values(const TrainConfig& config);
std::string format_config(const TrainConfig& config);

/// Known keys, in the order emitted by to_key_values.
const std::vector<std::string>& config_keys();

/// Sets one key. Throws ConfigError for unknown keys or unparsable values.
void apply_key_value(TrainConfig& config, std::string_view key, std::string_view value);

/// Parses `key=value` lines; '#' starts a comment, blank lines are ignored.
TrainConfig parse_config_text(std::string_view text, TrainConfig base = {});
TrainConfig load_config_file(const std::filesystem::path& path, TrainConfig base = {});

}  // namespace meprop
