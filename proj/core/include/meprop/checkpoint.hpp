#pragma once

// Binary model checkpoints: MLP shape, parameter tensors and optimizer state.
// All integers and floats are little-endian; scalars keep the precision the
// model was trained in.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "meprop/nn.hpp"
#include "meprop/optim.hpp"

namespace meprop {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorInfo {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

/// Header-level view of a checkpoint file, readable at either precision.
struct CheckpointInfo {
  std::uint32_t version = 0;
  std::size_t scalar_bytes = 0;  ///< 4 or 8
  MlpSpec spec;
  std::vector<TensorInfo> tensors;
  std::optional<OptimizerConfig> optimizer;
  std::uint64_t optimizer_steps = 0;
  std::size_t optimizer_state_tensors = 0;
};

template <typename T>
struct Checkpoint {
  std::unique_ptr<Mlp<T>> model;
  std::optional<OptimizerConfig> optimizer;
  std::uint64_t optimizer_steps = 0;
  std::vector<std::vector<T>> optimizer_state;

  /// Copies the saved accumulators into `opt`. Throws DataError when the
  /// optimizer kind or tensor shapes differ.
  void restore(Optimizer<T>& opt) const;
};

/// Writes `model` (and `optimizer` state when given). Throws DataError on I/O failure.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Mlp<T>& model,
                     Optimizer<T>* optimizer = nullptr);

/// Throws DataError on bad magic, version, precision mismatch or truncation.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

CheckpointInfo inspect_checkpoint(const std::filesystem::path& path);

/// Human-readable multi-line description.
std::string describe(const CheckpointInfo& info);

}  // namespace meprop
