#pragma once

// MNIST IDX ingestion, the file-order dev split, and seeded synthetic data.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "meprop/linalg.hpp"

namespace meprop {

enum class Split { Train, Dev, Test };

std::string_view to_string(Split split);

/// Images scaled to [0, 1] (raw byte / 255), labels in 0..9.
struct Dataset {
  std::size_t image_rows = 0;
  std::size_t image_cols = 0;
  std::vector<float> pixels;  ///< size() x features(), row-major
  std::vector<std::uint8_t> labels;
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  std::size_t features() const { return image_rows * image_cols; }
  std::span<const float> image(std::size_t i) const {
    return {pixels.data() + i * features(), features()};
  }

  /// FNV-1a over dimensions, pixel bits and labels.
  std::uint64_t digest() const;

  /// Examples [begin, end) as a new dataset with the same split tag.
  Dataset slice(std::size_t begin, std::size_t end) const;
};

/// Parses an IDX image/label file pair. Files ending in ".gz" are inflated.
/// Throws DataError naming the offending file on bad magic, truncation or a
/// count mismatch between the two files.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

/// Writes raw IDX files (uncompressed). Used for fixtures and exports.
void write_idx_images(const std::filesystem::path& path, std::size_t count, std::size_t rows,
                      std::size_t cols, std::span<const std::uint8_t> pixels);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

inline constexpr std::size_t kDevSize = 5000;

/// First `dev_size` examples in file order become dev, the rest train.
/// Returns {train, dev}.
std::pair<Dataset, Dataset> split_dev(const Dataset& train, std::size_t dev_size = kDevSize);

struct MnistSplits {
  Dataset train;
  Dataset dev;
  Dataset test;
};

/// Loads train/t10k files from `dir` (plain or .gz names) and splits dev off train.
MnistSplits load_mnist(const std::filesystem::path& dir);

/// Finds the MNIST directory: explicit argument, else $MEPROP_DATA_DIR. Empty if neither.
std::filesystem::path resolve_data_dir(const std::filesystem::path& explicit_dir);

// ---------------------------------------------------------------------------
// Synthetic data

struct SequenceDataset {
  std::size_t vocab = 0;
  std::vector<std::vector<std::uint8_t>> sequences;
  std::vector<std::uint8_t> labels;  ///< parity of the token sum

  std::size_t size() const { return labels.size(); }
  std::uint64_t digest() const;
};

/// `n` sequences of `len` uniform tokens in [0, vocab); label = (sum of tokens) mod 2.
SequenceDataset synth_sequences(std::size_t n, std::size_t len, std::uint64_t seed,
                                std::size_t vocab = 4);

/// Operands for the backward-matmul benchmark: output gradient (b x n),
/// layer input (b x m) and weights (n x m), all uniform in [-1, 1).
template <typename T>
struct MatmulProblem {
  Matrix<T> grad_out;
  Matrix<T> input;
  Matrix<T> weight;
};

template <typename T>
MatmulProblem<T> synth_matmul(std::size_t b, std::size_t n, std::size_t m, std::uint64_t seed);

}  // namespace meprop
