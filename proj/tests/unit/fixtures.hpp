#pragma once

// Small in-memory stand-ins for the MNIST splits: 28x28 images whose label
// decides which horizontal band is bright, plus uniform noise.

#include <cstddef>

#include "meprop/dataio.hpp"
#include "meprop/rng.hpp"

namespace fixture {

inline meprop::Dataset banded_digits(std::size_t n, std::uint64_t seed, meprop::Split split) {
  meprop::Dataset d;
  d.image_rows = 28;
  d.image_cols = 28;
  d.split = split;
  d.pixels.resize(n * 784);
  d.labels.resize(n);
  meprop::Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::uint8_t>(i % 10);
    d.labels[i] = label;
    float* px = d.pixels.data() + i * 784;
    for (std::size_t p = 0; p < 784; ++p) {
      const int row = static_cast<int>(p / 28);
      const bool band = row >= 2 + label * 2 && row < 4 + label * 2;
      const double noise = rng.uniform(0, 0.3);
      px[p] = static_cast<float>(band ? 0.7 + noise : (rng.uniform() < 0.8 ? 0.0 : noise));
    }
  }
  return d;
}

inline meprop::MnistSplits banded_splits(std::size_t train, std::size_t dev, std::size_t test) {
  return {banded_digits(train, 1, meprop::Split::Train), banded_digits(dev, 2, meprop::Split::Dev),
          banded_digits(test, 3, meprop::Split::Test)};
}

}  // namespace fixture
