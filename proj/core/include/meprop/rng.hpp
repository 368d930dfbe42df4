#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace meprop {

/// SplitMix64 generator. Small, seedable and splittable so every stream in an
/// experiment derives from one root seed. Sequences are identical on every
/// platform, unlike the std:: distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 1) : state_(seed) {}

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound);

  /// Independent child stream; does not advance this generator.
  [[nodiscard]] Rng split(std::uint64_t stream) const;

  std::uint64_t state() const { return state_; }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace meprop
