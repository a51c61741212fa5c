// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

namespace nncheck {

/// SplitMix64 used as a counter-based generator: the n-th draw is
/// mix(seed + n * gamma), so the whole stream is a function of the seed and
/// the draw counter. All transforms below are written out explicitly rather
/// than going through <random> distributions, whose output is not specified
/// bit-for-bit across standard library implementations.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed = 0) noexcept : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next() noexcept {
    ++counter_;
    return mix(seed_ + counter_ * kGamma);
  }

  /// Uniform double in the open interval (0, 1).
  double uniform() noexcept {
    return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Box-Muller transform; consumes exactly two draws per call.
  double gaussian(double mean = 0.0, double stddev = 1.0) noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Consumes one draw.
  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Integer in [0, n) by multiply-shift; consumes one draw.
  std::size_t below(std::size_t n) noexcept {
    __extension__ using u128 = unsigned __int128;
    const auto wide = static_cast<u128>(next()) * static_cast<std::uint64_t>(n);
    return static_cast<std::size_t>(wide >> 64);
  }

  /// Fisher-Yates, back to front; consumes size-1 draws.
  template <typename T>
  void shuffle(std::vector<T>& items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  static std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace nncheck
