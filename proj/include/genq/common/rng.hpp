// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace genq {

/// SplitMix64 finalizer; the mixing function behind the counter-based generator.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based, splittable random stream.
///
/// Every draw is a pure function of (key, counter). `split` derives an
/// independent child stream from a tag, so that each consumer (layer init,
/// batch shuffling, image jitter, ...) owns its own stream and no global
/// generator state exists anywhere in the toolkit.
class Rng {
 public:
  explicit constexpr Rng(std::uint64_t seed) noexcept : key_(mix64(seed ^ 0x6a09e667f3bcc908ULL)) {}

  [[nodiscard]] constexpr Rng split(std::uint64_t tag) const noexcept {
    Rng child(0);
    child.key_ = mix64(key_ ^ mix64(tag + 0x3c6ef372fe94f82bULL));
    return child;
  }

  [[nodiscard]] Rng split(std::string_view tag) const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : tag) {
      h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
    }
    return split(h);
  }

  constexpr std::uint64_t next_u64() noexcept { return mix64(key_ ^ mix64(counter_++)); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound); unbiased (rejection sampling).
  std::uint64_t uniform_int(std::uint64_t bound) noexcept {
    if (bound <= 1) {
      return 0;
    }
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
    std::uint64_t x = next_u64();
    while (x >= limit) {
      x = next_u64();
    }
    return x % bound;
  }

  /// Standard normal via Box-Muller (one draw per call, no cached state).
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) {
      u1 = uniform();
    }
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  [[nodiscard]] constexpr std::uint64_t key() const noexcept { return key_; }
  [[nodiscard]] constexpr std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace genq
