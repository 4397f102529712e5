#pragma once

// Portable counter-based random streams.
//
// A stream is a (seed, counter) pair. The n-th 64-bit word is
// splitmix64_mix(seed + (n + 1) * 0x9E3779B97F4A7C15), i.e. SplitMix64 where
// the state is a pure function of the counter. Uniforms take the top 53 bits;
// normals use the Box-Muller transform (both outputs of each pair are used).
// Child streams are derived with split(key): seed' = mix(seed ^ mix(key + C)).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

namespace cncv {

inline constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class RngStream {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  explicit RngStream(std::uint64_t seed = 0, std::uint64_t counter = 0) noexcept
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return splitmix64_mix(seed_ + counter_ * kGolden);
  }

  /// Uniform on the open interval (0, 1).
  double uniform() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
  }

  void fill_normal(std::span<double> out) noexcept {
    for (double& v : out) v = normal();
  }

  /// Unbiased integer in [0, n) by rejection.
  std::uint64_t uniform_index(std::uint64_t n) noexcept {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  /// Independent child stream; the parent is not advanced.
  RngStream split(std::uint64_t key) const noexcept {
    return RngStream(splitmix64_mix(seed_ ^ splitmix64_mix(key + kGolden)));
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Fisher-Yates shuffle driven by a RngStream (std::shuffle is not portable).
template <class T>
void shuffle(std::span<T> items, RngStream& rng) noexcept {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_index(i));
    std::swap(items[i - 1], items[j]);
  }
}

inline std::vector<std::size_t> random_permutation(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  shuffle(std::span<std::size_t>(perm), rng);
  return perm;
}

}  // namespace cncv
