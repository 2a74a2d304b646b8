// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace umv2 {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Counter-based random stream. The draw at position `counter` depends only on
/// (seed, stream, counter), so a stream can be reproduced or forked freely.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t counter = 0) noexcept
      : seed_(seed), stream_(stream), counter_(counter),
        key_(splitmix64(seed) ^ splitmix64(stream * 0xD1342543DE82EF95ULL + 0x2545F4914F6CDD1DULL)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  /// Independent stream sharing this seed.
  RngStream fork(std::uint64_t stream) const noexcept { return RngStream(seed_, stream); }

  std::uint64_t next_u64() noexcept {
    return splitmix64(key_ + 0x9E3779B97F4A7C15ULL * (counter_++));
  }

  /// Uniform in the open interval (0, 1).
  double uniform() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; consumes two counters per draw.
  double normal() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  template <typename T>
  void fill_normal(std::span<T> out, double mean, double stddev) noexcept {
    for (T& v : out) v = static_cast<T>(normal(mean, stddev));
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_;
  std::uint64_t key_;
};

}  // namespace umv2
