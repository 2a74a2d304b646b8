// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "umv2/errors.hpp"

namespace umv2 {

template <typename T>
struct TopM {
  std::vector<std::uint32_t> indices;  // descending score, lower index first on ties
  std::vector<T> values;
};

/// Selects the m largest scores. Non-selected entries are masked out: callers
/// only ever see the selected (index, value) pairs, so they contribute nothing.
/// `scratch` is reused across calls to avoid reallocation in hot loops.
template <typename T>
void top_m_into(std::span<const T> scores, std::size_t m, std::vector<std::uint32_t>& scratch,
                TopM<T>& out) {
  const std::size_t n = scores.size();
  if (m < 1 || m > n) {
    throw ConfigError("top_m: m = " + std::to_string(m) + " outside [1, " + std::to_string(n) +
                      "]");
  }
  for (T s : scores) {
    if (!std::isfinite(s)) throw NumericError("top_m: non-finite score");
  }
  auto better = [&](std::uint32_t a, std::uint32_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  if (4 * m <= n) {
    // One pass keeping the m best sorted; later indices lose ties, so a
    // candidate only enters when strictly above the current m-th score.
    scratch.resize(m);
    std::size_t count = 0;
    for (std::uint32_t i = 0; i < n; ++i) {
      const T si = scores[i];
      if (count == m) {
        if (!(si > scores[scratch[m - 1]])) continue;
        --count;
      }
      std::size_t pos = count;
      for (; pos > 0 && si > scores[scratch[pos - 1]]; --pos) scratch[pos] = scratch[pos - 1];
      scratch[pos] = i;
      ++count;
    }
    out.indices.assign(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(m));
  } else {
    scratch.resize(n);
    std::iota(scratch.begin(), scratch.end(), std::uint32_t{0});
    if (m < n) {
      std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(m) - 1,
                       scratch.end(), better);
    }
    std::sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(m), better);
    out.indices.assign(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(m));
  }
  out.values.resize(m);
  for (std::size_t i = 0; i < m; ++i) out.values[i] = scores[out.indices[i]];
}

template <typename T>
TopM<T> top_m(std::span<const T> scores, std::size_t m) {
  std::vector<std::uint32_t> scratch;
  TopM<T> out;
  top_m_into(scores, m, scratch, out);
  return out;
}

template <typename T>
TopM<T> top_m(const std::vector<T>& scores, std::size_t m) {
  return top_m(std::span<const T>(scores), m);
}

}  // namespace umv2
