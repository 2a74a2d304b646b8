// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

#include "umv2/errors.hpp"

namespace umv2 {

template <typename T>
inline T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

template <typename T>
inline T silu(T x) {
  return x * sigmoid(x);
}

/// d silu / dx = s(x) * (1 + x * (1 - s(x))).
template <typename T>
inline T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T{1} + x * (T{1} - s));
}

/// SwiGLU inner activation: lin * silu(gate), elementwise.
template <typename T>
void swiglu_inner(std::span<const T> gate, std::span<const T> lin, std::span<T> out) {
  if (gate.size() != lin.size() || out.size() != lin.size()) {
    throw ConfigError("swiglu_inner: length mismatch");
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lin[i] * silu(gate[i]);
}

/// In-place softmax with max subtraction.
template <typename T>
void softmax(std::span<T> v) {
  if (v.empty()) return;
  const T mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (T& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  const T inv = static_cast<T>(1.0 / sum);
  for (T& x : v) x *= inv;
}

/// Given y = softmax(x) and dy, writes dx (may alias dy).
template <typename T>
void softmax_backward(std::span<const T> y, std::span<const T> dy, std::span<T> dx) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(y[i]) * dy[i];
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] * (dy[i] - static_cast<T>(s));
}

inline constexpr double kRmsEps = 1e-6;

/// y = gain * x / rms(x); returns 1 / rms(x).
template <typename T>
T rms_normalize(std::span<const T> x, std::span<T> y, T gain) {
  double ss = 0.0;
  for (T v : x) ss += static_cast<double>(v) * v;
  const T inv = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(x.size()) + kRmsEps));
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gain * x[i] * inv;
  return inv;
}

/// Backward of y = gain * x * inv_rms with a scalar gain held fixed.
/// Accumulates into dx.
template <typename T>
void rms_normalize_backward(std::span<const T> x, T inv_rms, T gain, std::span<const T> dy,
                            std::span<T> dx) {
  const double n = static_cast<double>(x.size());
  double proj = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) proj += static_cast<double>(dy[i]) * x[i];
  const T c = static_cast<T>(proj * inv_rms * inv_rms / n);
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] += gain * inv_rms * (dy[i] - x[i] * c);
}

}  // namespace umv2
