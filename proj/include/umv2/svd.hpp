// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "umv2/matrix.hpp"

namespace umv2 {

/// C = U diag(sigma) T^T for a small square C.
struct SvdResult {
  std::vector<double> singular_values;  // descending, nonnegative
  Matrix<double> left;                  // U, columns are left singular vectors
  Matrix<double> right;                 // T, columns are right singular vectors
};

inline constexpr int kJacobiSweeps = 30;
inline constexpr std::size_t kMaxSvdRank = 8;

/// One-sided cyclic Jacobi SVD of an r x r matrix (r <= 8). Deterministic:
/// fixed (p, q) sweep order, at most kJacobiSweeps sweeps, and each left
/// vector's largest-magnitude entry is made positive (first such entry on ties).
SvdResult svd_small(const Matrix<double>& core);

template <typename T>
SvdResult svd_small(const Matrix<T>& core) {
  return svd_small(cast<double>(core));
}

/// U diag(sigma) T^T.
Matrix<double> reconstruct(const SvdResult& svd);

/// Reverse-mode SVD: given dL/dsigma and (optionally) dL/dU, dL/dT, returns
/// dL/dC. Valid for square C with distinct nonzero singular values.
Matrix<double> svd_backward(const SvdResult& svd, std::span<const double> d_sigma,
                            const Matrix<double>* d_left, const Matrix<double>* d_right);

}  // namespace umv2
