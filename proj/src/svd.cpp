// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace umv2 {

namespace {

double col_dot(const Matrix<double>& m, std::size_t a, std::size_t b) {
  double s = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) s += m(i, a) * m(i, b);
  return s;
}

// Fills columns of `u` flagged in `missing` with unit vectors orthogonal to
// every other column, drawing candidates from the standard basis.
void complete_basis(Matrix<double>& u, const std::vector<bool>& missing) {
  const std::size_t r = u.rows();
  for (std::size_t j = 0; j < r; ++j) {
    if (!missing[j]) continue;
    std::vector<double> best;
    double best_norm = -1.0;
    for (std::size_t e = 0; e < r; ++e) {
      std::vector<double> v(r, 0.0);
      v[e] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k = 0; k < r; ++k) {
          if (k == j || (missing[k] && k > j)) continue;
          double d = 0.0;
          for (std::size_t i = 0; i < r; ++i) d += v[i] * u(i, k);
          for (std::size_t i = 0; i < r; ++i) v[i] -= d * u(i, k);
        }
      }
      double nrm = 0.0;
      for (double x : v) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm > best_norm + 1e-12) {
        best_norm = nrm;
        best = v;
      }
    }
    for (std::size_t i = 0; i < r; ++i) u(i, j) = best[i] / best_norm;
  }
}

}  // namespace

SvdResult svd_small(const Matrix<double>& core) {
  const std::size_t r = core.rows();
  if (r == 0 || core.cols() != r) throw ConfigError("svd_small: core must be square and non-empty");
  if (r > kMaxSvdRank) throw ConfigError("svd_small: rank above " + std::to_string(kMaxSvdRank));
  if (!core.all_finite()) throw NumericError("svd_small: non-finite entry in core");

  Matrix<double> w = core;
  Matrix<double> v(r, r);
  for (std::size_t i = 0; i < r; ++i) v(i, i) = 1.0;

  for (int sweep = 0; sweep < kJacobiSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < r; ++p) {
      for (std::size_t q = p + 1; q < r; ++q) {
        const double alpha = col_dot(w, p, p);
        const double beta = col_dot(w, q, q);
        const double gamma = col_dot(w, p, q);
        if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < r; ++i) {
          const double wp = w(i, p);
          const double wq = w(i, q);
          w(i, p) = c * wp - s * wq;
          w(i, q) = s * wp + c * wq;
          const double vp = v(i, p);
          const double vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(r);
  for (std::size_t j = 0; j < r; ++j) sigma[j] = std::sqrt(col_dot(w, j, j));
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  SvdResult out;
  out.singular_values.resize(r);
  out.left = Matrix<double>(r, r);
  out.right = Matrix<double>(r, r);
  const double smax = sigma[order[0]];
  std::vector<bool> missing(r, false);
  for (std::size_t j = 0; j < r; ++j) {
    const std::size_t src = order[j];
    out.singular_values[j] = sigma[src];
    for (std::size_t i = 0; i < r; ++i) out.right(i, j) = v(i, src);
    if (sigma[src] <= 1e-13 * smax || sigma[src] == 0.0) {
      missing[j] = true;
    } else {
      for (std::size_t i = 0; i < r; ++i) out.left(i, j) = w(i, src) / sigma[src];
    }
  }
  if (std::any_of(missing.begin(), missing.end(), [](bool b) { return b; })) {
    complete_basis(out.left, missing);
  }

  for (std::size_t j = 0; j < r; ++j) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < r; ++i) {
      if (std::abs(out.left(i, j)) > std::abs(out.left(arg, j))) arg = i;
    }
    if (out.left(arg, j) < 0.0) {
      for (std::size_t i = 0; i < r; ++i) {
        out.left(i, j) = -out.left(i, j);
        out.right(i, j) = -out.right(i, j);
      }
    }
  }
  return out;
}

Matrix<double> reconstruct(const SvdResult& svd) {
  const std::size_t r = svd.singular_values.size();
  Matrix<double> c(r, r);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < r; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < r; ++k) s += svd.left(i, k) * svd.singular_values[k] * svd.right(j, k);
      c(i, j) = s;
    }
  }
  return c;
}

Matrix<double> svd_backward(const SvdResult& svd, std::span<const double> d_sigma,
                            const Matrix<double>* d_left, const Matrix<double>* d_right) {
  const std::size_t r = svd.singular_values.size();
  const auto& s = svd.singular_values;
  const Matrix<double>& u = svd.left;
  const Matrix<double>& t = svd.right;

  // inner = diag(dS) + (F o (U^T dU - dU^T U)) S + S (F o (T^T dT - dT^T T))
  Matrix<double> inner(r, r);
  for (std::size_t i = 0; i < r && i < d_sigma.size(); ++i) inner(i, i) = d_sigma[i];
  auto skew_term = [&](const Matrix<double>& base, const Matrix<double>& grad, Matrix<double>& out) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < r; ++j) {
        if (i == j) continue;
        double a = 0.0, b = 0.0;
        for (std::size_t k = 0; k < r; ++k) {
          a += base(k, i) * grad(k, j);
          b += grad(k, i) * base(k, j);
        }
        const double denom = s[j] * s[j] - s[i] * s[i];
        if (denom == 0.0) throw NumericError("svd_backward: repeated singular values");
        out(i, j) = (a - b) / denom;
      }
    }
  };
  if (d_left != nullptr) {
    Matrix<double> j_mat(r, r);
    skew_term(u, *d_left, j_mat);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < r; ++j) inner(i, j) += j_mat(i, j) * s[j];
  }
  if (d_right != nullptr) {
    Matrix<double> k_mat(r, r);
    skew_term(t, *d_right, k_mat);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < r; ++j) inner(i, j) += s[i] * k_mat(i, j);
  }

  Matrix<double> tmp(r, r);
  gemm<double>(u, Trans::kNo, inner, Trans::kNo, tmp);
  Matrix<double> out(r, r);
  gemm<double>(tmp, Trans::kNo, t, Trans::kYes, out);
  return out;
}

}  // namespace umv2
