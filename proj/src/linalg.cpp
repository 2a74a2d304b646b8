// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include <Eigen/Core>

#include "umv2/matrix.hpp"

namespace umv2 {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <typename T>
using Map = Eigen::Map<RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <typename T>
ConstMap<T> as_eigen(ConstMatrixView<T> v) {
  return ConstMap<T>(v.data, static_cast<Eigen::Index>(v.rows), static_cast<Eigen::Index>(v.cols),
                     Eigen::OuterStride<>(static_cast<Eigen::Index>(v.stride)));
}

template <typename T>
Map<T> as_eigen(MatrixView<T> v) {
  return Map<T>(v.data, static_cast<Eigen::Index>(v.rows), static_cast<Eigen::Index>(v.cols),
                Eigen::OuterStride<>(static_cast<Eigen::Index>(v.stride)));
}

template <typename T, typename A, typename B>
void assign(Map<T>& c, const A& a, const B& b, T alpha, T beta) {
  if (beta == T{0}) {
    c.noalias() = alpha * (a * b);
  } else {
    if (beta != T{1}) c *= beta;
    c.noalias() += alpha * (a * b);
  }
}

}  // namespace

template <typename T>
void gemm(ConstMatrixView<T> a, Trans ta, ConstMatrixView<T> b, Trans tb, MatrixView<T> c, T alpha,
          T beta) {
  const std::size_t m = ta == Trans::kYes ? a.cols : a.rows;
  const std::size_t k = ta == Trans::kYes ? a.rows : a.cols;
  const std::size_t kb = tb == Trans::kYes ? b.cols : b.rows;
  const std::size_t n = tb == Trans::kYes ? b.rows : b.cols;
  if (k != kb || c.rows != m || c.cols != n) {
    throw ConfigError("gemm: shape mismatch (" + std::to_string(m) + "x" + std::to_string(k) +
                      ") * (" + std::to_string(kb) + "x" + std::to_string(n) + ") -> (" +
                      std::to_string(c.rows) + "x" + std::to_string(c.cols) + ")");
  }
  if (m == 0 || n == 0) return;
  auto cm = as_eigen(c);
  if (k == 0) {
    if (beta == T{0}) cm.setZero(); else cm *= beta;
    return;
  }
  const auto am = as_eigen(a);
  const auto bm = as_eigen(b);
  if (ta == Trans::kNo && tb == Trans::kNo) {
    assign(cm, am, bm, alpha, beta);
  } else if (ta == Trans::kNo && tb == Trans::kYes) {
    assign(cm, am, bm.transpose(), alpha, beta);
  } else if (ta == Trans::kYes && tb == Trans::kNo) {
    assign(cm, am.transpose(), bm, alpha, beta);
  } else {
    assign(cm, am.transpose(), bm.transpose(), alpha, beta);
  }
}

template <typename T>
void gemv(ConstMatrixView<T> a, std::span<const T> x, std::span<T> y, bool accumulate) {
  if (x.size() != a.cols || y.size() != a.rows) throw ConfigError("gemv: shape mismatch");
  for (std::size_t i = 0; i < a.rows; ++i) {
    const T* row = a.data + i * a.stride;
    T s = T{0};
    for (std::size_t j = 0; j < a.cols; ++j) s += row[j] * x[j];
    y[i] = accumulate ? y[i] + s : s;
  }
}

template void gemm<float>(ConstMatrixView<float>, Trans, ConstMatrixView<float>, Trans,
                          MatrixView<float>, float, float);
template void gemm<double>(ConstMatrixView<double>, Trans, ConstMatrixView<double>, Trans,
                           MatrixView<double>, double, double);
template void gemv<float>(ConstMatrixView<float>, std::span<const float>, std::span<float>, bool);
template void gemv<double>(ConstMatrixView<double>, std::span<const double>, std::span<double>,
                           bool);

}  // namespace umv2
