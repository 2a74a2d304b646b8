// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "umv2/errors.hpp"

namespace umv2 {

template <typename T>
using Vector = std::vector<T>;

/// Dense row-major matrix. Element (r, c) lives at data()[r * cols() + c].
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ConfigError("Matrix: data length " + std::to_string(data_.size()) +
                        " does not match shape " + std::to_string(rows_) + "x" +
                        std::to_string(cols_));
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }
  void set_zero() { fill(T{0}); }

  void resize(std::size_t rows, std::size_t cols) {
    rows_ = rows;
    cols_ = cols;
    data_.assign(rows * cols, T{0});
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// Non-owning strided view; `stride` is the distance between row starts.
template <typename T>
struct MatrixView {
  T* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t stride = 0;

  MatrixView() = default;
  MatrixView(T* d, std::size_t r, std::size_t c, std::size_t s)
      : data(d), rows(r), cols(c), stride(s) {}
  MatrixView(T* d, std::size_t r, std::size_t c) : MatrixView(d, r, c, c) {}
  // NOLINTNEXTLINE(google-explicit-constructor)
  MatrixView(Matrix<std::remove_const_t<T>>& m)
      : data(m.data()), rows(m.rows()), cols(m.cols()), stride(m.cols()) {}
  // NOLINTNEXTLINE(google-explicit-constructor)
  MatrixView(const Matrix<std::remove_const_t<T>>& m) requires std::is_const_v<T>
      : data(m.data()), rows(m.rows()), cols(m.cols()), stride(m.cols()) {}
  // NOLINTNEXTLINE(google-explicit-constructor)
  operator MatrixView<const T>() const { return {data, rows, cols, stride}; }

  T& operator()(std::size_t r, std::size_t c) const noexcept { return data[r * stride + c]; }

  /// Columns [c0, c0 + n) of every row.
  MatrixView col_block(std::size_t c0, std::size_t n) const {
    return {data + c0, rows, n, stride};
  }
  /// Rows [r0, r0 + n).
  MatrixView row_block(std::size_t r0, std::size_t n) const {
    return {data + r0 * stride, n, cols, stride};
  }
};

template <typename T>
using ConstMatrixView = MatrixView<const T>;

enum class Trans : bool { kNo = false, kYes = true };

/// C = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(ConstMatrixView<T> a, Trans ta, ConstMatrixView<T> b, Trans tb, MatrixView<T> c,
          T alpha = T{1}, T beta = T{0});

/// y[i] = sum_j A(i, j) x[j] (+ y[i] when accumulate).
template <typename T>
void gemv(ConstMatrixView<T> a, std::span<const T> x, std::span<T> y, bool accumulate = false);

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

template <typename T>
void axpy(T alpha, std::span<const T> x, std::span<T> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

template <typename T>
void check_finite(std::span<const T> v, const char* what) {
  for (T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite entry");
  }
}

template <typename To, typename From>
Matrix<To> cast(const Matrix<From>& m) {
  Matrix<To> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = static_cast<To>(m.data()[i]);
  return out;
}

}  // namespace umv2
