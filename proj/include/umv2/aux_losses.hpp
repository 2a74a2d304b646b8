// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "umv2/matrix.hpp"
#include "umv2/tdqkr.hpp"

namespace umv2 {

struct PenaltyConfig {
  double alpha = 0.0;
  double tau = 0.0;

  void validate() const;
};

/// alpha / (r - 1) * sum_{i >= 2} max(0, lambda_i - tau)^2 over the singular
/// values of one r x r core; 0 for r = 1. When `grad` is set, adds
/// scale * dLoss/dC into it.
double tucker_penalty(const Matrix<double>& core, const PenaltyConfig& cfg, Matrix<double>* grad = nullptr,
                      double scale = 1.0);

/// Mean penalty over every head-pair core in a (pairs x r^2) core matrix.
template <typename T>
double tucker_penalty_all(const Matrix<T>& cores, std::size_t rank, const PenaltyConfig& cfg,
                          Matrix<T>* grad = nullptr);

/// Per-key activation statistics of one batch, per head pair and axis.
/// Index [pair * n + key].
struct BalanceStats {
  std::size_t tokens = 0;
  std::size_t n = 0;
  std::size_t pairs = 0;
  std::size_t axis_width = 0;            // m_axis: keys counted per token and axis
  std::vector<std::uint64_t> row_counts;  // top-m_axis hits
  std::vector<std::uint64_t> col_counts;
  std::vector<double> row_prob;           // mean softmax probability
  std::vector<double> col_prob;
};

/// beta * N * sum_n f_n p_n with f_n = count_n / T, averaged over the two axes
/// and all head pairs.
double balance_loss_from_stats(const BalanceStats& s, double beta);

struct BalanceResult {
  double loss = 0.0;
  BalanceStats stats;
};

/// Balance loss of a retrieval forward pass. Probabilities are
/// softmax(u_1^T S_row) and softmax(t_1^T S_col) over the n keys; counts come
/// from the proxy pruning. Gradients go to the axis scores (accumulated into
/// `axis`, sized on first use) and, through the leading singular vectors, to
/// `grads->cores`. Counts are constants.
template <typename T>
BalanceResult ultramem_balance_loss(const RetrievalParams<T>& p, const RetrievalConfig& cfg,
                                    const RetrievalCache<T>& cache, double beta, AxisGrads<T>* axis = nullptr,
                                    RetrievalParams<T>* grads = nullptr);

}  // namespace umv2
