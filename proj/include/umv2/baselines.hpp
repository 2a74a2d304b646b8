// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "umv2/matrix.hpp"
#include "umv2/rng.hpp"

namespace umv2 {

// ---------------------------------------------------------------------------
// SwiGLU FFN: o = W3 (W2 x * silu(W1 x)).

template <typename T>
struct FfnParams {
  Matrix<T> w1;  // inner x hidden, gate branch
  Matrix<T> w2;  // inner x hidden, linear branch
  Matrix<T> w3;  // hidden x inner, output

  std::size_t hidden() const { return w1.cols(); }
  std::size_t inner() const { return w1.rows(); }

  static FfnParams zeros(std::size_t hidden, std::size_t inner) {
    return {Matrix<T>(inner, hidden), Matrix<T>(inner, hidden), Matrix<T>(hidden, inner)};
  }

  template <typename F>
  void for_each(F&& f) {
    f("w1", w1);
    f("w2", w2);
    f("w3", w3);
  }
};

template <typename T>
struct FfnCache {
  Matrix<T> x;
  Matrix<T> gate;   // W1 x
  Matrix<T> lin;    // W2 x
  Matrix<T> inner;  // lin * silu(gate)
};

/// Linears drawn from N(0, 2/(5 hidden)); W3 further scaled by sqrt(1/(2 L)).
template <typename T>
FfnParams<T> ffn_init(std::size_t hidden, std::size_t inner, std::size_t num_layers, RngStream& rng);

/// x: tokens x hidden. Returns tokens x hidden.
template <typename T>
Matrix<T> ffn_forward(const FfnParams<T>& p, ConstMatrixView<T> x, FfnCache<T>* cache = nullptr);

/// Accumulates parameter gradients into `grads` and input gradient into `dx`.
template <typename T>
void ffn_backward(const FfnParams<T>& p, const FfnCache<T>& cache, ConstMatrixView<T> dy,
                  FfnParams<T>& grads, MatrixView<T> dx);

// ---------------------------------------------------------------------------
// Gated mixture of experts.

enum class GateMode { kRaw, kSoftmaxThenTopM, kTopMThenSoftmax };

GateMode parse_gate_mode(const std::string& s);
std::string to_string(GateMode m);

template <typename T>
struct MoeParams {
  Matrix<T> gate;             // experts x in
  std::vector<Matrix<T>> up;  // per expert: in x expert_inner
  std::vector<Matrix<T>> down;  // per expert: out x expert_inner
  std::size_t top_m = 1;

  std::size_t experts() const { return gate.rows(); }
  std::size_t input_dim() const { return gate.cols(); }
  std::size_t output_dim() const { return down.empty() ? 0 : down[0].rows(); }
  std::size_t expert_inner() const { return up.empty() ? 0 : up[0].cols(); }

  static MoeParams zeros_like(const MoeParams& o);

  template <typename F>
  void for_each(F&& f) {
    f("gate", gate);
    for (std::size_t e = 0; e < up.size(); ++e) {
      f("up." + std::to_string(e), up[e]);
      f("down." + std::to_string(e), down[e]);
    }
  }
};

/// Router statistics for the balance loss.
struct GateStats {
  std::vector<std::uint64_t> counts;  // times each expert was selected
  std::vector<double> prob_sum;       // sum over tokens of the softmax router probability
  std::size_t tokens = 0;
};

template <typename T>
struct MoeCache {
  Matrix<T> x;
  Matrix<T> logits;  // tokens x experts, s = x K^T
  Matrix<T> probs;   // softmax over all experts
  std::vector<std::uint32_t> selected;  // tokens x top_m
  std::vector<T> weights;                // tokens x top_m
  std::vector<Matrix<T>> hidden;         // per token: top_m x expert_inner (x U_i)
  GateMode mode = GateMode::kSoftmaxThenTopM;
};

template <typename T>
MoeParams<T> moe_init(std::size_t in, std::size_t expert_inner, std::size_t out, std::size_t experts,
                      std::size_t top_m, RngStream& rng);

template <typename T>
Matrix<T> moe_forward(const MoeParams<T>& p, ConstMatrixView<T> x, GateMode mode, GateStats* stats,
                      MoeCache<T>* cache = nullptr);

template <typename T>
void moe_backward(const MoeParams<T>& p, const MoeCache<T>& cache, ConstMatrixView<T> dy,
                  MoeParams<T>& grads, MatrixView<T> dx);

/// beta * N * sum_n f_n p_n with f_n = count_n / T and p_n the mean router
/// probability.
double moe_balance_loss(const GateStats& stats, double beta);

/// Gradient of moe_balance_loss (selection counts held constant) w.r.t. the
/// gate keys and the input.
template <typename T>
void moe_balance_backward(const MoeParams<T>& p, const MoeCache<T>& cache, const GateStats& stats,
                          double beta, MoeParams<T>& grads, MatrixView<T> dx);

// ---------------------------------------------------------------------------
// Product key memory.

template <typename T>
struct PkmParams {
  std::size_t heads = 2;
  std::size_t n = 0;        // keys per axis; the value table has n^2 rows
  std::size_t key_dim = 0;
  std::size_t top_m = 0;
  std::size_t axis_top_m = 0;  // per-axis candidates kept before the grid top-m
  Matrix<T> query_row;  // (heads * key_dim) x in
  Matrix<T> query_col;
  Matrix<T> key_row;    // (heads * n) x key_dim
  Matrix<T> key_col;
  Matrix<T> values;     // n^2 x value_dim, shared across heads

  std::size_t input_dim() const { return query_row.cols(); }
  std::size_t value_dim() const { return values.cols(); }

  static PkmParams zeros_like(const PkmParams& o);

  template <typename F>
  void for_each(F&& f) {
    f("query_row", query_row);
    f("query_col", query_col);
    f("key_row", key_row);
    f("key_col", key_col);
    f("values", values);
  }
};

template <typename T>
struct PkmCache {
  Matrix<T> x;
  Matrix<T> q_row, q_col;  // tokens x (heads * key_dim)
  Matrix<T> s_row, s_col;  // tokens x (heads * n)
  std::vector<std::uint32_t> cells;  // tokens x heads x top_m, value row index
  std::vector<T> scores;             // matching grid scores
};

template <typename T>
PkmParams<T> pkm_init(std::size_t in, std::size_t n, std::size_t key_dim, std::size_t value_dim,
                      std::size_t heads, std::size_t top_m, std::size_t axis_top_m, RngStream& rng);

template <typename T>
Matrix<T> pkm_forward(const PkmParams<T>& p, ConstMatrixView<T> x, PkmCache<T>* cache = nullptr);

template <typename T>
void pkm_backward(const PkmParams<T>& p, const PkmCache<T>& cache, ConstMatrixView<T> dy,
                  PkmParams<T>& grads, MatrixView<T> dx);

}  // namespace umv2
