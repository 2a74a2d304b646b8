// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "umv2/matrix.hpp"
#include "umv2/rng.hpp"
#include "umv2/svd.hpp"
#include "umv2/topm.hpp"

namespace umv2 {

inline constexpr std::size_t kDefaultAxisTopM = 128;

/// How per-axis candidates are chosen from the rank-1 proxy scores.
/// kTwoSided keeps the largest and the most negative proxies, which makes the
/// pruning independent of the SVD sign and exact for rank-1 cores.
enum class PruneMode { kTwoSided, kTopOnly };

PruneMode parse_prune_mode(const std::string& s);
std::string to_string(PruneMode m);

struct RetrievalConfig {
  std::size_t input_dim = 0;
  std::size_t n = 0;        // row (and column) keys per head
  std::size_t key_dim = 0;
  std::size_t rank = 2;
  std::size_t heads = 1;
  std::size_t top_m = 0;
  std::size_t axis_top_m = kDefaultAxisTopM;
  PruneMode prune = PruneMode::kTwoSided;

  std::size_t pairs() const { return heads * heads; }
  std::size_t num_values() const { return pairs() * n * n; }
  std::size_t axis_width() const { return axis_top_m < n ? axis_top_m : n; }
  /// Upper bound on candidates kept per axis.
  std::size_t axis_candidates() const;
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

template <typename T>
struct RetrievalParams {
  Matrix<T> query_row;  // (heads * rank * key_dim) x input_dim, block (a, k) = one query map
  Matrix<T> query_col;
  Matrix<T> key_row;    // (heads * rank * n) x key_dim, row (a * rank + k) * n + i
  Matrix<T> key_col;
  Matrix<T> cores;      // (heads^2) x (rank^2), row a * heads + b holds C^{a,b} row-major
  double gain_q = 1.0;  // query norm gain (calibrated, not trained)
  double gain_k = 1.0;  // key norm gain

  static RetrievalParams zeros_like(const RetrievalParams& o);

  template <typename F>
  void for_each(F&& f) {
    f("query_row", query_row);
    f("query_col", query_col);
    f("key_row", key_row);
    f("key_col", key_col);
    f("cores", cores);
  }
};

/// Query maps N(0, 2/(5 in)), keys N(0, 1), cores diag(1, 1/2, ...) plus
/// N(0, 0.01^2) noise so singular values are distinct.
template <typename T>
RetrievalParams<T> retrieval_init(const RetrievalConfig& cfg, RngStream& rng);

/// Selected grid cells for a batch: `raw` is pair * n^2 + row * n + col.
template <typename T>
struct SparseScores {
  std::size_t m = 0;
  std::vector<std::uint32_t> raw;  // tokens x m
  std::vector<T> scores;           // tokens x m, descending per token

  std::size_t tokens() const { return m == 0 ? 0 : raw.size() / m; }
};

struct GridCell {
  std::size_t pair, row, col;
};

inline GridCell decode_cell(std::uint32_t raw, std::size_t n) {
  const std::size_t nn = n * n;
  return {raw / nn, (raw % nn) / n, raw % n};
}

template <typename T>
struct RetrievalCache {
  Matrix<T> x;
  Matrix<T> q_row_raw, q_col_raw;  // tokens x (heads * rank * key_dim)
  Matrix<T> q_row, q_col;          // normalized and scaled by gain_q
  std::vector<T> q_row_inv, q_col_inv;  // tokens x (heads * rank) inverse RMS
  Matrix<T> k_row, k_col;          // normalized keys scaled by gain_k
  std::vector<T> k_row_inv, k_col_inv;
  Matrix<T> s_row, s_col;          // tokens x (heads * rank * n)
  std::vector<SvdResult> svd;      // per head pair
  SparseScores<T> selected;
};

/// Axis scores for every token: fills q/k/s fields of the cache.
template <typename T>
void score_axes(const RetrievalParams<T>& p, const RetrievalConfig& cfg, ConstMatrixView<T> x,
                RetrievalCache<T>& cache);

struct AxisCandidates {
  std::vector<std::uint32_t> rows;  // ascending
  std::vector<std::uint32_t> cols;  // ascending
  std::vector<std::uint32_t> top_rows;  // top-m_axis by proxy (balance-loss counts)
  std::vector<std::uint32_t> top_cols;
};

/// Rank-1 proxy pruning for head pair (a, b) of one token. `s_row`/`s_col`
/// are one token's axis scores laid out as (head * rank + k) * n + i.
template <typename T>
AxisCandidates prune_candidates(std::span<const T> s_row, std::span<const T> s_col, const RetrievalConfig& cfg,
                                std::size_t a, std::size_t b, const SvdResult& core_svd);

/// Proxy scores sqrt(lambda_1) * S u_1 (rows) or sqrt(lambda_1) * S t_1 (cols).
template <typename T>
std::vector<double> axis_proxy(std::span<const T> s, const RetrievalConfig& cfg, std::size_t head,
                               const SvdResult& core_svd, bool row_side);

/// Exact tucker score of one cell.
template <typename T>
T cell_score(std::span<const T> s_row, std::span<const T> s_col, const Matrix<T>& cores,
             const RetrievalConfig& cfg, std::size_t pair, std::size_t row, std::size_t col);

/// Two-stage selection for one token: prune every head pair, score the
/// candidate subgrids exactly, keep the global top-m. Ties resolve to the
/// lower raw cell index.
template <typename T>
void exact_subgrid_topm(std::span<const T> s_row, std::span<const T> s_col, const Matrix<T>& cores,
                        const std::vector<SvdResult>& svds, const RetrievalConfig& cfg, TopM<T>& out);

/// Brute-force top-m over all h^2 n^2 cells (reference).
template <typename T>
TopM<T> exhaustive_topm(std::span<const T> s_row, std::span<const T> s_col, const Matrix<T>& cores,
                        const RetrievalConfig& cfg);

std::vector<SvdResult> core_svds(const Matrix<double>& cores, std::size_t rank);
template <typename T>
std::vector<SvdResult> core_svds(const Matrix<T>& cores, std::size_t rank) {
  return core_svds(cast<double>(cores), rank);
}

/// Full retrieval for a batch: score_axes + exact_subgrid_topm per token.
template <typename T>
void retrieval_forward(const RetrievalParams<T>& p, const RetrievalConfig& cfg, ConstMatrixView<T> x,
                       RetrievalCache<T>& cache);

/// Gradients w.r.t. the axis score tensors, shaped like cache.s_row/s_col.
template <typename T>
struct AxisGrads {
  Matrix<T> d_s_row, d_s_col;
};

/// Phase 1: d(selected scores) -> d(axis scores) and d(cores), straight
/// through the selection. Accumulates into `axis` and `grads.cores`.
template <typename T>
void retrieval_backward_scores(const RetrievalParams<T>& p, const RetrievalConfig& cfg,
                               const RetrievalCache<T>& cache, std::span<const T> d_scores,
                               AxisGrads<T>& axis, RetrievalParams<T>& grads);

/// Phase 2: d(axis scores) -> keys, query maps and the input (accumulated).
template <typename T>
void retrieval_backward_axes(const RetrievalParams<T>& p, const RetrievalConfig& cfg,
                             const RetrievalCache<T>& cache, const AxisGrads<T>& axis,
                             RetrievalParams<T>& grads, MatrixView<T> dx);

/// Seeded Fisher-Yates permutation of [0, size).
class IndexShuffle {
 public:
  IndexShuffle() = default;
  IndexShuffle(std::uint64_t seed, std::size_t size);

  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return perm_.size(); }
  std::uint32_t apply(std::uint64_t raw_index) const;
  const std::vector<std::uint32_t>& permutation() const { return perm_; }

 private:
  std::uint64_t seed_ = 0;
  std::vector<std::uint32_t> perm_;
};

/// One-off lookup: builds the permutation for (layer_seed, n_total) and maps
/// raw_index through it.
std::uint32_t shuffle_indices(std::uint64_t raw_index, std::uint64_t layer_seed, std::size_t n_total);

}  // namespace umv2
