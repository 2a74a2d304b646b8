// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "umv2/matrix.hpp"
#include "umv2/rng.hpp"
#include "umv2/tdqkr.hpp"

namespace umv2 {

/// Gate applied to the pre-value inner product P_i . z.
///   kNone: identity (default), kSilu: original PEER gate, kOff: g_i = 1
///   (plain value embeddings, pre-values unused).
enum class GateActivation { kNone, kSilu, kOff };

/// kShared: one value projector for all head pairs. kPerHeadPair: one
/// projector block per head pair (reference mode).
enum class ProjectorMode { kShared, kPerHeadPair };

GateActivation parse_gate_activation(const std::string& s);
std::string to_string(GateActivation g);
ProjectorMode parse_projector_mode(const std::string& s);
std::string to_string(ProjectorMode p);

struct MemoryLayerConfig {
  std::size_t hidden = 0;
  std::size_t n = 0;
  std::size_t key_dim = 0;
  std::size_t rank = 2;
  std::size_t heads = 1;
  std::size_t top_m = 0;
  std::size_t axis_top_m = kDefaultAxisTopM;
  std::size_t value_dim = 0;
  std::size_t prevalue_dim = 0;
  GateActivation gate = GateActivation::kNone;
  ProjectorMode projector = ProjectorMode::kShared;
  PruneMode prune = PruneMode::kTwoSided;

  RetrievalConfig retrieval() const;
  std::size_t num_values() const { return heads * heads * n * n; }
  std::size_t projector_blocks() const { return projector == ProjectorMode::kShared ? 1 : heads * heads; }
  void validate() const;
};

/// Value and pre-value rows addressed by one or more memory layers.
template <typename T>
struct ValueTable {
  Matrix<T> values;     // rows x D_v
  Matrix<T> prevalues;  // rows x D_p

  std::size_t rows() const { return values.rows(); }

  template <typename F>
  void for_each(F&& f) {
    f("values", values);
    f("prevalues", prevalues);
  }
};

/// N(0, sigma_v^2) for both tables.
template <typename T>
ValueTable<T> value_table_init(std::size_t rows, std::size_t value_dim, std::size_t prevalue_dim, double sigma_v,
                               RngStream& rng);

/// Concatenation of equally sized tables; row r of the pool lives in table
/// r / rows_per_table.
template <typename T>
struct ValuePool {
  std::vector<ValueTable<T>*> tables;

  std::size_t rows_per_table() const { return tables.empty() ? 0 : tables[0]->rows(); }
  std::size_t rows() const { return tables.size() * rows_per_table(); }
  std::size_t value_dim() const { return tables.empty() ? 0 : tables[0]->values.cols(); }
  std::size_t prevalue_dim() const { return tables.empty() ? 0 : tables[0]->prevalues.cols(); }
  std::span<T> value_row(std::size_t r) const {
    return tables[r / rows_per_table()]->values.row(r % rows_per_table());
  }
  std::span<T> prevalue_row(std::size_t r) const {
    return tables[r / rows_per_table()]->prevalues.row(r % rows_per_table());
  }
  void check(std::size_t value_dim, std::size_t prevalue_dim) const;
};

template <typename T>
struct Umv2Params {
  RetrievalParams<T> retrieval;
  Matrix<T> prevalue_proj;  // D_p x hidden
  Matrix<T> value_proj;     // hidden x (blocks * D_v)
  IndexShuffle shuffle;     // over the retrieval grid

  static Umv2Params zeros_like(const Umv2Params& o);

  template <typename F>
  void for_each(F&& f) {
    retrieval.for_each([&](const std::string& name, Matrix<T>& m) { f("retrieval." + name, m); });
    f("prevalue_proj", prevalue_proj);
    f("value_proj", value_proj);
  }
};

/// Retrieval per retrieval_init; both projectors N(0, 2/(5 hidden)).
template <typename T>
Umv2Params<T> umv2_init(const MemoryLayerConfig& cfg, std::uint64_t shuffle_seed, RngStream& rng);

template <typename T>
struct Umv2Cache {
  RetrievalCache<T> retrieval;
  Matrix<T> z;                         // tokens x D_p, pre-value projection
  std::vector<std::uint32_t> value_index;  // tokens x m, pool rows
  std::vector<T> gate_pre;             // tokens x m, P_i . z before the activation
  Matrix<T> u;                         // tokens x (blocks * D_v)
};

/// x: tokens x hidden (the pre-FFN norm output). Returns tokens x hidden.
template <typename T>
Matrix<T> umv2_forward(const Umv2Params<T>& p, const MemoryLayerConfig& cfg, const ValuePool<T>& pool,
                       ConstMatrixView<T> x, Umv2Cache<T>* cache = nullptr);

/// Accumulates gradients into `grads`, `grad_pool` (same layout as `pool`)
/// and `dx`. `extra_axis`, when set, is added to the axis-score gradients
/// before they reach keys and queries (used by the balance loss).
template <typename T>
void umv2_backward(const Umv2Params<T>& p, const MemoryLayerConfig& cfg, const ValuePool<T>& pool,
                   const Umv2Cache<T>& cache, ConstMatrixView<T> d_out, Umv2Params<T>& grads,
                   const ValuePool<T>& grad_pool, MatrixView<T> dx, const AxisGrads<T>* extra_axis = nullptr);

/// Single-token view of a forward pass.
template <typename T>
struct Umv2Output {
  std::vector<T> o;
  std::vector<std::uint32_t> indices;  // pool rows after the shuffle
  std::vector<std::uint32_t> raw;      // grid cells before the shuffle
  std::vector<T> scores;
  std::vector<T> gate_values;          // P_i . z
};

template <typename T>
Umv2Output<T> umv2_forward_token(const Umv2Params<T>& p, const MemoryLayerConfig& cfg, const ValuePool<T>& pool,
                                 std::span<const T> x);

}  // namespace umv2
