// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/memory_layer.hpp"

#include <algorithm>
#include <cmath>

#include "umv2/ops.hpp"

namespace umv2 {

GateActivation parse_gate_activation(const std::string& s) {
  if (s == "none") return GateActivation::kNone;
  if (s == "silu") return GateActivation::kSilu;
  if (s == "off") return GateActivation::kOff;
  throw ConfigError("unknown gate activation '" + s + "'");
}

std::string to_string(GateActivation g) {
  switch (g) {
    case GateActivation::kNone: return "none";
    case GateActivation::kSilu: return "silu";
    case GateActivation::kOff: return "off";
  }
  return "?";
}

ProjectorMode parse_projector_mode(const std::string& s) {
  if (s == "shared") return ProjectorMode::kShared;
  if (s == "per_head_pair") return ProjectorMode::kPerHeadPair;
  throw ConfigError("unknown projector mode '" + s + "'");
}

std::string to_string(ProjectorMode p) { return p == ProjectorMode::kShared ? "shared" : "per_head_pair"; }

RetrievalConfig MemoryLayerConfig::retrieval() const {
  RetrievalConfig r;
  r.input_dim = hidden;
  r.n = n;
  r.key_dim = key_dim;
  r.rank = rank;
  r.heads = heads;
  r.top_m = top_m;
  r.axis_top_m = axis_top_m;
  r.prune = prune;
  return r;
}

void MemoryLayerConfig::validate() const {
  retrieval().validate();
  if (value_dim == 0) throw ConfigError("memory.value_dim must be positive");
  if (gate != GateActivation::kOff && prevalue_dim == 0) {
    throw ConfigError("memory.prevalue_dim must be positive unless gate = off");
  }
}

template <typename T>
void ValuePool<T>::check(std::size_t value_dim, std::size_t prevalue_dim) const {
  if (tables.empty()) throw ConfigError("value pool is empty");
  for (const auto* t : tables) {
    if (t == nullptr) throw UsageError("value pool holds a null table");
    if (t->rows() != rows_per_table() || t->values.cols() != value_dim || t->prevalues.cols() != prevalue_dim ||
        t->prevalues.rows() != t->rows()) {
      throw ConfigError("value pool tables disagree with the memory config (D_v " + std::to_string(value_dim) +
                        ", D_p " + std::to_string(prevalue_dim) + ")");
    }
  }
  if (rows_per_table() == 0) throw ConfigError("value pool tables have no rows");
}

template <typename T>
ValueTable<T> value_table_init(std::size_t rows, std::size_t value_dim, std::size_t prevalue_dim, double sigma_v,
                               RngStream& rng) {
  if (!(sigma_v >= 0.0) || !std::isfinite(sigma_v)) throw ConfigError("value_table_init: sigma_v must be finite and >= 0");
  ValueTable<T> t{Matrix<T>(rows, value_dim), Matrix<T>(rows, prevalue_dim)};
  if (sigma_v > 0.0) {
    rng.fill_normal(t.values.flat(), 0.0, sigma_v);
    rng.fill_normal(t.prevalues.flat(), 0.0, sigma_v);
  }
  return t;
}

template <typename T>
Umv2Params<T> Umv2Params<T>::zeros_like(const Umv2Params& o) {
  Umv2Params z;
  z.retrieval = RetrievalParams<T>::zeros_like(o.retrieval);
  z.prevalue_proj = Matrix<T>(o.prevalue_proj.rows(), o.prevalue_proj.cols());
  z.value_proj = Matrix<T>(o.value_proj.rows(), o.value_proj.cols());
  z.shuffle = o.shuffle;
  return z;
}

template <typename T>
Umv2Params<T> umv2_init(const MemoryLayerConfig& cfg, std::uint64_t shuffle_seed, RngStream& rng) {
  cfg.validate();
  Umv2Params<T> p;
  p.retrieval = retrieval_init<T>(cfg.retrieval(), rng);
  const double s = std::sqrt(2.0 / (5.0 * static_cast<double>(cfg.hidden)));
  p.prevalue_proj = Matrix<T>(cfg.prevalue_dim, cfg.hidden);
  p.value_proj = Matrix<T>(cfg.hidden, cfg.projector_blocks() * cfg.value_dim);
  rng.fill_normal(p.prevalue_proj.flat(), 0.0, s);
  rng.fill_normal(p.value_proj.flat(), 0.0, s);
  p.shuffle = IndexShuffle(shuffle_seed, cfg.num_values());
  return p;
}

namespace {

template <typename T>
T gate_act(GateActivation g, T pre) {
  switch (g) {
    case GateActivation::kNone: return pre;
    case GateActivation::kSilu: return silu(pre);
    case GateActivation::kOff: return T{1};
  }
  return pre;
}

template <typename T>
T gate_act_grad(GateActivation g, T pre) {
  switch (g) {
    case GateActivation::kNone: return T{1};
    case GateActivation::kSilu: return silu_grad(pre);
    case GateActivation::kOff: return T{0};
  }
  return T{1};
}

}  // namespace

template <typename T>
Matrix<T> umv2_forward(const Umv2Params<T>& p, const MemoryLayerConfig& cfg, const ValuePool<T>& pool,
                       ConstMatrixView<T> x, Umv2Cache<T>* cache) {
  cfg.validate();
  pool.check(cfg.value_dim, cfg.prevalue_dim);
  if (x.cols != cfg.hidden) {
    throw ConfigError("umv2_forward: input width " + std::to_string(x.cols) + ", expected " +
                      std::to_string(cfg.hidden));
  }
  if (p.shuffle.size() != cfg.num_values()) throw ConfigError("umv2_forward: shuffle size does not match the grid");
  const std::size_t tokens = x.rows, m = cfg.top_m, dv = cfg.value_dim, n = cfg.n;
  const std::size_t blocks = cfg.projector_blocks();
  const std::size_t pool_rows = pool.rows();

  Umv2Cache<T> local;
  Umv2Cache<T>& c = cache != nullptr ? *cache : local;
  retrieval_forward<T>(p.retrieval, cfg.retrieval(), x, c.retrieval);
  c.z = Matrix<T>(tokens, cfg.prevalue_dim);
  if (cfg.gate != GateActivation::kOff) gemm<T>(x, Trans::kNo, p.prevalue_proj, Trans::kYes, c.z);
  c.value_index.assign(tokens * m, 0);
  c.gate_pre.assign(tokens * m, T{0});
  c.u = Matrix<T>(tokens, blocks * dv);
  for (std::size_t t = 0; t < tokens; ++t) {
    auto zt = c.z.row(t);
    for (std::size_t k = 0; k < m; ++k) {
      const std::size_t slot = t * m + k;
      const std::uint32_t raw = c.retrieval.selected.raw[slot];
      const std::uint32_t vi = static_cast<std::uint32_t>(p.shuffle.apply(raw) % pool_rows);
      c.value_index[slot] = vi;
      T pre = T{0};
      if (cfg.gate != GateActivation::kOff) pre = static_cast<T>(dot<T>(pool.prevalue_row(vi), zt));
      c.gate_pre[slot] = pre;
      const T w = gate_act(cfg.gate, pre) * c.retrieval.selected.scores[slot];
      const std::size_t blk = blocks == 1 ? 0 : decode_cell(raw, n).pair;
      axpy<T>(w, pool.value_row(vi), std::span<T>(c.u.row(t).data() + blk * dv, dv));
    }
  }
  Matrix<T> out(tokens, cfg.hidden);
  gemm<T>(c.u, Trans::kNo, p.value_proj, Trans::kYes, out);
  return out;
}

template <typename T>
void umv2_backward(const Umv2Params<T>& p, const MemoryLayerConfig& cfg, const ValuePool<T>& pool,
                   const Umv2Cache<T>& cache, ConstMatrixView<T> d_out, Umv2Params<T>& grads,
                   const ValuePool<T>& grad_pool, MatrixView<T> dx, const AxisGrads<T>* extra_axis) {
  const std::size_t tokens = d_out.rows, m = cfg.top_m, dv = cfg.value_dim, n = cfg.n;
  if (cache.u.rows() != tokens || cache.value_index.size() != tokens * m) {
    throw UsageError("umv2_backward: missing or mismatched forward cache");
  }
  grad_pool.check(cfg.value_dim, cfg.prevalue_dim);
  const std::size_t blocks = cfg.projector_blocks();
  Matrix<T> du(tokens, blocks * dv);
  gemm<T>(d_out, Trans::kNo, p.value_proj, Trans::kNo, du);
  gemm<T>(d_out, Trans::kYes, cache.u, Trans::kNo, grads.value_proj, T{1}, T{1});

  std::vector<T> d_scores(tokens * m, T{0});
  Matrix<T> dz(tokens, cfg.prevalue_dim);
  for (std::size_t t = 0; t < tokens; ++t) {
    auto zt = cache.z.row(t);
    for (std::size_t k = 0; k < m; ++k) {
      const std::size_t slot = t * m + k;
      const std::uint32_t vi = cache.value_index[slot];
      const std::uint32_t raw = cache.retrieval.selected.raw[slot];
      const std::size_t blk = blocks == 1 ? 0 : decode_cell(raw, n).pair;
      std::span<const T> du_blk(du.row(t).data() + blk * dv, dv);
      const T s = cache.retrieval.selected.scores[slot];
      const T pre = cache.gate_pre[slot];
      const T act = gate_act(cfg.gate, pre);
      const T vdot = static_cast<T>(dot<T>(pool.value_row(vi), du_blk));
      axpy<T>(act * s, du_blk, grad_pool.value_row(vi));
      d_scores[slot] = act * vdot;
      if (cfg.gate != GateActivation::kOff) {
        const T dg = s * vdot * gate_act_grad(cfg.gate, pre);
        axpy<T>(dg, zt, grad_pool.prevalue_row(vi));
        axpy<T>(dg, std::span<const T>(pool.prevalue_row(vi)), dz.row(t));
      }
    }
  }
  if (cfg.gate != GateActivation::kOff) {
    gemm<T>(dz, Trans::kYes, cache.retrieval.x, Trans::kNo, grads.prevalue_proj, T{1}, T{1});
    gemm<T>(dz, Trans::kNo, p.prevalue_proj, Trans::kNo, dx, T{1}, T{1});
  }
  const RetrievalConfig rcfg = cfg.retrieval();
  AxisGrads<T> axis;
  retrieval_backward_scores<T>(p.retrieval, rcfg, cache.retrieval, d_scores, axis, grads.retrieval);
  if (extra_axis != nullptr) {
    if (extra_axis->d_s_row.rows() != tokens || extra_axis->d_s_row.cols() != axis.d_s_row.cols()) {
      throw ConfigError("umv2_backward: extra axis gradient shape mismatch");
    }
    axpy<T>(T{1}, extra_axis->d_s_row.flat(), axis.d_s_row.flat());
    axpy<T>(T{1}, extra_axis->d_s_col.flat(), axis.d_s_col.flat());
  }
  retrieval_backward_axes<T>(p.retrieval, rcfg, cache.retrieval, axis, grads.retrieval, dx);
}

template <typename T>
Umv2Output<T> umv2_forward_token(const Umv2Params<T>& p, const MemoryLayerConfig& cfg, const ValuePool<T>& pool,
                                 std::span<const T> x) {
  ConstMatrixView<T> xv(x.data(), 1, x.size());
  Umv2Cache<T> cache;
  Matrix<T> o = umv2_forward<T>(p, cfg, pool, xv, &cache);
  Umv2Output<T> out;
  out.o.assign(o.row(0).begin(), o.row(0).end());
  out.indices = cache.value_index;
  out.raw = cache.retrieval.selected.raw;
  out.scores = cache.retrieval.selected.scores;
  out.gate_values = cache.gate_pre;
  return out;
}

#define UMV2_INSTANTIATE(T)                                                                                         \
  template struct ValuePool<T>;                                                                                     \
  template struct Umv2Params<T>;                                                                                    \
  template ValueTable<T> value_table_init<T>(std::size_t, std::size_t, std::size_t, double, RngStream&);            \
  template Umv2Params<T> umv2_init<T>(const MemoryLayerConfig&, std::uint64_t, RngStream&);                         \
  template Matrix<T> umv2_forward<T>(const Umv2Params<T>&, const MemoryLayerConfig&, const ValuePool<T>&,           \
                                     ConstMatrixView<T>, Umv2Cache<T>*);                                            \
  template void umv2_backward<T>(const Umv2Params<T>&, const MemoryLayerConfig&, const ValuePool<T>&,               \
                                 const Umv2Cache<T>&, ConstMatrixView<T>, Umv2Params<T>&, const ValuePool<T>&,      \
                                 MatrixView<T>, const AxisGrads<T>*);                                               \
  template Umv2Output<T> umv2_forward_token<T>(const Umv2Params<T>&, const MemoryLayerConfig&, const ValuePool<T>&, \
                                               std::span<const T>);

UMV2_INSTANTIATE(float)
UMV2_INSTANTIATE(double)

#undef UMV2_INSTANTIATE

}  // namespace umv2
