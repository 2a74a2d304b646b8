// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "umv2/ops.hpp"
#include "umv2/topm.hpp"

namespace umv2 {

namespace {

double linear_std(std::size_t hidden) { return std::sqrt(2.0 / (5.0 * static_cast<double>(hidden))); }

template <typename T>
Matrix<T> normal_matrix(std::size_t r, std::size_t c, double stddev, RngStream& rng) {
  Matrix<T> m(r, c);
  rng.fill_normal(m.flat(), 0.0, stddev);
  return m;
}

template <typename T>
Matrix<T> copy_of(ConstMatrixView<T> v) {
  Matrix<T> m(v.rows, v.cols);
  for (std::size_t r = 0; r < v.rows; ++r) std::copy_n(v.data + r * v.stride, v.cols, m.row(r).data());
  return m;
}

void check_rows(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw ConfigError(std::string(what) + ": expected width " + std::to_string(want) + ", got " +
                      std::to_string(got));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// FFN

template <typename T>
FfnParams<T> ffn_init(std::size_t hidden, std::size_t inner, std::size_t num_layers, RngStream& rng) {
  if (hidden == 0 || inner == 0 || num_layers == 0) throw ConfigError("ffn_init: zero dimension");
  const double s = linear_std(hidden);
  FfnParams<T> p;
  p.w1 = normal_matrix<T>(inner, hidden, s, rng);
  p.w2 = normal_matrix<T>(inner, hidden, s, rng);
  p.w3 = normal_matrix<T>(hidden, inner, s * std::sqrt(1.0 / (2.0 * static_cast<double>(num_layers))), rng);
  return p;
}

template <typename T>
Matrix<T> ffn_forward(const FfnParams<T>& p, ConstMatrixView<T> x, FfnCache<T>* cache) {
  check_rows(x.cols, p.hidden(), "ffn_forward");
  const std::size_t n = x.rows;
  Matrix<T> gate(n, p.inner()), lin(n, p.inner()), inner(n, p.inner());
  gemm<T>(x, Trans::kNo, p.w1, Trans::kYes, gate);
  gemm<T>(x, Trans::kNo, p.w2, Trans::kYes, lin);
  swiglu_inner<T>(gate.flat(), lin.flat(), inner.flat());
  Matrix<T> y(n, p.hidden());
  gemm<T>(inner, Trans::kNo, p.w3, Trans::kYes, y);
  if (cache != nullptr) {
    cache->x = copy_of(x);
    cache->gate = std::move(gate);
    cache->lin = std::move(lin);
    cache->inner = std::move(inner);
  }
  return y;
}

template <typename T>
void ffn_backward(const FfnParams<T>& p, const FfnCache<T>& cache, ConstMatrixView<T> dy,
                  FfnParams<T>& grads, MatrixView<T> dx) {
  if (cache.x.empty() && dy.rows != 0) throw UsageError("ffn_backward: missing forward cache");
  const std::size_t n = dy.rows;
  Matrix<T> d_inner(n, p.inner());
  gemm<T>(dy, Trans::kNo, p.w3, Trans::kNo, d_inner);
  gemm<T>(dy, Trans::kYes, cache.inner, Trans::kNo, grads.w3, T{1}, T{1});
  Matrix<T> d_gate(n, p.inner()), d_lin(n, p.inner());
  for (std::size_t i = 0; i < d_inner.size(); ++i) {
    const T g = cache.gate.data()[i];
    d_lin.data()[i] = d_inner.data()[i] * silu(g);
    d_gate.data()[i] = d_inner.data()[i] * cache.lin.data()[i] * silu_grad(g);
  }
  gemm<T>(d_gate, Trans::kYes, cache.x, Trans::kNo, grads.w1, T{1}, T{1});
  gemm<T>(d_lin, Trans::kYes, cache.x, Trans::kNo, grads.w2, T{1}, T{1});
  gemm<T>(d_gate, Trans::kNo, p.w1, Trans::kNo, dx, T{1}, T{1});
  gemm<T>(d_lin, Trans::kNo, p.w2, Trans::kNo, dx, T{1}, T{1});
}

// ---------------------------------------------------------------------------
// MoE

GateMode parse_gate_mode(const std::string& s) {
  if (s == "raw") return GateMode::kRaw;
  if (s == "softmax_then_topm") return GateMode::kSoftmaxThenTopM;
  if (s == "topm_then_softmax") return GateMode::kTopMThenSoftmax;
  throw ConfigError("unknown gate mode '" + s + "'");
}

std::string to_string(GateMode m) {
  switch (m) {
    case GateMode::kRaw: return "raw";
    case GateMode::kSoftmaxThenTopM: return "softmax_then_topm";
    case GateMode::kTopMThenSoftmax: return "topm_then_softmax";
  }
  return "?";
}

template <typename T>
MoeParams<T> MoeParams<T>::zeros_like(const MoeParams& o) {
  MoeParams z;
  z.gate = Matrix<T>(o.gate.rows(), o.gate.cols());
  for (const auto& u : o.up) z.up.emplace_back(u.rows(), u.cols());
  for (const auto& d : o.down) z.down.emplace_back(d.rows(), d.cols());
  z.top_m = o.top_m;
  return z;
}

template <typename T>
MoeParams<T> moe_init(std::size_t in, std::size_t expert_inner, std::size_t out, std::size_t experts,
                      std::size_t top_m, RngStream& rng) {
  if (top_m < 1 || top_m > experts) throw ConfigError("moe_init: top_m must be in [1, experts]");
  const double s = linear_std(in);
  MoeParams<T> p;
  p.top_m = top_m;
  p.gate = normal_matrix<T>(experts, in, s, rng);
  for (std::size_t e = 0; e < experts; ++e) {
    p.up.push_back(normal_matrix<T>(in, expert_inner, s, rng));
    p.down.push_back(normal_matrix<T>(out, expert_inner, s, rng));
  }
  return p;
}

template <typename T>
Matrix<T> moe_forward(const MoeParams<T>& p, ConstMatrixView<T> x, GateMode mode, GateStats* stats,
                      MoeCache<T>* cache) {
  check_rows(x.cols, p.input_dim(), "moe_forward");
  const std::size_t n_exp = p.experts();
  const std::size_t m = p.top_m;
  if (m < 1 || m > n_exp) {
    throw ConfigError("moe_forward: top_m = " + std::to_string(m) + " exceeds " +
                      std::to_string(n_exp) + " experts");
  }
  const std::size_t tokens = x.rows;
  const std::size_t d_inner = p.expert_inner();
  Matrix<T> logits(tokens, n_exp);
  gemm<T>(x, Trans::kNo, p.gate, Trans::kYes, logits);
  Matrix<T> probs = logits;
  for (std::size_t t = 0; t < tokens; ++t) softmax(probs.row(t));

  if (stats != nullptr && stats->counts.size() != n_exp) {
    stats->counts.assign(n_exp, 0);
    stats->prob_sum.assign(n_exp, 0.0);
    stats->tokens = 0;
  }

  Matrix<T> y(tokens, p.output_dim());
  std::vector<std::uint32_t> selected(tokens * m);
  std::vector<T> weights(tokens * m);
  std::vector<Matrix<T>> hidden;
  if (cache != nullptr) hidden.reserve(tokens);
  std::vector<std::uint32_t> scratch;
  TopM<T> sel;
  std::vector<T> h(d_inner), a(d_inner);
  for (std::size_t t = 0; t < tokens; ++t) {
    top_m_into<T>(logits.row(t), m, scratch, sel);
    if (mode == GateMode::kTopMThenSoftmax) {
      std::vector<T> w = sel.values;
      softmax<T>(w);
      for (std::size_t k = 0; k < m; ++k) weights[t * m + k] = w[k];
    } else {
      for (std::size_t k = 0; k < m; ++k) {
        weights[t * m + k] = mode == GateMode::kRaw ? sel.values[k] : probs(t, sel.indices[k]);
      }
    }
    Matrix<T> hid(m, d_inner);
    std::span<const T> xt(x.data + t * x.stride, x.cols);
    for (std::size_t k = 0; k < m; ++k) {
      const std::uint32_t e = sel.indices[k];
      selected[t * m + k] = e;
      // h = x U_e
      std::fill(h.begin(), h.end(), T{0});
      for (std::size_t i = 0; i < x.cols; ++i) axpy<T>(xt[i], p.up[e].row(i), h);
      for (std::size_t j = 0; j < d_inner; ++j) a[j] = silu(h[j]);
      std::copy(h.begin(), h.end(), hid.row(k).begin());
      const T w = weights[t * m + k];
      for (std::size_t o = 0; o < p.output_dim(); ++o) {
        y(t, o) += w * static_cast<T>(dot<T>(p.down[e].row(o), a));
      }
      if (stats != nullptr) stats->counts[e] += 1;
    }
    if (stats != nullptr) {
      for (std::size_t e = 0; e < n_exp; ++e) stats->prob_sum[e] += probs(t, e);
      stats->tokens += 1;
    }
    if (cache != nullptr) hidden.push_back(std::move(hid));
  }
  if (cache != nullptr) {
    cache->x = copy_of(x);
    cache->logits = std::move(logits);
    cache->probs = std::move(probs);
    cache->selected = std::move(selected);
    cache->weights = std::move(weights);
    cache->hidden = std::move(hidden);
    cache->mode = mode;
  }
  return y;
}

template <typename T>
void moe_backward(const MoeParams<T>& p, const MoeCache<T>& cache, ConstMatrixView<T> dy,
                  MoeParams<T>& grads, MatrixView<T> dx) {
  if (cache.x.rows() != dy.rows) throw UsageError("moe_backward: missing or mismatched forward cache");
  const std::size_t tokens = dy.rows;
  const std::size_t m = p.top_m;
  const std::size_t n_exp = p.experts();
  const std::size_t d_inner = p.expert_inner();
  const std::size_t d_in = p.input_dim();
  std::vector<T> a(d_inner), da(d_inner), dh(d_inner), dw(m), dlogit(n_exp);
  for (std::size_t t = 0; t < tokens; ++t) {
    std::span<const T> dyt(dy.data + t * dy.stride, dy.cols);
    std::span<const T> xt = cache.x.row(t);
    std::span<T> dxt(dx.data + t * dx.stride, dx.cols);
    for (std::size_t k = 0; k < m; ++k) {
      const std::uint32_t e = cache.selected[t * m + k];
      const T w = cache.weights[t * m + k];
      std::span<const T> h = cache.hidden[t].row(k);
      for (std::size_t j = 0; j < d_inner; ++j) a[j] = silu(h[j]);
      // expert output e_out = V a; dL/dw = dy . e_out
      double dwk = 0.0;
      std::fill(da.begin(), da.end(), T{0});
      for (std::size_t o = 0; o < p.output_dim(); ++o) {
        const auto vrow = p.down[e].row(o);
        dwk += dyt[o] * dot<T>(vrow, a);
        axpy<T>(w * dyt[o], std::span<const T>(a), grads.down[e].row(o));
        axpy<T>(w * dyt[o], vrow, da);
      }
      dw[k] = static_cast<T>(dwk);
      for (std::size_t j = 0; j < d_inner; ++j) dh[j] = da[j] * silu_grad(h[j]);
      for (std::size_t i = 0; i < d_in; ++i) {
        axpy<T>(xt[i], std::span<const T>(dh), grads.up[e].row(i));
        dxt[i] += static_cast<T>(dot<T>(p.up[e].row(i), dh));
      }
    }
    std::fill(dlogit.begin(), dlogit.end(), T{0});
    switch (cache.mode) {
      case GateMode::kRaw:
        for (std::size_t k = 0; k < m; ++k) dlogit[cache.selected[t * m + k]] += dw[k];
        break;
      case GateMode::kSoftmaxThenTopM: {
        std::vector<T> dp(n_exp, T{0});
        for (std::size_t k = 0; k < m; ++k) dp[cache.selected[t * m + k]] += dw[k];
        softmax_backward<T>(cache.probs.row(t), dp, dlogit);
        break;
      }
      case GateMode::kTopMThenSoftmax: {
        std::vector<T> wsel(cache.weights.begin() + static_cast<std::ptrdiff_t>(t * m),
                            cache.weights.begin() + static_cast<std::ptrdiff_t>((t + 1) * m));
        std::vector<T> dsel(m);
        softmax_backward<T>(wsel, dw, dsel);
        for (std::size_t k = 0; k < m; ++k) dlogit[cache.selected[t * m + k]] += dsel[k];
        break;
      }
    }
    for (std::size_t e = 0; e < n_exp; ++e) {
      if (dlogit[e] == T{0}) continue;
      axpy<T>(dlogit[e], xt, grads.gate.row(e));
      axpy<T>(dlogit[e], p.gate.row(e), dxt);
    }
  }
}

double moe_balance_loss(const GateStats& stats, double beta) {
  if (stats.tokens == 0) throw DomainError("moe_balance_loss: no tokens");
  const double n = static_cast<double>(stats.counts.size());
  const double t = static_cast<double>(stats.tokens);
  double s = 0.0;
  for (std::size_t e = 0; e < stats.counts.size(); ++e) {
    s += (static_cast<double>(stats.counts[e]) / t) * (stats.prob_sum[e] / t);
  }
  return beta * n * s;
}

template <typename T>
void moe_balance_backward(const MoeParams<T>& p, const MoeCache<T>& cache, const GateStats& stats,
                          double beta, MoeParams<T>& grads, MatrixView<T> dx) {
  if (stats.tokens == 0) throw DomainError("moe_balance_backward: no tokens");
  const std::size_t n_exp = p.experts();
  const double t_total = static_cast<double>(stats.tokens);
  // dL/dP[t, e] = beta * N * f_e / T
  std::vector<T> dp(n_exp), dlogit(n_exp);
  for (std::size_t e = 0; e < n_exp; ++e) {
    dp[e] = static_cast<T>(beta * static_cast<double>(n_exp) * (static_cast<double>(stats.counts[e]) / t_total) /
                           t_total);
  }
  for (std::size_t t = 0; t < cache.x.rows(); ++t) {
    softmax_backward<T>(cache.probs.row(t), dp, dlogit);
    std::span<T> dxt(dx.data + t * dx.stride, dx.cols);
    for (std::size_t e = 0; e < n_exp; ++e) {
      axpy<T>(dlogit[e], cache.x.row(t), grads.gate.row(e));
      axpy<T>(dlogit[e], p.gate.row(e), dxt);
    }
  }
}

// ---------------------------------------------------------------------------
// PKM

template <typename T>
PkmParams<T> PkmParams<T>::zeros_like(const PkmParams& o) {
  PkmParams z;
  z.heads = o.heads;
  z.n = o.n;
  z.key_dim = o.key_dim;
  z.top_m = o.top_m;
  z.axis_top_m = o.axis_top_m;
  z.query_row = Matrix<T>(o.query_row.rows(), o.query_row.cols());
  z.query_col = Matrix<T>(o.query_col.rows(), o.query_col.cols());
  z.key_row = Matrix<T>(o.key_row.rows(), o.key_row.cols());
  z.key_col = Matrix<T>(o.key_col.rows(), o.key_col.cols());
  z.values = Matrix<T>(o.values.rows(), o.values.cols());
  return z;
}

template <typename T>
PkmParams<T> pkm_init(std::size_t in, std::size_t n, std::size_t key_dim, std::size_t value_dim,
                      std::size_t heads, std::size_t top_m, std::size_t axis_top_m, RngStream& rng) {
  if (axis_top_m < 1 || axis_top_m > n) throw ConfigError("pkm_init: axis_top_m must be in [1, n]");
  if (top_m < 1 || top_m > axis_top_m * axis_top_m) {
    throw ConfigError("pkm_init: top_m exceeds the candidate grid");
  }
  PkmParams<T> p;
  p.heads = heads;
  p.n = n;
  p.key_dim = key_dim;
  p.top_m = top_m;
  p.axis_top_m = axis_top_m;
  const double qs = linear_std(in);
  const double ks = 1.0 / std::sqrt(static_cast<double>(key_dim));
  p.query_row = normal_matrix<T>(heads * key_dim, in, qs, rng);
  p.query_col = normal_matrix<T>(heads * key_dim, in, qs, rng);
  p.key_row = normal_matrix<T>(heads * n, key_dim, ks, rng);
  p.key_col = normal_matrix<T>(heads * n, key_dim, ks, rng);
  p.values = normal_matrix<T>(n * n, value_dim, 1.0 / std::sqrt(static_cast<double>(value_dim)), rng);
  return p;
}

template <typename T>
Matrix<T> pkm_forward(const PkmParams<T>& p, ConstMatrixView<T> x, PkmCache<T>* cache) {
  check_rows(x.cols, p.input_dim(), "pkm_forward");
  if (p.values.rows() != p.n * p.n) throw ConfigError("pkm_forward: value table must have n^2 rows");
  if (p.axis_top_m < 1 || p.axis_top_m > p.n || p.top_m < 1 || p.top_m > p.axis_top_m * p.axis_top_m) {
    throw ConfigError("pkm_forward: inconsistent top-m widths");
  }
  const std::size_t tokens = x.rows;
  const std::size_t h = p.heads, n = p.n, dk = p.key_dim, m = p.top_m, ma = p.axis_top_m;
  Matrix<T> q_row(tokens, h * dk), q_col(tokens, h * dk);
  gemm<T>(x, Trans::kNo, p.query_row, Trans::kYes, q_row);
  gemm<T>(x, Trans::kNo, p.query_col, Trans::kYes, q_col);
  Matrix<T> s_row(tokens, h * n), s_col(tokens, h * n);
  for (std::size_t a = 0; a < h; ++a) {
    ConstMatrixView<T> kr(p.key_row.data() + a * n * dk, n, dk);
    ConstMatrixView<T> kc(p.key_col.data() + a * n * dk, n, dk);
    gemm<T>(ConstMatrixView<T>(q_row).col_block(a * dk, dk), Trans::kNo, kr, Trans::kYes,
            MatrixView<T>(s_row).col_block(a * n, n));
    gemm<T>(ConstMatrixView<T>(q_col).col_block(a * dk, dk), Trans::kNo, kc, Trans::kYes,
            MatrixView<T>(s_col).col_block(a * n, n));
  }
  Matrix<T> y(tokens, p.value_dim());
  std::vector<std::uint32_t> cells(tokens * h * m);
  std::vector<T> scores(tokens * h * m);
  std::vector<std::uint32_t> scratch;
  TopM<T> rsel, csel, gsel;
  std::vector<T> grid(ma * ma);
  std::vector<std::uint32_t> grid_cell(ma * ma);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t a = 0; a < h; ++a) {
      std::span<const T> sr(s_row.row(t).data() + a * n, n);
      std::span<const T> sc(s_col.row(t).data() + a * n, n);
      top_m_into<T>(sr, ma, scratch, rsel);
      top_m_into<T>(sc, ma, scratch, csel);
      std::vector<std::uint32_t> rows = rsel.indices, cols = csel.indices;
      std::sort(rows.begin(), rows.end());
      std::sort(cols.begin(), cols.end());
      // Candidates in ascending cell order so ties resolve lexicographically.
      for (std::size_t i = 0; i < ma; ++i) {
        for (std::size_t j = 0; j < ma; ++j) {
          grid[i * ma + j] = sr[rows[i]] + sc[cols[j]];
          grid_cell[i * ma + j] = static_cast<std::uint32_t>(rows[i] * n + cols[j]);
        }
      }
      top_m_into<T>(grid, m, scratch, gsel);
      for (std::size_t k = 0; k < m; ++k) {
        const std::uint32_t cell = grid_cell[gsel.indices[k]];
        const T s = gsel.values[k];
        cells[(t * h + a) * m + k] = cell;
        scores[(t * h + a) * m + k] = s;
        axpy<T>(s, p.values.row(cell), y.row(t));
      }
    }
  }
  if (cache != nullptr) {
    cache->x = copy_of(x);
    cache->q_row = std::move(q_row);
    cache->q_col = std::move(q_col);
    cache->s_row = std::move(s_row);
    cache->s_col = std::move(s_col);
    cache->cells = std::move(cells);
    cache->scores = std::move(scores);
  }
  return y;
}

template <typename T>
void pkm_backward(const PkmParams<T>& p, const PkmCache<T>& cache, ConstMatrixView<T> dy,
                  PkmParams<T>& grads, MatrixView<T> dx) {
  if (cache.x.rows() != dy.rows) throw UsageError("pkm_backward: missing or mismatched forward cache");
  const std::size_t tokens = dy.rows;
  const std::size_t h = p.heads, n = p.n, dk = p.key_dim, m = p.top_m;
  Matrix<T> ds_row(tokens, h * n), ds_col(tokens, h * n);
  for (std::size_t t = 0; t < tokens; ++t) {
    std::span<const T> dyt(dy.data + t * dy.stride, dy.cols);
    for (std::size_t a = 0; a < h; ++a) {
      for (std::size_t k = 0; k < m; ++k) {
        const std::uint32_t cell = cache.cells[(t * h + a) * m + k];
        const T s = cache.scores[(t * h + a) * m + k];
        const T g = static_cast<T>(dot<T>(p.values.row(cell), dyt));
        axpy<T>(s, dyt, grads.values.row(cell));
        ds_row(t, a * n + cell / n) += g;
        ds_col(t, a * n + cell % n) += g;
      }
    }
  }
  Matrix<T> dq_row(tokens, h * dk), dq_col(tokens, h * dk);
  for (std::size_t a = 0; a < h; ++a) {
    ConstMatrixView<T> kr(p.key_row.data() + a * n * dk, n, dk);
    ConstMatrixView<T> kc(p.key_col.data() + a * n * dk, n, dk);
    auto dsr = ConstMatrixView<T>(ds_row).col_block(a * n, n);
    auto dsc = ConstMatrixView<T>(ds_col).col_block(a * n, n);
    gemm<T>(dsr, Trans::kNo, kr, Trans::kNo, MatrixView<T>(dq_row).col_block(a * dk, dk));
    gemm<T>(dsc, Trans::kNo, kc, Trans::kNo, MatrixView<T>(dq_col).col_block(a * dk, dk));
    gemm<T>(dsr, Trans::kYes, ConstMatrixView<T>(cache.q_row).col_block(a * dk, dk), Trans::kNo,
            MatrixView<T>(grads.key_row.data() + a * n * dk, n, dk), T{1}, T{1});
    gemm<T>(dsc, Trans::kYes, ConstMatrixView<T>(cache.q_col).col_block(a * dk, dk), Trans::kNo,
            MatrixView<T>(grads.key_col.data() + a * n * dk, n, dk), T{1}, T{1});
  }
  gemm<T>(dq_row, Trans::kYes, cache.x, Trans::kNo, grads.query_row, T{1}, T{1});
  gemm<T>(dq_col, Trans::kYes, cache.x, Trans::kNo, grads.query_col, T{1}, T{1});
  gemm<T>(dq_row, Trans::kNo, p.query_row, Trans::kNo, dx, T{1}, T{1});
  gemm<T>(dq_col, Trans::kNo, p.query_col, Trans::kNo, dx, T{1}, T{1});
}

#define UMV2_INSTANTIATE(T)                                                                        \
  template FfnParams<T> ffn_init<T>(std::size_t, std::size_t, std::size_t, RngStream&);           \
  template Matrix<T> ffn_forward<T>(const FfnParams<T>&, ConstMatrixView<T>, FfnCache<T>*);       \
  template void ffn_backward<T>(const FfnParams<T>&, const FfnCache<T>&, ConstMatrixView<T>,      \
                                FfnParams<T>&, MatrixView<T>);                                    \
  template struct MoeParams<T>;                                                                   \
  template MoeParams<T> moe_init<T>(std::size_t, std::size_t, std::size_t, std::size_t,           \
                                    std::size_t, RngStream&);                                     \
  template Matrix<T> moe_forward<T>(const MoeParams<T>&, ConstMatrixView<T>, GateMode, GateStats*, \
                                    MoeCache<T>*);                                                \
  template void moe_backward<T>(const MoeParams<T>&, const MoeCache<T>&, ConstMatrixView<T>,      \
                                MoeParams<T>&, MatrixView<T>);                                    \
  template void moe_balance_backward<T>(const MoeParams<T>&, const MoeCache<T>&, const GateStats&, \
                                        double, MoeParams<T>&, MatrixView<T>);                    \
  template struct PkmParams<T>;                                                                   \
  template PkmParams<T> pkm_init<T>(std::size_t, std::size_t, std::size_t, std::size_t,           \
                                    std::size_t, std::size_t, std::size_t, RngStream&);           \
  template Matrix<T> pkm_forward<T>(const PkmParams<T>&, ConstMatrixView<T>, PkmCache<T>*);       \
  template void pkm_backward<T>(const PkmParams<T>&, const PkmCache<T>&, ConstMatrixView<T>,      \
                                PkmParams<T>&, MatrixView<T>);

UMV2_INSTANTIATE(float)
UMV2_INSTANTIATE(double)

#undef UMV2_INSTANTIATE

}  // namespace umv2
