// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/tdqkr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "umv2/ops.hpp"

namespace umv2 {

PruneMode parse_prune_mode(const std::string& s) {
  if (s == "two_sided") return PruneMode::kTwoSided;
  if (s == "top_only") return PruneMode::kTopOnly;
  throw ConfigError("unknown prune mode '" + s + "'");
}

std::string to_string(PruneMode m) { return m == PruneMode::kTwoSided ? "two_sided" : "top_only"; }

std::size_t RetrievalConfig::axis_candidates() const {
  const std::size_t w = axis_width();
  if (prune == PruneMode::kTopOnly) return w;
  return std::min(2 * w, n);
}

void RetrievalConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("retrieval." + what);
  };
  need(input_dim > 0, "input_dim must be positive");
  need(n > 0, "n must be positive");
  need(key_dim > 0, "key_dim must be positive");
  need(rank >= 1 && rank <= kMaxSvdRank, "rank must be in [1, " + std::to_string(kMaxSvdRank) + "]");
  need(heads >= 1, "heads must be positive");
  need(axis_top_m >= 1, "axis_top_m must be positive");
  need(num_values() <= std::numeric_limits<std::uint32_t>::max(), "heads^2 * n^2 exceeds 32-bit indexing");
  const std::size_t c = axis_candidates();
  need(top_m >= 1 && top_m <= pairs() * c * c,
       "top_m = " + std::to_string(top_m) + " exceeds the " + std::to_string(pairs() * c * c) +
           " candidate cells");
}

template <typename T>
RetrievalParams<T> RetrievalParams<T>::zeros_like(const RetrievalParams& o) {
  RetrievalParams z;
  z.query_row = Matrix<T>(o.query_row.rows(), o.query_row.cols());
  z.query_col = Matrix<T>(o.query_col.rows(), o.query_col.cols());
  z.key_row = Matrix<T>(o.key_row.rows(), o.key_row.cols());
  z.key_col = Matrix<T>(o.key_col.rows(), o.key_col.cols());
  z.cores = Matrix<T>(o.cores.rows(), o.cores.cols());
  z.gain_q = o.gain_q;
  z.gain_k = o.gain_k;
  return z;
}

template <typename T>
RetrievalParams<T> retrieval_init(const RetrievalConfig& cfg, RngStream& rng) {
  cfg.validate();
  const std::size_t hr = cfg.heads * cfg.rank;
  const double qs = std::sqrt(2.0 / (5.0 * static_cast<double>(cfg.input_dim)));
  RetrievalParams<T> p;
  p.query_row = Matrix<T>(hr * cfg.key_dim, cfg.input_dim);
  p.query_col = Matrix<T>(hr * cfg.key_dim, cfg.input_dim);
  p.key_row = Matrix<T>(hr * cfg.n, cfg.key_dim);
  p.key_col = Matrix<T>(hr * cfg.n, cfg.key_dim);
  rng.fill_normal(p.query_row.flat(), 0.0, qs);
  rng.fill_normal(p.query_col.flat(), 0.0, qs);
  rng.fill_normal(p.key_row.flat(), 0.0, 1.0);
  rng.fill_normal(p.key_col.flat(), 0.0, 1.0);
  p.cores = Matrix<T>(cfg.pairs(), cfg.rank * cfg.rank);
  for (std::size_t q = 0; q < cfg.pairs(); ++q) {
    for (std::size_t k = 0; k < cfg.rank; ++k) {
      for (std::size_t l = 0; l < cfg.rank; ++l) {
        const double base = k == l ? 1.0 / static_cast<double>(k + 1) : 0.0;
        p.cores(q, k * cfg.rank + l) = static_cast<T>(base + rng.normal(0.0, 0.01));
      }
    }
  }
  return p;
}

std::vector<SvdResult> core_svds(const Matrix<double>& cores, std::size_t rank) {
  if (cores.cols() != rank * rank) throw ConfigError("core_svds: cores must have rank^2 columns");
  std::vector<SvdResult> out;
  out.reserve(cores.rows());
  for (std::size_t q = 0; q < cores.rows(); ++q) {
    Matrix<double> c(rank, rank, std::vector<double>(cores.row(q).begin(), cores.row(q).end()));
    out.push_back(svd_small(c));
  }
  return out;
}

namespace {

void check_token_spans(std::size_t row_len, std::size_t col_len, const RetrievalConfig& cfg) {
  const std::size_t want = cfg.heads * cfg.rank * cfg.n;
  if (row_len != want || col_len != want) {
    throw ConfigError("retrieval: axis score length " + std::to_string(row_len) + "/" + std::to_string(col_len) +
                      ", expected " + std::to_string(want));
  }
}

// axis_proxy into a reused buffer.
template <typename T>
void axis_proxy_into(std::span<const T> s, const RetrievalConfig& cfg, std::size_t head, const SvdResult& core_svd,
                     bool row_side, std::vector<double>& proxy) {
  const std::size_t n = cfg.n, r = cfg.rank;
  const Matrix<double>& vecs = row_side ? core_svd.left : core_svd.right;
  const double scale = std::sqrt(core_svd.singular_values[0]);
  proxy.assign(n, 0.0);
  for (std::size_t k = 0; k < r; ++k) {
    const double v = scale * vecs(k, 0);
    const T* sk = s.data() + (head * r + k) * n;
    for (std::size_t i = 0; i < n; ++i) proxy[i] += v * static_cast<double>(sk[i]);
  }
}

// Per-axis candidate set from proxy scores.
void select_axis(const std::vector<double>& proxy, std::size_t width, PruneMode mode, std::vector<std::uint32_t>& scratch,
                 TopM<double>& sel, std::vector<double>& neg, std::vector<std::uint32_t>& out,
                 std::vector<std::uint32_t>* top_out) {
  const std::size_t n = proxy.size();
  top_m_into<double>(proxy, width, scratch, sel);
  if (top_out != nullptr) top_out->assign(sel.indices.begin(), sel.indices.end());
  if (mode == PruneMode::kTopOnly || width == n) {
    out.assign(sel.indices.begin(), sel.indices.end());
    std::sort(out.begin(), out.end());
    return;
  }
  if (2 * width >= n) {
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<std::uint32_t>(i);
    return;
  }
  out.assign(sel.indices.begin(), sel.indices.end());
  neg.resize(n);
  for (std::size_t i = 0; i < n; ++i) neg[i] = -proxy[i];
  top_m_into<double>(neg, width, scratch, sel);
  out.insert(out.end(), sel.indices.begin(), sel.indices.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
}

// w[l] = sum_k S_row[a, k, i] C[k, l]
template <typename T>
void row_weights(std::span<const T> s_row, const T* core, std::size_t r, std::size_t n, std::size_t a, std::size_t i,
                 double* w) {
  for (std::size_t l = 0; l < r; ++l) w[l] = 0.0;
  for (std::size_t k = 0; k < r; ++k) {
    const double rk = s_row[(a * r + k) * n + i];
    for (std::size_t l = 0; l < r; ++l) w[l] += rk * static_cast<double>(core[k * r + l]);
  }
}

template <typename T>
T weighted_col(std::span<const T> s_col, const double* w, std::size_t r, std::size_t n, std::size_t b, std::size_t j) {
  double s = 0.0;
  for (std::size_t l = 0; l < r; ++l) s += w[l] * static_cast<double>(s_col[(b * r + l) * n + j]);
  return static_cast<T>(s);
}

template <typename T>
struct SelectScratch {
  std::vector<double> proxy, neg;
  std::vector<std::uint32_t> idx, rows, cols;
  TopM<double> sel;
  std::vector<T> cand_scores;
  std::vector<std::uint32_t> cand_raw;
  std::vector<double> w;
  TopM<T> top;
};

template <typename T>
void select_token(std::span<const T> s_row, std::span<const T> s_col, const Matrix<T>& cores,
                  const std::vector<SvdResult>& svds, const RetrievalConfig& cfg, SelectScratch<T>& sc, TopM<T>& out) {
  const std::size_t n = cfg.n, r = cfg.rank, h = cfg.heads;
  const std::size_t width = cfg.axis_width();
  sc.cand_scores.clear();
  sc.cand_raw.clear();
  sc.w.resize(r);
  for (std::size_t a = 0; a < h; ++a) {
    for (std::size_t b = 0; b < h; ++b) {
      const std::size_t pair = a * h + b;
      const SvdResult& svd = svds[pair];
      axis_proxy_into<T>(s_row, cfg, a, svd, true, sc.proxy);
      select_axis(sc.proxy, width, cfg.prune, sc.idx, sc.sel, sc.neg, sc.rows, nullptr);
      axis_proxy_into<T>(s_col, cfg, b, svd, false, sc.proxy);
      select_axis(sc.proxy, width, cfg.prune, sc.idx, sc.sel, sc.neg, sc.cols, nullptr);
      const T* core = cores.row(pair).data();
      for (std::uint32_t i : sc.rows) {
        row_weights<T>(s_row, core, r, n, a, i, sc.w.data());
        for (std::uint32_t j : sc.cols) {
          sc.cand_scores.push_back(weighted_col<T>(s_col, sc.w.data(), r, n, b, j));
          sc.cand_raw.push_back(static_cast<std::uint32_t>(pair * n * n + i * n + j));
        }
      }
    }
  }
  if (sc.cand_scores.size() < cfg.top_m) {
    throw ConfigError("exact_subgrid_topm: " + std::to_string(sc.cand_scores.size()) + " candidates for top_m = " +
                      std::to_string(cfg.top_m));
  }
  top_m_into<T>(sc.cand_scores, cfg.top_m, sc.idx, sc.top);
  out.indices.resize(cfg.top_m);
  out.values = sc.top.values;
  for (std::size_t k = 0; k < cfg.top_m; ++k) out.indices[k] = sc.cand_raw[sc.top.indices[k]];
}

template <typename T>
void normalize_rows(const Matrix<T>& raw, std::size_t block, double gain, Matrix<T>& out, std::vector<T>& inv) {
  out = Matrix<T>(raw.rows(), raw.cols());
  const std::size_t blocks = raw.cols() / block;
  inv.assign(raw.rows() * blocks, T{0});
  for (std::size_t t = 0; t < raw.rows(); ++t) {
    for (std::size_t c = 0; c < blocks; ++c) {
      std::span<const T> src(raw.row(t).data() + c * block, block);
      std::span<T> dst(out.row(t).data() + c * block, block);
      inv[t * blocks + c] = rms_normalize<T>(src, dst, static_cast<T>(gain));
    }
  }
}

template <typename T>
void normalize_backward(const Matrix<T>& raw, std::size_t block, double gain, const std::vector<T>& inv,
                        const Matrix<T>& d_norm, Matrix<T>& d_raw) {
  const std::size_t blocks = raw.cols() / block;
  for (std::size_t t = 0; t < raw.rows(); ++t) {
    for (std::size_t c = 0; c < blocks; ++c) {
      rms_normalize_backward<T>(std::span<const T>(raw.row(t).data() + c * block, block), inv[t * blocks + c],
                                static_cast<T>(gain), std::span<const T>(d_norm.row(t).data() + c * block, block),
                                std::span<T>(d_raw.row(t).data() + c * block, block));
    }
  }
}

}  // namespace

template <typename T>
std::vector<double> axis_proxy(std::span<const T> s, const RetrievalConfig& cfg, std::size_t head,
                               const SvdResult& core_svd, bool row_side) {
  std::vector<double> proxy;
  axis_proxy_into<T>(s, cfg, head, core_svd, row_side, proxy);
  return proxy;
}

template <typename T>
AxisCandidates prune_candidates(std::span<const T> s_row, std::span<const T> s_col, const RetrievalConfig& cfg,
                                std::size_t a, std::size_t b, const SvdResult& core_svd) {
  check_token_spans(s_row.size(), s_col.size(), cfg);
  if (cfg.axis_top_m < 1) throw ConfigError("prune_candidates: axis_top_m must be positive");
  AxisCandidates out;
  std::vector<std::uint32_t> scratch;
  TopM<double> sel;
  std::vector<double> neg;
  select_axis(axis_proxy<T>(s_row, cfg, a, core_svd, true), cfg.axis_width(), cfg.prune, scratch, sel, neg, out.rows,
              &out.top_rows);
  select_axis(axis_proxy<T>(s_col, cfg, b, core_svd, false), cfg.axis_width(), cfg.prune, scratch, sel, neg, out.cols,
              &out.top_cols);
  return out;
}

template <typename T>
T cell_score(std::span<const T> s_row, std::span<const T> s_col, const Matrix<T>& cores, const RetrievalConfig& cfg,
             std::size_t pair, std::size_t row, std::size_t col) {
  std::vector<double> w(cfg.rank);
  row_weights<T>(s_row, cores.row(pair).data(), cfg.rank, cfg.n, pair / cfg.heads, row, w.data());
  return weighted_col<T>(s_col, w.data(), cfg.rank, cfg.n, pair % cfg.heads, col);
}

template <typename T>
void exact_subgrid_topm(std::span<const T> s_row, std::span<const T> s_col, const Matrix<T>& cores,
                        const std::vector<SvdResult>& svds, const RetrievalConfig& cfg, TopM<T>& out) {
  check_token_spans(s_row.size(), s_col.size(), cfg);
  if (svds.size() != cfg.pairs()) throw ConfigError("exact_subgrid_topm: one SVD per head pair required");
  SelectScratch<T> sc;
  select_token<T>(s_row, s_col, cores, svds, cfg, sc, out);
}

template <typename T>
TopM<T> exhaustive_topm(std::span<const T> s_row, std::span<const T> s_col, const Matrix<T>& cores,
                        const RetrievalConfig& cfg) {
  check_token_spans(s_row.size(), s_col.size(), cfg);
  const std::size_t n = cfg.n, r = cfg.rank, h = cfg.heads;
  std::vector<T> grid(cfg.num_values());
  std::vector<double> w(r);
  for (std::size_t a = 0; a < h; ++a) {
    for (std::size_t b = 0; b < h; ++b) {
      const std::size_t pair = a * h + b;
      for (std::size_t i = 0; i < n; ++i) {
        row_weights<T>(s_row, cores.row(pair).data(), r, n, a, i, w.data());
        for (std::size_t j = 0; j < n; ++j) grid[pair * n * n + i * n + j] = weighted_col<T>(s_col, w.data(), r, n, b, j);
      }
    }
  }
  return top_m(grid, cfg.top_m);
}

template <typename T>
void score_axes(const RetrievalParams<T>& p, const RetrievalConfig& cfg, ConstMatrixView<T> x,
                RetrievalCache<T>& cache) {
  cfg.validate();
  if (x.cols != cfg.input_dim) {
    throw ConfigError("score_axes: input width " + std::to_string(x.cols) + ", expected " +
                      std::to_string(cfg.input_dim));
  }
  const std::size_t tokens = x.rows, hr = cfg.heads * cfg.rank, dk = cfg.key_dim, n = cfg.n;
  if (p.query_row.rows() != hr * dk || p.key_row.rows() != hr * n || p.key_row.cols() != dk ||
      p.cores.rows() != cfg.pairs() || p.cores.cols() != cfg.rank * cfg.rank) {
    throw ConfigError("score_axes: parameter shapes do not match the retrieval config");
  }
  cache.x = Matrix<T>(tokens, x.cols);
  for (std::size_t t = 0; t < tokens; ++t) std::copy_n(x.data + t * x.stride, x.cols, cache.x.row(t).data());
  cache.q_row_raw = Matrix<T>(tokens, hr * dk);
  cache.q_col_raw = Matrix<T>(tokens, hr * dk);
  gemm<T>(x, Trans::kNo, p.query_row, Trans::kYes, cache.q_row_raw);
  gemm<T>(x, Trans::kNo, p.query_col, Trans::kYes, cache.q_col_raw);
  normalize_rows(cache.q_row_raw, dk, p.gain_q, cache.q_row, cache.q_row_inv);
  normalize_rows(cache.q_col_raw, dk, p.gain_q, cache.q_col, cache.q_col_inv);
  normalize_rows(p.key_row, dk, p.gain_k, cache.k_row, cache.k_row_inv);
  normalize_rows(p.key_col, dk, p.gain_k, cache.k_col, cache.k_col_inv);
  cache.s_row = Matrix<T>(tokens, hr * n);
  cache.s_col = Matrix<T>(tokens, hr * n);
  for (std::size_t c = 0; c < hr; ++c) {
    gemm<T>(ConstMatrixView<T>(cache.q_row).col_block(c * dk, dk), Trans::kNo,
            ConstMatrixView<T>(cache.k_row).row_block(c * n, n), Trans::kYes,
            MatrixView<T>(cache.s_row).col_block(c * n, n));
    gemm<T>(ConstMatrixView<T>(cache.q_col).col_block(c * dk, dk), Trans::kNo,
            ConstMatrixView<T>(cache.k_col).row_block(c * n, n), Trans::kYes,
            MatrixView<T>(cache.s_col).col_block(c * n, n));
  }
}

template <typename T>
void retrieval_forward(const RetrievalParams<T>& p, const RetrievalConfig& cfg, ConstMatrixView<T> x,
                       RetrievalCache<T>& cache) {
  score_axes<T>(p, cfg, x, cache);
  if (!p.cores.all_finite()) throw NumericError("retrieval_forward: non-finite tucker core");
  cache.svd = core_svds(p.cores, cfg.rank);
  const std::size_t tokens = x.rows, m = cfg.top_m;
  cache.selected.m = m;
  cache.selected.raw.assign(tokens * m, 0);
  cache.selected.scores.assign(tokens * m, T{0});
  SelectScratch<T> sc;
  TopM<T> top;
  for (std::size_t t = 0; t < tokens; ++t) {
    select_token<T>(cache.s_row.row(t), cache.s_col.row(t), p.cores, cache.svd, cfg, sc, top);
    std::copy(top.indices.begin(), top.indices.end(), cache.selected.raw.begin() + static_cast<std::ptrdiff_t>(t * m));
    std::copy(top.values.begin(), top.values.end(), cache.selected.scores.begin() + static_cast<std::ptrdiff_t>(t * m));
  }
}

template <typename T>
void retrieval_backward_scores(const RetrievalParams<T>& p, const RetrievalConfig& cfg,
                               const RetrievalCache<T>& cache, std::span<const T> d_scores, AxisGrads<T>& axis,
                               RetrievalParams<T>& grads) {
  const std::size_t tokens = cache.s_row.rows(), m = cfg.top_m, n = cfg.n, r = cfg.rank, h = cfg.heads;
  if (cache.selected.raw.size() != tokens * m || d_scores.size() != tokens * m) {
    throw UsageError("retrieval_backward_scores: missing or mismatched forward cache");
  }
  if (axis.d_s_row.rows() != tokens || axis.d_s_row.cols() != cache.s_row.cols()) {
    axis.d_s_row = Matrix<T>(tokens, cache.s_row.cols());
    axis.d_s_col = Matrix<T>(tokens, cache.s_col.cols());
  }
  std::vector<double> rk(r), ql(r);
  for (std::size_t t = 0; t < tokens; ++t) {
    auto sr = cache.s_row.row(t);
    auto scol = cache.s_col.row(t);
    auto dsr = axis.d_s_row.row(t);
    auto dsc = axis.d_s_col.row(t);
    for (std::size_t k = 0; k < m; ++k) {
      const double ds = d_scores[t * m + k];
      if (ds == 0.0) continue;
      const GridCell cell = decode_cell(cache.selected.raw[t * m + k], n);
      const std::size_t a = cell.pair / h, b = cell.pair % h;
      const T* core = p.cores.row(cell.pair).data();
      T* dcore = grads.cores.row(cell.pair).data();
      for (std::size_t q = 0; q < r; ++q) {
        rk[q] = sr[(a * r + q) * n + cell.row];
        ql[q] = scol[(b * r + q) * n + cell.col];
      }
      for (std::size_t q = 0; q < r; ++q) {
        double row_acc = 0.0, col_acc = 0.0;
        for (std::size_t l = 0; l < r; ++l) {
          row_acc += static_cast<double>(core[q * r + l]) * ql[l];
          col_acc += rk[l] * static_cast<double>(core[l * r + q]);
          dcore[q * r + l] += static_cast<T>(ds * rk[q] * ql[l]);
        }
        dsr[(a * r + q) * n + cell.row] += static_cast<T>(ds * row_acc);
        dsc[(b * r + q) * n + cell.col] += static_cast<T>(ds * col_acc);
      }
    }
  }
}

template <typename T>
void retrieval_backward_axes(const RetrievalParams<T>& p, const RetrievalConfig& cfg,
                             const RetrievalCache<T>& cache, const AxisGrads<T>& axis, RetrievalParams<T>& grads,
                             MatrixView<T> dx) {
  const std::size_t tokens = cache.s_row.rows(), hr = cfg.heads * cfg.rank, dk = cfg.key_dim, n = cfg.n;
  if (axis.d_s_row.rows() != tokens || cache.q_row.rows() != tokens) {
    throw UsageError("retrieval_backward_axes: missing or mismatched forward cache");
  }
  Matrix<T> dq_row(tokens, hr * dk), dq_col(tokens, hr * dk);
  Matrix<T> dk_row(hr * n, dk), dk_col(hr * n, dk);
  for (std::size_t c = 0; c < hr; ++c) {
    auto dsr = ConstMatrixView<T>(axis.d_s_row).col_block(c * n, n);
    auto dsc = ConstMatrixView<T>(axis.d_s_col).col_block(c * n, n);
    gemm<T>(dsr, Trans::kNo, ConstMatrixView<T>(cache.k_row).row_block(c * n, n), Trans::kNo,
            MatrixView<T>(dq_row).col_block(c * dk, dk));
    gemm<T>(dsc, Trans::kNo, ConstMatrixView<T>(cache.k_col).row_block(c * n, n), Trans::kNo,
            MatrixView<T>(dq_col).col_block(c * dk, dk));
    gemm<T>(dsr, Trans::kYes, ConstMatrixView<T>(cache.q_row).col_block(c * dk, dk), Trans::kNo,
            MatrixView<T>(dk_row).row_block(c * n, n));
    gemm<T>(dsc, Trans::kYes, ConstMatrixView<T>(cache.q_col).col_block(c * dk, dk), Trans::kNo,
            MatrixView<T>(dk_col).row_block(c * n, n));
  }
  normalize_backward(p.key_row, dk, p.gain_k, cache.k_row_inv, dk_row, grads.key_row);
  normalize_backward(p.key_col, dk, p.gain_k, cache.k_col_inv, dk_col, grads.key_col);
  Matrix<T> dqr_raw(tokens, hr * dk), dqc_raw(tokens, hr * dk);
  normalize_backward(cache.q_row_raw, dk, p.gain_q, cache.q_row_inv, dq_row, dqr_raw);
  normalize_backward(cache.q_col_raw, dk, p.gain_q, cache.q_col_inv, dq_col, dqc_raw);
  gemm<T>(dqr_raw, Trans::kYes, cache.x, Trans::kNo, grads.query_row, T{1}, T{1});
  gemm<T>(dqc_raw, Trans::kYes, cache.x, Trans::kNo, grads.query_col, T{1}, T{1});
  gemm<T>(dqr_raw, Trans::kNo, p.query_row, Trans::kNo, dx, T{1}, T{1});
  gemm<T>(dqc_raw, Trans::kNo, p.query_col, Trans::kNo, dx, T{1}, T{1});
}

IndexShuffle::IndexShuffle(std::uint64_t seed, std::size_t size) : seed_(seed), perm_(size) {
  if (size > std::numeric_limits<std::uint32_t>::max()) throw ConfigError("IndexShuffle: size exceeds 32 bits");
  for (std::size_t i = 0; i < size; ++i) perm_[i] = static_cast<std::uint32_t>(i);
  RngStream rng(seed, 0x5348);
  for (std::size_t i = size; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(perm_[i - 1], perm_[j]);
  }
}

std::uint32_t IndexShuffle::apply(std::uint64_t raw_index) const {
  if (raw_index >= perm_.size()) {
    throw DomainError("shuffle: index " + std::to_string(raw_index) + " outside [0, " + std::to_string(perm_.size()) +
                      ")");
  }
  return perm_[raw_index];
}

std::uint32_t shuffle_indices(std::uint64_t raw_index, std::uint64_t layer_seed, std::size_t n_total) {
  if (raw_index >= n_total) throw DomainError("shuffle_indices: index out of range");
  return IndexShuffle(layer_seed, n_total).apply(raw_index);
}

#define UMV2_INSTANTIATE(T)                                                                                           \
  template struct RetrievalParams<T>;                                                                                 \
  template RetrievalParams<T> retrieval_init<T>(const RetrievalConfig&, RngStream&);                                  \
  template void score_axes<T>(const RetrievalParams<T>&, const RetrievalConfig&, ConstMatrixView<T>,                 \
                              RetrievalCache<T>&);                                                                    \
  template std::vector<double> axis_proxy<T>(std::span<const T>, const RetrievalConfig&, std::size_t,                \
                                             const SvdResult&, bool);                                                 \
  template AxisCandidates prune_candidates<T>(std::span<const T>, std::span<const T>, const RetrievalConfig&,        \
                                              std::size_t, std::size_t, const SvdResult&);                           \
  template T cell_score<T>(std::span<const T>, std::span<const T>, const Matrix<T>&, const RetrievalConfig&,         \
                           std::size_t, std::size_t, std::size_t);                                                    \
  template void exact_subgrid_topm<T>(std::span<const T>, std::span<const T>, const Matrix<T>&,                      \
                                      const std::vector<SvdResult>&, const RetrievalConfig&, TopM<T>&);               \
  template TopM<T> exhaustive_topm<T>(std::span<const T>, std::span<const T>, const Matrix<T>&,                      \
                                      const RetrievalConfig&);                                                        \
  template void retrieval_forward<T>(const RetrievalParams<T>&, const RetrievalConfig&, ConstMatrixView<T>,          \
                                     RetrievalCache<T>&);                                                             \
  template void retrieval_backward_scores<T>(const RetrievalParams<T>&, const RetrievalConfig&,                      \
                                             const RetrievalCache<T>&, std::span<const T>, AxisGrads<T>&,             \
                                             RetrievalParams<T>&);                                                    \
  template void retrieval_backward_axes<T>(const RetrievalParams<T>&, const RetrievalConfig&,                        \
                                           const RetrievalCache<T>&, const AxisGrads<T>&, RetrievalParams<T>&,        \
                                           MatrixView<T>);

UMV2_INSTANTIATE(float)
UMV2_INSTANTIATE(double)

#undef UMV2_INSTANTIATE

}  // namespace umv2
