// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/aux_losses.hpp"

#include <cmath>

#include "umv2/ops.hpp"
#include "umv2/svd.hpp"

namespace umv2 {

void PenaltyConfig::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("aux.tucker.alpha must be >= 0");
  if (!(tau >= 0.0)) throw ConfigError("aux.tucker.tau must be >= 0");
}

double tucker_penalty(const Matrix<double>& core, const PenaltyConfig& cfg, Matrix<double>* grad, double scale) {
  cfg.validate();
  const std::size_t r = core.rows();
  if (core.cols() != r) throw ConfigError("tucker_penalty: core must be square");
  if (r < 2 || cfg.alpha == 0.0) return 0.0;
  const SvdResult svd = svd_small(core);
  const double c = cfg.alpha / static_cast<double>(r - 1);
  double loss = 0.0;
  std::vector<double> d_sigma(r, 0.0);
  for (std::size_t i = 1; i < r; ++i) {
    const double e = svd.singular_values[i] - cfg.tau;
    if (e > 0.0) {
      loss += c * e * e;
      d_sigma[i] = scale * 2.0 * c * e;
    }
  }
  if (grad != nullptr && loss > 0.0) {
    const Matrix<double> dc = svd_backward(svd, d_sigma, nullptr, nullptr);
    axpy<double>(1.0, dc.flat(), grad->flat());
  }
  return loss;
}

template <typename T>
double tucker_penalty_all(const Matrix<T>& cores, std::size_t rank, const PenaltyConfig& cfg, Matrix<T>* grad) {
  if (cores.cols() != rank * rank || cores.rows() == 0) throw ConfigError("tucker_penalty_all: cores must be pairs x r^2");
  const double inv = 1.0 / static_cast<double>(cores.rows());
  double total = 0.0;
  for (std::size_t pair = 0; pair < cores.rows(); ++pair) {
    Matrix<double> c(rank, rank);
    for (std::size_t i = 0; i < rank * rank; ++i) c.flat()[i] = static_cast<double>(cores(pair, i));
    Matrix<double> g(rank, rank);
    total += tucker_penalty(c, cfg, grad != nullptr ? &g : nullptr, inv);
    if (grad != nullptr) {
      for (std::size_t i = 0; i < rank * rank; ++i) (*grad)(pair, i) += static_cast<T>(g.flat()[i]);
    }
  }
  return total * inv;
}

double balance_loss_from_stats(const BalanceStats& s, double beta) {
  if (s.tokens == 0) throw DomainError("balance loss needs at least one token");
  const double n = static_cast<double>(s.n);
  const double t = static_cast<double>(s.tokens);
  double sum = 0.0;
  for (std::size_t i = 0; i < s.pairs * s.n; ++i) {
    sum += static_cast<double>(s.row_counts[i]) / t * s.row_prob[i];
    sum += static_cast<double>(s.col_counts[i]) / t * s.col_prob[i];
  }
  return beta * n * sum / (2.0 * static_cast<double>(s.pairs));
}

namespace {

// Logits of one axis: sum_k v_k S[(head * r + k) * n + i].
template <typename T>
void axis_logits(std::span<const T> s, const Matrix<double>& vecs, std::size_t head, std::size_t rank, std::size_t n,
                 std::vector<double>& out) {
  out.assign(n, 0.0);
  for (std::size_t k = 0; k < rank; ++k) {
    const double v = vecs(k, 0);
    const T* row = s.data() + (head * rank + k) * n;
    for (std::size_t i = 0; i < n; ++i) out[i] += v * static_cast<double>(row[i]);
  }
}

}  // namespace

template <typename T>
BalanceResult ultramem_balance_loss(const RetrievalParams<T>& p, const RetrievalConfig& cfg,
                                    const RetrievalCache<T>& cache, double beta, AxisGrads<T>* axis,
                                    RetrievalParams<T>* grads) {
  const std::size_t tokens = cache.s_row.rows();
  if (tokens == 0) throw DomainError("balance loss needs at least one token");
  if (cache.svd.size() != cfg.pairs()) throw UsageError("ultramem_balance_loss: missing forward cache");
  const std::size_t n = cfg.n, r = cfg.rank, h = cfg.heads, pairs = cfg.pairs();
  BalanceResult res;
  BalanceStats& st = res.stats;
  st.tokens = tokens;
  st.n = n;
  st.pairs = pairs;
  st.axis_width = cfg.axis_width();
  st.row_counts.assign(pairs * n, 0);
  st.col_counts.assign(pairs * n, 0);
  st.row_prob.assign(pairs * n, 0.0);
  st.col_prob.assign(pairs * n, 0.0);

  // Forward: counts and mean probabilities; keep per-token probabilities for
  // the backward pass.
  std::vector<double> prob_row(tokens * pairs * n), prob_col(tokens * pairs * n), logits;
  for (std::size_t t = 0; t < tokens; ++t) {
    auto sr = cache.s_row.row(t);
    auto sc = cache.s_col.row(t);
    for (std::size_t a = 0; a < h; ++a) {
      for (std::size_t b = 0; b < h; ++b) {
        const std::size_t pair = a * h + b;
        const SvdResult& svd = cache.svd[pair];
        const AxisCandidates cand = prune_candidates<T>(sr, sc, cfg, a, b, svd);
        for (auto i : cand.top_rows) ++st.row_counts[pair * n + i];
        for (auto j : cand.top_cols) ++st.col_counts[pair * n + j];
        double* pr = prob_row.data() + (t * pairs + pair) * n;
        double* pc = prob_col.data() + (t * pairs + pair) * n;
        axis_logits<T>(sr, svd.left, a, r, n, logits);
        softmax<double>(logits);
        std::copy(logits.begin(), logits.end(), pr);
        axis_logits<T>(sc, svd.right, b, r, n, logits);
        softmax<double>(logits);
        std::copy(logits.begin(), logits.end(), pc);
        for (std::size_t i = 0; i < n; ++i) {
          st.row_prob[pair * n + i] += pr[i];
          st.col_prob[pair * n + i] += pc[i];
        }
      }
    }
  }
  const double inv_t = 1.0 / static_cast<double>(tokens);
  for (auto& v : st.row_prob) v *= inv_t;
  for (auto& v : st.col_prob) v *= inv_t;
  res.loss = balance_loss_from_stats(st, beta);
  if (axis == nullptr && grads == nullptr) return res;

  // dLoss/dP[t, pair, i] = beta N f_i / (2 pairs T).
  const double coef = beta * static_cast<double>(n) / (2.0 * static_cast<double>(pairs)) * inv_t * inv_t;
  if (axis != nullptr && (axis->d_s_row.rows() != tokens || axis->d_s_row.cols() != cache.s_row.cols())) {
    axis->d_s_row = Matrix<T>(tokens, cache.s_row.cols());
    axis->d_s_col = Matrix<T>(tokens, cache.s_col.cols());
  }
  std::vector<Matrix<double>> d_left(pairs, Matrix<double>(r, r)), d_right(pairs, Matrix<double>(r, r));
  std::vector<double> dp(n), dz(n);
  for (std::size_t t = 0; t < tokens; ++t) {
    auto sr = cache.s_row.row(t);
    auto sc = cache.s_col.row(t);
    for (std::size_t a = 0; a < h; ++a) {
      for (std::size_t b = 0; b < h; ++b) {
        const std::size_t pair = a * h + b;
        const SvdResult& svd = cache.svd[pair];
        for (int side = 0; side < 2; ++side) {
          const bool rows = side == 0;
          const std::size_t head = rows ? a : b;
          const auto& counts = rows ? st.row_counts : st.col_counts;
          const double* prob = (rows ? prob_row : prob_col).data() + (t * pairs + pair) * n;
          for (std::size_t i = 0; i < n; ++i) dp[i] = coef * static_cast<double>(counts[pair * n + i]);
          std::fill(dz.begin(), dz.end(), 0.0);
          softmax_backward<double>(std::span<const double>(prob, n), dp, dz);
          const Matrix<double>& vecs = rows ? svd.left : svd.right;
          std::span<const T> s = rows ? sr : sc;
          Matrix<double>& dvec = rows ? d_left[pair] : d_right[pair];
          for (std::size_t k = 0; k < r; ++k) {
            const std::size_t off = (head * r + k) * n;
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(s[off + i]) * dz[i];
            dvec(k, 0) += acc;
            if (axis != nullptr) {
              T* ds = (rows ? axis->d_s_row : axis->d_s_col).row(t).data() + off;
              const double v = vecs(k, 0);
              for (std::size_t i = 0; i < n; ++i) ds[i] += static_cast<T>(v * dz[i]);
            }
          }
        }
      }
    }
  }
  if (grads != nullptr) {
    std::vector<double> zero_sigma(r, 0.0);
    for (std::size_t pair = 0; pair < pairs; ++pair) {
      const Matrix<double> dc = svd_backward(cache.svd[pair], zero_sigma, &d_left[pair], &d_right[pair]);
      for (std::size_t i = 0; i < r * r; ++i) grads->cores(pair, i) += static_cast<T>(dc.flat()[i]);
    }
  }
  (void)p;
  return res;
}

template double tucker_penalty_all<float>(const Matrix<float>&, std::size_t, const PenaltyConfig&, Matrix<float>*);
template double tucker_penalty_all<double>(const Matrix<double>&, std::size_t, const PenaltyConfig&, Matrix<double>*);
template BalanceResult ultramem_balance_loss<float>(const RetrievalParams<float>&, const RetrievalConfig&,
                                                    const RetrievalCache<float>&, double, AxisGrads<float>*,
                                                    RetrievalParams<float>*);
template BalanceResult ultramem_balance_loss<double>(const RetrievalParams<double>&, const RetrievalConfig&,
                                                     const RetrievalCache<double>&, double, AxisGrads<double>*,
                                                     RetrievalParams<double>*);

}  // namespace umv2
