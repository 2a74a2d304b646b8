// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "umv2/gradcheck.hpp"
#include "umv2/tdqkr.hpp"

using namespace umv2;

namespace {

Matrix<double> randn(std::size_t r, std::size_t c, RngStream& rng, double s = 1.0) {
  Matrix<double> m(r, c);
  rng.fill_normal(m.flat(), 0.0, s);
  return m;
}

RetrievalConfig small_config(std::size_t n, std::size_t rank, std::size_t heads, std::size_t m, std::size_t axis) {
  RetrievalConfig c;
  c.input_dim = 6;
  c.n = n;
  c.key_dim = 4;
  c.rank = rank;
  c.heads = heads;
  c.top_m = m;
  c.axis_top_m = axis;
  return c;
}

// Random dense cores so the tucker structure is exercised beyond the init.
void randomize_cores(RetrievalParams<double>& p, RngStream& rng) { rng.fill_normal(p.cores.flat(), 0.0, 1.0); }

}  // namespace

TEST_CASE("config validation") {
  auto c = small_config(4, 2, 1, 3, 2);
  CHECK_NOTHROW(c.validate());
  c.rank = 9;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config(4, 2, 1, 17, 2);
  CHECK_THROWS_AS(c.validate(), ConfigError);  // 16 candidate cells (two-sided covers all 4 rows)
  c.prune = PruneMode::kTopOnly;
  c.top_m = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);  // 2 x 2 candidates
  CHECK(parse_prune_mode("top_only") == PruneMode::kTopOnly);
  CHECK_THROWS_AS(parse_prune_mode("x"), ConfigError);
}

TEST_CASE("score_axes matches a scalar triple loop") {
  RngStream rng(1);
  auto cfg = small_config(5, 2, 2, 3, 3);
  auto p = retrieval_init<double>(cfg, rng);
  p.gain_q = 1.3;
  p.gain_k = 0.7;
  auto x = randn(3, cfg.input_dim, rng);
  RetrievalCache<double> cache;
  score_axes<double>(p, cfg, x, cache);
  const std::size_t dk = cfg.key_dim;
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t a = 0; a < cfg.heads; ++a) {
      for (std::size_t k = 0; k < cfg.rank; ++k) {
        const std::size_t blk = a * cfg.rank + k;
        std::vector<double> q(dk);
        double ss = 0.0;
        for (std::size_t d = 0; d < dk; ++d) {
          for (std::size_t i = 0; i < cfg.input_dim; ++i) q[d] += p.query_row(blk * dk + d, i) * x(t, i);
          ss += q[d] * q[d];
        }
        const double qn = p.gain_q / std::sqrt(ss / dk + 1e-6);
        for (std::size_t i = 0; i < cfg.n; ++i) {
          double kk = 0.0, s = 0.0;
          for (std::size_t d = 0; d < dk; ++d) kk += p.key_row(blk * cfg.n + i, d) * p.key_row(blk * cfg.n + i, d);
          const double kn = p.gain_k / std::sqrt(kk / dk + 1e-6);
          for (std::size_t d = 0; d < dk; ++d) s += q[d] * qn * p.key_row(blk * cfg.n + i, d) * kn;
          CHECK(std::abs(cache.s_row(t, blk * cfg.n + i) - s) <= 1e-12);
        }
      }
    }
  }
  Matrix<double> zero(2, cfg.input_dim);
  score_axes<double>(p, cfg, zero, cache);
  for (double v : cache.s_row.flat()) CHECK(v == 0.0);
  Matrix<double> bad(1, 4);
  CHECK_THROWS_AS(score_axes<double>(p, cfg, bad, cache), ConfigError);
}

TEST_CASE("prune_candidates examples") {
  auto cfg = small_config(4, 2, 1, 1, 2);
  cfg.prune = PruneMode::kTopOnly;
  // Token axis scores laid out (k * n + i).
  std::vector<double> s_row{0.1, 0.9, -0.4, 0.5, /* k=1 */ 3.0, -2.0, 1.0, 0.0};
  std::vector<double> s_col{0.2, -0.1, 0.8, 0.3, /* k=1 */ 0.0, 5.0, 0.0, 0.0};
  Matrix<double> core(2, 2);
  core(0, 0) = 3.0;
  core(1, 1) = 0.5;
  auto svd = svd_small(core);
  auto c = prune_candidates<double>(s_row, s_col, cfg, 0, 0, svd);
  CHECK(c.rows == std::vector<std::uint32_t>{1, 3});  // top-2 of the first rank column
  CHECK(c.cols == std::vector<std::uint32_t>{2, 3});
  auto proxy = axis_proxy<double>(s_row, cfg, 0, svd, true);
  CHECK(proxy[1] == doctest::Approx(0.9 * std::sqrt(3.0)));

  cfg.prune = PruneMode::kTwoSided;
  auto two = prune_candidates<double>(s_row, s_col, cfg, 0, 0, svd);
  CHECK(two.rows == std::vector<std::uint32_t>{0, 1, 2, 3});

  cfg.axis_top_m = 4;
  cfg.prune = PruneMode::kTopOnly;
  auto all = prune_candidates<double>(s_row, s_col, cfg, 0, 0, svd);
  CHECK(all.rows.size() == 4);
  CHECK(all.cols.size() == 4);
}

TEST_CASE("rank-1 pruning equals brute force on 1000 instances") {
  RngStream rng(2);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(32);
    const std::size_t m = 1 + rng.below(std::min<std::size_t>(n, 16));
    const std::size_t axis = m + rng.below(n - m + 1);
    auto cfg = small_config(n, 1, 1 + rng.below(2), m, axis);
    auto p = retrieval_init<double>(cfg, rng);
    randomize_cores(p, rng);
    auto x = randn(2, cfg.input_dim, rng);
    RetrievalCache<double> cache;
    retrieval_forward<double>(p, cfg, x, cache);
    for (std::size_t t = 0; t < 2; ++t) {
      auto ref = exhaustive_topm<double>(cache.s_row.row(t), cache.s_col.row(t), p.cores, cfg);
      for (std::size_t k = 0; k < m; ++k) {
        if (ref.indices[k] != cache.selected.raw[t * m + k] || ref.values[k] != cache.selected.scores[t * m + k]) {
          ++mismatches;
          break;
        }
      }
    }
  }
  CHECK(mismatches == 0);
}

TEST_CASE("exhaustive candidate width equals brute force for any rank") {
  RngStream rng(3);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(32);
    const std::size_t rank = 1 + rng.below(4);
    const std::size_t heads = 1 + rng.below(2);
    const std::size_t m = 1 + rng.below(std::min<std::size_t>(heads * heads * n * n, 32));
    auto cfg = small_config(n, rank, heads, m, n);
    cfg.prune = trial % 2 == 0 ? PruneMode::kTopOnly : PruneMode::kTwoSided;
    auto p = retrieval_init<double>(cfg, rng);
    randomize_cores(p, rng);
    auto x = randn(1, cfg.input_dim, rng);
    RetrievalCache<double> cache;
    retrieval_forward<double>(p, cfg, x, cache);
    auto ref = exhaustive_topm<double>(cache.s_row.row(0), cache.s_col.row(0), p.cores, cfg);
    if (ref.indices != cache.selected.raw || ref.values != cache.selected.scores) ++mismatches;
  }
  CHECK(mismatches == 0);
}

TEST_CASE("selected indices are unique and in range; zero input picks the lowest cells") {
  RngStream rng(4);
  auto cfg = small_config(6, 2, 2, 10, 3);
  auto p = retrieval_init<double>(cfg, rng);
  auto x = randn(5, cfg.input_dim, rng);
  RetrievalCache<double> cache;
  retrieval_forward<double>(p, cfg, x, cache);
  for (std::size_t t = 0; t < 5; ++t) {
    std::set<std::uint32_t> seen;
    for (std::size_t k = 0; k < cfg.top_m; ++k) {
      const auto v = cache.selected.raw[t * cfg.top_m + k];
      CHECK(v < cfg.num_values());
      seen.insert(v);
      if (k > 0) CHECK(cache.selected.scores[t * cfg.top_m + k - 1] >= cache.selected.scores[t * cfg.top_m + k]);
    }
    CHECK(seen.size() == cfg.top_m);
  }
  Matrix<double> zero(1, cfg.input_dim);
  retrieval_forward<double>(p, cfg, zero, cache);
  std::vector<std::uint32_t> expect{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  CHECK(cache.selected.raw == expect);
}

TEST_CASE("two-stage recall beats random pruning") {
  RngStream rng(5);
  auto cfg = small_config(16, 2, 1, 8, 4);
  double recall_prune = 0.0, recall_random = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto p = retrieval_init<double>(cfg, rng);
    randomize_cores(p, rng);
    auto x = randn(1, cfg.input_dim, rng);
    RetrievalCache<double> cache;
    retrieval_forward<double>(p, cfg, x, cache);
    auto ref = exhaustive_topm<double>(cache.s_row.row(0), cache.s_col.row(0), p.cores, cfg);
    std::set<std::uint32_t> truth(ref.indices.begin(), ref.indices.end());
    for (auto v : cache.selected.raw) recall_prune += truth.count(v);

    // Random pruning: the same candidate budget drawn uniformly per axis.
    const std::size_t width = cfg.axis_candidates();
    std::vector<std::uint32_t> rows(16), cols(16);
    for (std::uint32_t i = 0; i < 16; ++i) rows[i] = cols[i] = i;
    for (std::size_t i = 0; i < width; ++i) {
      std::swap(rows[i], rows[i + rng.below(16 - i)]);
      std::swap(cols[i], cols[i + rng.below(16 - i)]);
    }
    std::vector<double> scores;
    std::vector<std::uint32_t> raw;
    for (std::size_t i = 0; i < width; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        scores.push_back(cell_score<double>(cache.s_row.row(0), cache.s_col.row(0), p.cores, cfg, 0, rows[i], cols[j]));
        raw.push_back(rows[i] * 16 + cols[j]);
      }
    }
    auto sel = top_m(scores, cfg.top_m);
    for (auto k : sel.indices) recall_random += truth.count(raw[k]);
  }
  MESSAGE("recall two-stage " << recall_prune / 8000.0 << " random " << recall_random / 8000.0);
  CHECK(recall_prune >= recall_random);
}

TEST_CASE("index shuffle") {
  IndexShuffle s(17, 1000);
  std::vector<std::uint32_t> sorted = s.permutation();
  std::sort(sorted.begin(), sorted.end());
  for (std::uint32_t i = 0; i < 1000; ++i) CHECK(sorted[i] == i);
  CHECK(IndexShuffle(17, 1000).permutation() == s.permutation());
  CHECK(IndexShuffle(18, 1000).permutation() != s.permutation());
  CHECK(IndexShuffle(5, 1).apply(0) == 0);
  CHECK_THROWS_AS(s.apply(1000), DomainError);
  CHECK_THROWS_AS(shuffle_indices(4, 1, 4), DomainError);
  CHECK(shuffle_indices(3, 17, 1000) == s.apply(3));

  // No n-aligned block lands entirely inside one block.
  for (std::size_t n : {4, 8, 16}) {
    const std::size_t total = n * n;
    IndexShuffle sh(99, total);
    for (std::size_t blk = 0; blk < total / n; ++blk) {
      std::set<std::size_t> targets;
      for (std::size_t i = 0; i < n; ++i) targets.insert(sh.apply(blk * n + i) / n);
      CHECK(targets.size() > 1);
    }
  }
}

TEST_CASE("retrieval backward matches finite differences") {
  RngStream rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.below(6), rank = 1 + rng.below(3), heads = 1 + rng.below(2);
    const std::size_t axis = 1 + rng.below(n);
    auto cfg = small_config(n, rank, heads, 1, axis);
    cfg.top_m = 1 + rng.below(std::min<std::size_t>(8, heads * heads * cfg.axis_candidates() * cfg.axis_candidates()));
    auto p = retrieval_init<double>(cfg, rng);
    randomize_cores(p, rng);
    p.gain_q = 0.8;
    p.gain_k = 1.2;
    auto x = randn(2, cfg.input_dim, rng);
    std::vector<double> w(2 * cfg.top_m);
    for (auto& v : w) v = rng.normal();

    RetrievalCache<double> cache;
    retrieval_forward<double>(p, cfg, x, cache);
    auto g = RetrievalParams<double>::zeros_like(p);
    AxisGrads<double> axis_g;
    retrieval_backward_scores<double>(p, cfg, cache, w, axis_g, g);
    Matrix<double> dx(2, cfg.input_dim);
    retrieval_backward_axes<double>(p, cfg, cache, axis_g, g, dx);

    std::vector<std::uint32_t> sel;
    auto loss = [&] {
      RetrievalCache<double> c;
      retrieval_forward<double>(p, cfg, x, c);
      sel = c.selected.raw;
      return dot<double>(c.selected.scores, w);
    };
    std::vector<GradEntry> entries;
    std::vector<Matrix<double>*> gp;
    g.for_each([&](const std::string&, Matrix<double>& m) { gp.push_back(&m); });
    std::size_t i = 0;
    p.for_each([&](const std::string& name, Matrix<double>& m) { entries.push_back({name, &m, gp[i++]}); });
    entries.push_back({"x", &x, &dx});
    auto res = check_gradients(loss, entries, {}, [&] { return sel; });
    CHECK_MESSAGE(res.max_rel_error <= 1e-4, res.worst);
    CHECK(res.checked > 0);
  }
}
