// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>

#include "doctest.h"
#include "umv2/aux_losses.hpp"
#include "umv2/gradcheck.hpp"
#include "umv2/svd.hpp"

using namespace umv2;

namespace {

Matrix<double> randn(std::size_t r, std::size_t c, RngStream& rng, double s = 1.0) {
  Matrix<double> m(r, c);
  rng.fill_normal(m.flat(), 0.0, s);
  return m;
}

Matrix<double> matmul(const Matrix<double>& a, const Matrix<double>& b) {
  Matrix<double> c(a.rows(), b.cols());
  gemm<double>(a, Trans::kNo, b, Trans::kNo, c);
  return c;
}

Matrix<double> random_orthogonal(std::size_t r, RngStream& rng) { return svd_small(randn(r, r, rng)).left; }

}  // namespace

TEST_CASE("tucker penalty examples") {
  Matrix<double> c(2, 2, std::vector<double>{3, 0, 0, 0.5});
  CHECK(tucker_penalty(c, {1.0, 0.3}) == doctest::Approx(0.04).epsilon(1e-12));
  CHECK(std::abs(tucker_penalty(c, {1.0, 0.3}) - 0.04) <= 1e-10);
  CHECK(tucker_penalty(c, {1.0, 0.6}) == 0.0);
  CHECK(tucker_penalty(c, {0.0, 0.3}) == 0.0);
  Matrix<double> one(1, 1, std::vector<double>{5});
  CHECK(tucker_penalty(one, {1.0, 0.0}) == 0.0);
  CHECK_THROWS_AS(tucker_penalty(c, {-1.0, 0.3}), ConfigError);
  // r = 3: alpha / 2 * ((2 - 1)^2 + (1.5 - 1)^2).
  Matrix<double> d(3, 3, std::vector<double>{4, 0, 0, 0, 1.5, 0, 0, 0, 2});
  CHECK(tucker_penalty(d, {1.0, 1.0}) == doctest::Approx(0.5 * (1.0 + 0.25)));
}

TEST_CASE("tucker penalty depends only on singular values") {
  RngStream rng(21, 0);
  for (int it = 0; it < 100; ++it) {
    const std::size_t r = 2 + rng.below(4);
    auto c = randn(r, r, rng);
    const PenaltyConfig cfg{0.7, 0.2};
    const double base = tucker_penalty(c, cfg);
    const auto rotated = matmul(matmul(random_orthogonal(r, rng), c), random_orthogonal(r, rng));
    CHECK(std::abs(tucker_penalty(rotated, cfg) - base) <= 1e-10);
  }
}

TEST_CASE("tucker penalty gradient matches finite differences") {
  RngStream rng(22, 0);
  std::size_t done = 0;
  while (done < 20) {
    const std::size_t r = 2 + rng.below(3);
    auto c = randn(1, r * r, rng);
    Matrix<double> cm(r, r, std::vector<double>(c.flat().begin(), c.flat().end()));
    const auto sv = svd_small(cm).singular_values;
    const PenaltyConfig cfg{1.3, 0.25};
    // Keep away from the hinge and from repeated singular values.
    bool ok = true;
    for (std::size_t i = 0; i < r; ++i) {
      ok &= std::abs(sv[i] - cfg.tau) > 1e-3;
      if (i > 0) ok &= sv[i - 1] - sv[i] > 1e-3;
    }
    if (!ok) continue;
    Matrix<double> g(1, r * r);
    tucker_penalty_all<double>(c, r, cfg, &g);
    auto loss = [&] { return tucker_penalty_all<double>(c, r, cfg); };
    auto res = check_gradients(loss, {{"cores", &c, &g}});
    CHECK(res.max_rel_error <= 1e-4);
    ++done;
  }
}

TEST_CASE("balance loss from statistics") {
  BalanceStats s;
  s.tokens = 10;
  s.n = 4;
  s.pairs = 1;
  s.axis_width = 2;
  s.row_counts = {5, 5, 5, 5};  // T m_axis / N each
  s.col_counts = {5, 5, 5, 5};
  s.row_prob = {0.25, 0.25, 0.25, 0.25};
  s.col_prob = s.row_prob;
  CHECK(balance_loss_from_stats(s, 0.5) == doctest::Approx(0.5 * 2));
  CHECK(balance_loss_from_stats(s, 0.0) == 0.0);

  // Concentrate counts on the most probable key.
  s.row_prob = {0.4, 0.3, 0.2, 0.1};
  s.col_prob = s.row_prob;
  const double uniform = balance_loss_from_stats(s, 1.0);
  s.row_counts = {20, 0, 0, 0};
  s.col_counts = {20, 0, 0, 0};
  CHECK(balance_loss_from_stats(s, 1.0) > uniform);

  s.tokens = 0;
  CHECK_THROWS_AS(balance_loss_from_stats(s, 1.0), DomainError);
}

TEST_CASE("balance statistics and gradients on retrieval") {
  RngStream rng(23, 0);
  for (int it = 0; it < 20; ++it) {
    RetrievalConfig cfg;
    cfg.input_dim = 6;
    cfg.n = 3 + rng.below(6);
    cfg.key_dim = 4;
    cfg.rank = 1 + rng.below(3);
    cfg.heads = 1 + rng.below(2);
    cfg.axis_top_m = 1 + rng.below(cfg.n);
    cfg.top_m = 1 + rng.below(4);
    auto p = retrieval_init<double>(cfg, rng);
    rng.fill_normal(p.cores.flat(), 0.0, 1.0);
    auto x = randn(3, cfg.input_dim, rng);
    const double beta = 0.3;

    RetrievalCache<double> cache;
    retrieval_forward<double>(p, cfg, x, cache);
    auto g = RetrievalParams<double>::zeros_like(p);
    AxisGrads<double> axis;
    auto res = ultramem_balance_loss<double>(p, cfg, cache, beta, &axis, &g);
    const auto& st = res.stats;
    for (std::size_t pair = 0; pair < cfg.pairs(); ++pair) {
      std::uint64_t rc = 0, cc = 0;
      double rp = 0, cp = 0;
      for (std::size_t i = 0; i < cfg.n; ++i) {
        rc += st.row_counts[pair * cfg.n + i];
        cc += st.col_counts[pair * cfg.n + i];
        rp += st.row_prob[pair * cfg.n + i];
        cp += st.col_prob[pair * cfg.n + i];
      }
      CHECK(rc == 3 * cfg.axis_width());
      CHECK(cc == 3 * cfg.axis_width());
      CHECK(rp == doctest::Approx(1.0));
      CHECK(cp == doctest::Approx(1.0));
    }
    Matrix<double> dx(3, cfg.input_dim);
    retrieval_backward_axes<double>(p, cfg, cache, axis, g, dx);

    std::vector<std::uint32_t> sig;
    auto loss = [&] {
      RetrievalCache<double> c;
      retrieval_forward<double>(p, cfg, x, c);
      auto r = ultramem_balance_loss<double>(p, cfg, c, beta);
      sig.clear();
      for (auto v : r.stats.row_counts) sig.push_back(static_cast<std::uint32_t>(v));
      for (auto v : r.stats.col_counts) sig.push_back(static_cast<std::uint32_t>(v));
      return r.loss;
    };
    std::vector<GradEntry> entries;
    std::vector<Matrix<double>*> gp;
    g.for_each([&](const std::string&, Matrix<double>& m) { gp.push_back(&m); });
    std::size_t i = 0;
    p.for_each([&](const std::string& name, Matrix<double>& m) { entries.push_back({name, &m, gp[i++]}); });
    entries.push_back({"x", &x, &dx});
    auto fd = check_gradients(loss, entries, {}, [&] { return sig; });
    INFO("instance " << it << " worst " << fd.worst);
    CHECK(fd.checked > 0);
    CHECK(fd.max_rel_error <= 1e-4);
  }
}
