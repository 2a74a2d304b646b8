// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "umv2/baselines.hpp"
#include "umv2/gradcheck.hpp"
#include "umv2/ops.hpp"
#include "umv2/topm.hpp"

using namespace umv2;

namespace {

Matrix<double> randn(std::size_t r, std::size_t c, RngStream& rng, double s = 1.0) {
  Matrix<double> m(r, c);
  rng.fill_normal(m.flat(), 0.0, s);
  return m;
}

template <typename P>
std::vector<GradEntry> entries_of(P& params, P& grads) {
  std::vector<GradEntry> out;
  std::vector<Matrix<double>*> gp;
  grads.for_each([&](const std::string&, Matrix<double>& g) { gp.push_back(&g); });
  std::size_t i = 0;
  params.for_each([&](const std::string& name, Matrix<double>& p) { out.push_back({name, &p, gp[i++]}); });
  return out;
}

}  // namespace

TEST_CASE("ffn: zero input and scalar-loop oracle") {
  RngStream rng(1);
  auto p = ffn_init<double>(6, 10, 2, rng);
  Matrix<double> zero(3, 6);
  auto y0 = ffn_forward<double>(p, zero);
  for (double v : y0.flat()) CHECK(v == 0.0);

  auto x = randn(4, 6, rng);
  auto y = ffn_forward<double>(p, x);
  for (std::size_t t = 0; t < 4; ++t) {
    std::vector<double> inner(10);
    for (std::size_t j = 0; j < 10; ++j) {
      double a = 0, b = 0;
      for (std::size_t i = 0; i < 6; ++i) {
        a += p.w1(j, i) * x(t, i);
        b += p.w2(j, i) * x(t, i);
      }
      inner[j] = b * a / (1.0 + std::exp(-a));
    }
    for (std::size_t o = 0; o < 6; ++o) {
      double s = 0;
      for (std::size_t j = 0; j < 10; ++j) s += p.w3(o, j) * inner[j];
      CHECK(std::abs(y(t, o) - s) <= 1e-12);
    }
  }
  Matrix<double> wrong(2, 5);
  CHECK_THROWS_AS(ffn_forward<double>(p, wrong), ConfigError);
}

TEST_CASE("ffn: backward matches finite differences") {
  RngStream rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 2 + rng.below(12), k = 2 + rng.below(20), t = 1 + rng.below(4);
    auto p = ffn_init<double>(h, k, 2, rng);
    for (auto* w : {&p.w1, &p.w2, &p.w3}) rng.fill_normal(w->flat(), 0.0, 0.5);
    auto x = randn(t, h, rng);
    auto r = randn(t, h, rng);
    FfnCache<double> cache;
    ffn_forward<double>(p, x, &cache);
    auto g = FfnParams<double>::zeros(h, k);
    Matrix<double> dx(t, h);
    ffn_backward<double>(p, cache, r, g, dx);
    auto entries = entries_of(p, g);
    entries.push_back({"x", &x, &dx});
    auto res = check_gradients([&] { return project(ffn_forward<double>(p, x), r); }, entries);
    CHECK_MESSAGE(res.max_rel_error <= 1e-4, res.worst);
  }
}

TEST_CASE("moe: gate modes parse") {
  CHECK(parse_gate_mode("raw") == GateMode::kRaw);
  CHECK(parse_gate_mode(to_string(GateMode::kTopMThenSoftmax)) == GateMode::kTopMThenSoftmax);
  CHECK_THROWS_AS(parse_gate_mode("nope"), ConfigError);
}

TEST_CASE("moe: examples") {
  RngStream rng(3);
  SUBCASE("zero input, raw mode") {
    auto p = moe_init<double>(5, 4, 5, 3, 2, rng);
    Matrix<double> x(2, 5);
    auto y = moe_forward<double>(p, x, GateMode::kRaw, nullptr);
    for (double v : y.flat()) CHECK(v == 0.0);
  }
  SUBCASE("m = N raw equals dense sum") {
    auto p = moe_init<double>(5, 4, 6, 2, 2, rng);
    auto x = randn(3, 5, rng);
    auto y = moe_forward<double>(p, x, GateMode::kRaw, nullptr);
    for (std::size_t t = 0; t < 3; ++t) {
      for (std::size_t o = 0; o < 6; ++o) {
        double s = 0.0;
        for (std::size_t e = 0; e < 2; ++e) {
          const double gate = dot<double>(x.row(t), p.gate.row(e));
          for (std::size_t j = 0; j < 4; ++j) {
            double hj = 0.0;
            for (std::size_t i = 0; i < 5; ++i) hj += x(t, i) * p.up[e](i, j);
            s += gate * p.down[e](o, j) * silu(hj);
          }
        }
        CHECK(std::abs(y(t, o) - s) <= 1e-12);
      }
    }
  }
  SUBCASE("m = 1 equals argmax expert alone") {
    auto p = moe_init<double>(5, 4, 5, 6, 1, rng);
    auto x = randn(8, 5, rng);
    auto y = moe_forward<double>(p, x, GateMode::kRaw, nullptr);
    for (std::size_t t = 0; t < 8; ++t) {
      std::size_t best = 0;
      for (std::size_t e = 1; e < 6; ++e) {
        if (dot<double>(x.row(t), p.gate.row(e)) > dot<double>(x.row(t), p.gate.row(best))) best = e;
      }
      MoeParams<double> solo;
      solo.gate = Matrix<double>(1, 5);
      for (std::size_t i = 0; i < 5; ++i) solo.gate(0, i) = p.gate(best, i);
      solo.up = {p.up[best]};
      solo.down = {p.down[best]};
      solo.top_m = 1;
      Matrix<double> xt(1, 5, std::vector<double>(x.row(t).begin(), x.row(t).end()));
      auto ys = moe_forward<double>(solo, xt, GateMode::kRaw, nullptr);
      for (std::size_t o = 0; o < 5; ++o) CHECK(std::abs(ys(0, o) - y(t, o)) <= 1e-12);
    }
  }
  SUBCASE("m > N rejected") {
    auto p = moe_init<double>(5, 4, 5, 3, 2, rng);
    p.top_m = 4;
    Matrix<double> x(1, 5);
    CHECK_THROWS_AS(moe_forward<double>(p, x, GateMode::kRaw, nullptr), ConfigError);
    CHECK_THROWS_AS(moe_init<double>(5, 4, 5, 3, 4, rng), ConfigError);
  }
}

TEST_CASE("moe: balance loss examples") {
  GateStats uniform{{1, 1, 1, 1}, {1.0, 1.0, 1.0, 1.0}, 4};
  CHECK(moe_balance_loss(uniform, 0.01) == doctest::Approx(0.01));
  GateStats skew{{4, 0, 0, 0}, {1.0, 1.0, 1.0, 1.0}, 4};
  CHECK(moe_balance_loss(skew, 0.01) == doctest::Approx(0.01));
  CHECK(moe_balance_loss(skew, 0.0) == 0.0);
  GateStats empty{{0, 0}, {0.0, 0.0}, 0};
  CHECK_THROWS_AS(moe_balance_loss(empty, 0.1), DomainError);
}

TEST_CASE("moe: backward matches finite differences in every gate mode") {
  RngStream rng(4);
  for (GateMode mode : {GateMode::kRaw, GateMode::kSoftmaxThenTopM, GateMode::kTopMThenSoftmax}) {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t in = 2 + rng.below(8), inner = 2 + rng.below(6), out = 2 + rng.below(8);
      const std::size_t experts = 2 + rng.below(6), m = 1 + rng.below(experts), t = 1 + rng.below(4);
      auto p = moe_init<double>(in, inner, out, experts, m, rng);
      auto x = randn(t, in, rng);
      auto r = randn(t, out, rng);
      MoeCache<double> cache;
      moe_forward<double>(p, x, mode, nullptr, &cache);
      auto g = MoeParams<double>::zeros_like(p);
      Matrix<double> dx(t, in);
      moe_backward<double>(p, cache, r, g, dx);
      auto entries = entries_of(p, g);
      entries.push_back({"x", &x, &dx});
      std::vector<std::uint32_t> sel;
      auto loss = [&] {
        MoeCache<double> c;
        const double l = project(moe_forward<double>(p, x, mode, nullptr, &c), r);
        sel = c.selected;
        return l;
      };
      auto res = check_gradients(loss, entries, {}, [&] { return sel; });
      CHECK_MESSAGE(res.max_rel_error <= 1e-4, to_string(mode) << " " << res.worst);
      CHECK(res.checked > 0);
    }
  }
}

TEST_CASE("moe: balance loss backward matches finite differences") {
  RngStream rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t in = 2 + rng.below(8), experts = 2 + rng.below(6), m = 1 + rng.below(experts);
    const std::size_t t = 1 + rng.below(6);
    auto p = moe_init<double>(in, 3, 3, experts, m, rng);
    auto x = randn(t, in, rng);
    const double beta = 0.5;
    GateStats stats;
    MoeCache<double> cache;
    moe_forward<double>(p, x, GateMode::kSoftmaxThenTopM, &stats, &cache);
    auto g = MoeParams<double>::zeros_like(p);
    Matrix<double> dx(t, in);
    moe_balance_backward<double>(p, cache, stats, beta, g, dx);
    std::vector<std::uint32_t> sel;
    auto loss = [&] {
      GateStats s;
      MoeCache<double> c;
      moe_forward<double>(p, x, GateMode::kSoftmaxThenTopM, &s, &c);
      sel = c.selected;
      return moe_balance_loss(s, beta);
    };
    std::vector<GradEntry> entries{{"gate", &p.gate, &g.gate}, {"x", &x, &dx}};
    auto res = check_gradients(loss, entries, {}, [&] { return sel; });
    CHECK_MESSAGE(res.max_rel_error <= 1e-4, res.worst);
  }
}

namespace {

// Exhaustive grid top-m per head, as sorted cell lists.
std::vector<std::vector<std::uint32_t>> exhaustive_pkm(const PkmParams<double>& p, const Matrix<double>& x,
                                                       std::size_t t) {
  std::vector<std::vector<std::uint32_t>> out;
  for (std::size_t a = 0; a < p.heads; ++a) {
    std::vector<double> qr(p.key_dim), qc(p.key_dim);
    for (std::size_t d = 0; d < p.key_dim; ++d) {
      qr[d] = dot<double>(p.query_row.row(a * p.key_dim + d), x.row(t));
      qc[d] = dot<double>(p.query_col.row(a * p.key_dim + d), x.row(t));
    }
    std::vector<double> grid(p.n * p.n);
    for (std::size_t i = 0; i < p.n; ++i) {
      for (std::size_t j = 0; j < p.n; ++j) {
        grid[i * p.n + j] = dot<double>(p.key_row.row(a * p.n + i), qr) + dot<double>(p.key_col.row(a * p.n + j), qc);
      }
    }
    auto sel = top_m(grid, p.top_m);
    out.push_back(sel.indices);
  }
  return out;
}

}  // namespace

TEST_CASE("pkm: pruned selection equals exhaustive grid on 1000 instances") {
  RngStream rng(6);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(31);
    const std::size_t m = 1 + rng.below(std::min<std::size_t>(n, 16));
    const std::size_t axis = m + rng.below(n - m + 1);
    auto p = pkm_init<double>(6, n, 4, 3, 1 + rng.below(2), m, axis, rng);
    auto x = randn(1, 6, rng);
    PkmCache<double> cache;
    pkm_forward<double>(p, x, &cache);
    auto ref = exhaustive_pkm(p, x, 0);
    for (std::size_t a = 0; a < p.heads; ++a) {
      std::vector<std::uint32_t> got(cache.cells.begin() + static_cast<std::ptrdiff_t>(a * m),
                                     cache.cells.begin() + static_cast<std::ptrdiff_t>((a + 1) * m));
      if (got != ref[a]) ++mismatches;
    }
  }
  CHECK(mismatches == 0);
}

TEST_CASE("pkm: zero input selects lexicographically smallest cells") {
  RngStream rng(7);
  auto p = pkm_init<double>(4, 5, 3, 2, 2, 4, 3, rng);
  Matrix<double> x(1, 4);
  PkmCache<double> cache;
  auto y = pkm_forward<double>(p, x, &cache);
  for (std::size_t a = 0; a < 2; ++a) {
    std::vector<std::uint32_t> got(cache.cells.begin() + static_cast<std::ptrdiff_t>(a * 4),
                                   cache.cells.begin() + static_cast<std::ptrdiff_t>(a * 4 + 4));
    CHECK(got == std::vector<std::uint32_t>{0, 1, 2, 5});
  }
  for (double v : y.flat()) CHECK(v == 0.0);
  CHECK_THROWS_AS(pkm_init<double>(4, 5, 3, 2, 2, 10, 3, rng), ConfigError);
}

TEST_CASE("pkm: backward matches finite differences") {
  RngStream rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t in = 2 + rng.below(10), n = 2 + rng.below(8), dk = 2 + rng.below(4);
    const std::size_t axis = 1 + rng.below(n), m = 1 + rng.below(axis * axis), t = 1 + rng.below(3);
    auto p = pkm_init<double>(in, n, dk, 3, 1 + rng.below(2), m, axis, rng);
    auto x = randn(t, in, rng);
    auto r = randn(t, 3, rng);
    PkmCache<double> cache;
    pkm_forward<double>(p, x, &cache);
    auto g = PkmParams<double>::zeros_like(p);
    Matrix<double> dx(t, in);
    pkm_backward<double>(p, cache, r, g, dx);
    auto entries = entries_of(p, g);
    entries.push_back({"x", &x, &dx});
    std::vector<std::uint32_t> sel;
    auto loss = [&] {
      PkmCache<double> c;
      const double l = project(pkm_forward<double>(p, x, &c), r);
      sel = c.cells;
      return l;
    };
    auto res = check_gradients(loss, entries, {}, [&] { return sel; });
    CHECK_MESSAGE(res.max_rel_error <= 1e-4, res.worst);
  }
}
