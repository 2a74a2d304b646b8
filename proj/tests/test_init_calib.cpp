// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "umv2/baselines.hpp"
#include "umv2/init_calib.hpp"
#include "umv2/memory_layer.hpp"
#include "umv2/ops.hpp"

using namespace umv2;

namespace {

double stddev(const Matrix<float>& m) {
  double s = 0, s2 = 0;
  for (float v : m.flat()) {
    s += v;
    s2 += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(m.size());
  return std::sqrt(s2 / n - (s / n) * (s / n));
}

}  // namespace

TEST_CASE("FFN output variance formula") {
  CHECK(ffn_output_variance(4, 24) == doctest::Approx(0.0053333333333).epsilon(1e-10));
  CHECK(ffn_output_variance(1, 1) == doctest::Approx(0.032));
  CHECK(ffn_output_variance(3, 10) == doctest::Approx(2 * ffn_output_variance(3, 20)));
  CHECK_THROWS_AS(ffn_output_variance(0, 4), DomainError);
  CHECK_THROWS_AS(ffn_output_variance(4, 0), DomainError);
  CHECK_THROWS_AS(ffn_output_variance(-1, 4), DomainError);
}

TEST_CASE("inner activation variance: truncated estimate and real SiLU") {
  CHECK(ffn_inner_variance_truncated() == doctest::Approx(0.16).epsilon(1e-12));
  // Monte-Carlo of silu(g) * l, g, l ~ N(0, 0.4).
  RngStream rng(31, 0);
  const double s = std::sqrt(0.4);
  double acc = 0;
  const int n = 2000000;
  for (int i = 0; i < n; ++i) {
    const double v = silu(rng.normal(0, s)) * rng.normal(0, s);
    acc += v * v;
  }
  CHECK(ffn_inner_variance_exact() == doctest::Approx(acc / n).epsilon(0.01));
  CHECK(ffn_inner_variance_exact() < 0.06);
  CHECK(ffn_output_variance_exact(4, 24) ==
        doctest::Approx(ffn_output_variance(4, 24) * ffn_inner_variance_exact() / 0.16));
}

TEST_CASE("sigma_V solver inverts the memory variance") {
  RngStream rng(32, 0);
  for (int i = 0; i < 100; ++i) {
    const double h = 64 + rng.below(4096), k = 1 + 7 * rng.uniform(), m = 1 + rng.below(1024);
    const double heads = 1 + rng.below(4), ss = 2 * rng.uniform(), dp = 8 + rng.below(512), dv = 8 + rng.below(512);
    const double L = 1 + rng.below(64);
    const double sv = solve_sigma_v(h, k, m, heads, ss, dp, dv, L);
    const double mem = memory_output_variance(sv, ss, h, m, heads, dp, dv);
    CHECK(std::abs(mem - ffn_output_variance(k, L)) / ffn_output_variance(k, L) <= 1e-12);
    const double target = 1e-3 + rng.uniform();
    const double sv2 = solve_sigma_v_for_target(target, h, m, heads, ss, dp, dv);
    CHECK(std::abs(memory_output_variance(sv2, ss, h, m, heads, dp, dv) - target) / target <= 1e-12);
  }
  const double a = solve_sigma_v(768, 4, 32, 1, 0.5, 192, 192, 20);
  const double b = solve_sigma_v(768, 4, 128, 1, 0.5, 192, 192, 20);
  CHECK(b * b == doctest::Approx(a * a / 2).epsilon(1e-12));
  CHECK_THROWS_AS(solve_sigma_v(0, 4, 32, 1, 0.5, 192, 192, 20), DomainError);
  CHECK_THROWS_AS(solve_sigma_v(768, 4, 32, 1, 0.5, 192, -1, 20), DomainError);
}

TEST_CASE("norm-gain calibration") {
  RetrievalConfig cfg;
  cfg.input_dim = 32;
  cfg.n = 16;
  cfg.key_dim = 8;
  cfg.top_m = 8;
  cfg.axis_top_m = 8;
  RngStream rng(33, 0);
  const auto base = retrieval_init<double>(cfg, rng);

  auto p = base;
  RngStream c1(34, 0);
  const auto rep = calibrate_sigma_s<double>(p, cfg, c1);
  CHECK(std::abs(rep.tuned_mean - 1.0) <= 1e-3);
  CHECK(rep.mean_score >= 0.95);
  CHECK(rep.mean_score <= 1.05);
  CHECK(rep.sigma_s > 0.0);
  CHECK(rep.samples == 10000);
  CHECK(p.gain_q == rep.gamma_q);

  SUBCASE("bit-for-bit reproducible") {
    auto q = base;
    RngStream c2(34, 0);
    const auto again = calibrate_sigma_s<double>(q, cfg, c2);
    CHECK(again.gamma_q == rep.gamma_q);
    CHECK(again.sigma_s == rep.sigma_s);
    CHECK(again.mean_score == rep.mean_score);
  }
  SUBCASE("doubling the gains first reaches the same operating point") {
    auto q = base;
    q.gain_q *= 2;
    q.gain_k *= 2;
    RngStream c2(34, 0);
    const auto again = calibrate_sigma_s<double>(q, cfg, c2);
    CHECK(again.mean_score == doctest::Approx(rep.mean_score).epsilon(0.02));
    CHECK(again.gamma_q * again.gamma_k == doctest::Approx(rep.gamma_q * rep.gamma_k).epsilon(0.02));
  }
  SUBCASE("degenerate cores cannot be bracketed") {
    auto q = base;
    q.cores.set_zero();
    RngStream c2(34, 0);
    CHECK_THROWS_AS(calibrate_sigma_s<double>(q, cfg, c2), CalibrationError);
  }
  SUBCASE("too few samples") {
    auto q = base;
    RngStream c2(34, 0);
    CalibOptions opt;
    opt.samples = 100;
    CHECK_THROWS_AS(calibrate_sigma_s<double>(q, cfg, c2, opt), DomainError);
  }
}

TEST_CASE("memory output matches the FFN at the 227M/1.2B layer shape") {
  // h 768, k_inner 4, m 32, one head, d_prev = d_v = 192, L 20.
  MemoryLayerConfig cfg;
  cfg.hidden = 768;
  cfg.n = 360;
  cfg.key_dim = 192;
  cfg.top_m = 32;
  cfg.value_dim = 192;
  cfg.prevalue_dim = 192;
  const std::size_t L = 20, k_inner = 4, samples = 4096;
  RngStream rng(35, 0);
  auto p = umv2_init<float>(cfg, 7, rng);
  RngStream cal(36, 0);
  const auto rep = calibrate_sigma_s<float>(p.retrieval, cfg.retrieval(), cal);
  const double target = ffn_output_variance_exact(k_inner, L);
  const double sigma_v = solve_sigma_v_for_target(target, 768, 32, 1, rep.sigma_s, 192, 192);
  auto table = value_table_init<float>(cfg.num_values(), 192, 192, sigma_v, rng);
  ValuePool<float> pool{{&table}};
  const auto ffn = ffn_init<float>(768, k_inner * 768, L, rng);

  Matrix<float> x(samples, 768);
  rng.fill_normal(x.flat(), 0.0, 1.0);
  const double mem_std = stddev(umv2_forward<float>(p, cfg, pool, x));
  const double ffn_std = stddev(ffn_forward<float>(ffn, x));
  INFO("sigma_s " << rep.sigma_s << " sigma_V " << sigma_v << " mem " << mem_std << " ffn " << ffn_std);
  CHECK(ffn_std == doctest::Approx(std::sqrt(target)).epsilon(0.05));
  CHECK(mem_std / ffn_std >= 0.85);
  CHECK(mem_std / ffn_std <= 1.15);

  // Zero sigma_V: the harness reports a silent memory layer.
  auto zero = value_table_init<float>(cfg.num_values(), 192, 192, 0.0, rng);
  ValuePool<float> zpool{{&zero}};
  Matrix<float> x1(64, 768);
  rng.fill_normal(x1.flat(), 0.0, 1.0);
  CHECK(stddev(umv2_forward<float>(p, cfg, zpool, x1)) == 0.0);
}
