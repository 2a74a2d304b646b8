// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include <boost/math/distributions/normal.hpp>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "umv2/matrix.hpp"
#include "umv2/ops.hpp"
#include "umv2/rng.hpp"
#include "umv2/svd.hpp"
#include "umv2/topm.hpp"
#include "umv2/truncnorm.hpp"

using namespace umv2;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Matrix<double> random_matrix(std::size_t r, std::size_t c, RngStream& rng) {
  Matrix<double> m(r, c);
  rng.fill_normal(m.flat(), 0.0, 1.0);
  return m;
}

// Inverse-CDF sampler for N(mu, sigma^2) restricted to [a, b].
Moments sample_truncated(double mu, double sigma, double a, double b, std::size_t n, RngStream& rng) {
  boost::math::normal_distribution<double> std_normal;
  const double lo = std::isfinite(a) ? boost::math::cdf(std_normal, (a - mu) / sigma) : 0.0;
  const double hi = std::isfinite(b) ? boost::math::cdf(std_normal, (b - mu) / sigma) : 1.0;
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = lo + (hi - lo) * rng.uniform();
    const double x = mu + sigma * boost::math::quantile(std_normal, u);
    sum += x;
    sum2 += x * x;
  }
  const double mean = sum / static_cast<double>(n);
  return {mean, sum2 / static_cast<double>(n) - mean * mean};
}

}  // namespace

TEST_CASE("top_m examples") {
  auto a = top_m(std::vector<double>{0.5, 2.0, -1.0}, 1);
  CHECK(a.indices == std::vector<std::uint32_t>{1});
  CHECK(a.values == std::vector<double>{2.0});

  auto b = top_m(std::vector<double>{3, 1, 2}, 3);
  CHECK(b.indices == std::vector<std::uint32_t>{0, 2, 1});

  auto c = top_m(std::vector<double>{1, 1, 0}, 1);
  CHECK(c.indices == std::vector<std::uint32_t>{0});
}

TEST_CASE("top_m rejects bad m and non-finite scores") {
  std::vector<double> s{1.0, 2.0};
  CHECK_THROWS_AS(top_m(s, 0), ConfigError);
  CHECK_THROWS_AS(top_m(s, 3), ConfigError);
  s[1] = std::nan("");
  CHECK_THROWS_AS(top_m(s, 1), NumericError);
}

TEST_CASE("top_m is a projection and full selection sorts") {
  RngStream rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    const std::size_t m = 1 + rng.below(n);
    std::vector<double> s(n);
    // Coarse values so ties are common.
    for (auto& v : s) v = static_cast<double>(rng.below(5));
    auto once = top_m(s, m);
    auto twice = top_m(once.values, m);
    for (std::size_t i = 0; i < m; ++i) CHECK(once.indices[twice.indices[i]] == once.indices[i]);

    auto all = top_m(s, n);
    for (std::size_t i = 1; i < n; ++i) {
      const bool ordered = all.values[i - 1] > all.values[i] ||
                           (all.values[i - 1] == all.values[i] && all.indices[i - 1] < all.indices[i]);
      CHECK(ordered);
    }
  }
}

TEST_CASE("top_m matches a stable full sort for small and large m") {
  RngStream rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(300);
    const std::size_t m = 1 + rng.below(trial % 2 == 0 ? std::min<std::size_t>(n, 8) : n);
    std::vector<float> s(n);
    const std::size_t levels = 2 + rng.below(50);
    for (auto& v : s) v = static_cast<float>(rng.below(levels)) - 10.0f;
    std::vector<std::uint32_t> ref(n);
    std::iota(ref.begin(), ref.end(), std::uint32_t{0});
    std::stable_sort(ref.begin(), ref.end(), [&](std::uint32_t a, std::uint32_t b) { return s[a] > s[b]; });
    ref.resize(m);
    const auto got = top_m(s, m);
    REQUIRE(got.indices == ref);
    for (std::size_t i = 0; i < m; ++i) CHECK(got.values[i] == s[ref[i]]);
  }
}

TEST_CASE("activations") {
  CHECK(silu(0.0) == 0.0);
  std::vector<double> v{0.3, 0.3};
  softmax<double>(v);
  CHECK(v[0] == doctest::Approx(0.5));
  CHECK(v[1] == doctest::Approx(0.5));

  std::vector<double> big{1000.0, 999.0};
  softmax<double>(big);
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));

  RngStream rng(3);
  std::vector<double> g(8), l(8), out(8);
  for (auto& x : g) x = rng.normal();
  for (auto& x : l) x = rng.normal();
  swiglu_inner<double>(g, l, out);
  for (int i = 0; i < 8; ++i) CHECK(out[i] == l[i] * (g[i] * (1.0 / (1.0 + std::exp(-g[i])))));

  for (double x : {-3.0, -0.5, 0.0, 0.7, 4.0}) {
    const double h = 1e-6;
    CHECK(silu_grad(x) == doctest::Approx((silu(x + h) - silu(x - h)) / (2 * h)).epsilon(1e-8));
  }
}

TEST_CASE("rms_normalize backward matches finite differences") {
  RngStream rng(5);
  std::vector<double> x(7), dy(7), dx(7, 0.0), y(7);
  for (auto& v : x) v = rng.normal();
  for (auto& v : dy) v = rng.normal();
  const double gain = 1.7;
  const double inv = rms_normalize<double>(x, y, gain);
  rms_normalize_backward<double>(x, inv, gain, dy, dx);
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto f = [&](double d) {
      auto xp = x;
      xp[i] += d;
      std::vector<double> yp(7);
      rms_normalize<double>(xp, yp, gain);
      return dot<double>(yp, dy);
    };
    const double fd = (f(1e-6) - f(-1e-6)) / 2e-6;
    CHECK(dx[i] == doctest::Approx(fd).epsilon(1e-7));
  }
}

TEST_CASE("rng streams are reproducible and distinct") {
  RngStream a(42, 7), b(42, 7), c(42, 8);
  std::vector<double> va(64), vb(64), vc(64);
  a.fill_normal<double>(va, 0.0, 1.0);
  b.fill_normal<double>(vb, 0.0, 1.0);
  c.fill_normal<double>(vc, 0.0, 1.0);
  CHECK(va == vb);
  CHECK(va != vc);

  RngStream d(1);
  for (int i = 0; i < 1000; ++i) {
    const auto u = d.below(7);
    CHECK(u < 7);
  }
  RngStream late(42, 7, 10);
  RngStream skip(42, 7);
  for (int i = 0; i < 10; ++i) skip.next_u64();
  CHECK(late.next_u64() == skip.next_u64());
}

TEST_CASE("gemm covers all transpose combinations") {
  RngStream rng(9);
  auto a = random_matrix(3, 4, rng);
  auto b = random_matrix(4, 5, rng);
  Matrix<double> ref(3, 5);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j)
      for (int k = 0; k < 4; ++k) ref(i, j) += a(i, k) * b(k, j);

  Matrix<double> at(4, 3), bt(5, 4);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k) at(k, i) = a(i, k);
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 5; ++j) bt(j, k) = b(k, j);

  for (int mode = 0; mode < 4; ++mode) {
    Matrix<double> c(3, 5, 1.0);
    const bool ta = mode & 1, tb = mode & 2;
    gemm<double>(ta ? at : a, ta ? Trans::kYes : Trans::kNo, tb ? bt : b, tb ? Trans::kYes : Trans::kNo,
                 c, 2.0, 1.0);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 5; ++j) CHECK(c(i, j) == doctest::Approx(1.0 + 2.0 * ref(i, j)).epsilon(1e-12));
  }

  Matrix<double> bad(2, 2);
  CHECK_THROWS_AS(gemm<double>(a, Trans::kNo, a, Trans::kNo, bad), ConfigError);

  // Strided sub-views.
  Matrix<double> wide(3, 9);
  gemm<double>(a, Trans::kNo, b, Trans::kNo, MatrixView<double>(wide).col_block(2, 5));
  for (int i = 0; i < 3; ++i) {
    CHECK(wide(i, 0) == 0.0);
    for (int j = 0; j < 5; ++j) CHECK(wide(i, 2 + j) == doctest::Approx(ref(i, j)).epsilon(1e-12));
  }
}

TEST_CASE("svd_small examples") {
  Matrix<double> d(2, 2);
  d(0, 0) = 3.0;
  d(1, 1) = 0.5;
  auto s = svd_small(d);
  CHECK(s.singular_values[0] == doctest::Approx(3.0));
  CHECK(s.singular_values[1] == doctest::Approx(0.5));
  CHECK(std::abs(s.left(0, 0)) == doctest::Approx(1.0));
  CHECK(std::abs(s.right(1, 1)) == doctest::Approx(1.0));

  Matrix<double> eye(2, 2);
  eye(0, 0) = eye(1, 1) = 1.0;
  auto e = svd_small(eye);
  CHECK(e.singular_values[0] == doctest::Approx(1.0));
  CHECK(e.singular_values[1] == doctest::Approx(1.0));

  Matrix<double> zero(3, 3);
  auto z = svd_small(zero);
  CHECK(z.singular_values == std::vector<double>{0.0, 0.0, 0.0});

  Matrix<double> bad(2, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(svd_small(bad), NumericError);
  CHECK_THROWS_AS(svd_small(Matrix<double>(9, 9)), ConfigError);
}

TEST_CASE("svd_small reconstructs 1000 random cores") {
  RngStream rng(2024);
  double worst_rec = 0.0, worst_orth = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t r = 2 + static_cast<std::size_t>(trial % 3);
    auto c = random_matrix(r, r, rng);
    auto s = svd_small(c);
    for (std::size_t i = 1; i < r; ++i) CHECK(s.singular_values[i - 1] >= s.singular_values[i]);
    auto rec = reconstruct(s);
    for (std::size_t i = 0; i < c.size(); ++i) {
      worst_rec = std::max(worst_rec, std::abs(rec.data()[i] - c.data()[i]));
    }
    for (const auto* q : {&s.left, &s.right}) {
      for (std::size_t a = 0; a < r; ++a) {
        for (std::size_t b = 0; b < r; ++b) {
          double d = 0.0;
          for (std::size_t i = 0; i < r; ++i) d += (*q)(i, a) * (*q)(i, b);
          worst_orth = std::max(worst_orth, std::abs(d - (a == b ? 1.0 : 0.0)));
        }
      }
    }
    // Sign convention: largest-magnitude entry of each left vector is positive.
    for (std::size_t j = 0; j < r; ++j) {
      std::size_t arg = 0;
      for (std::size_t i = 1; i < r; ++i)
        if (std::abs(s.left(i, j)) > std::abs(s.left(arg, j))) arg = i;
      CHECK(s.left(arg, j) > 0.0);
    }
  }
  CHECK(worst_rec <= 1e-10);
  CHECK(worst_orth <= 1e-10);
}

TEST_CASE("svd_small is deterministic and rank-deficient cores still reconstruct") {
  RngStream rng(77);
  auto c = random_matrix(4, 4, rng);
  CHECK(svd_small(c).left == svd_small(c).left);

  // Rank 1 core: outer product.
  Matrix<double> r1(3, 3);
  const double u[3] = {1.0, -2.0, 0.5}, v[3] = {0.3, 0.1, -1.0};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r1(i, j) = u[i] * v[j];
  auto s = svd_small(r1);
  auto rec = reconstruct(s);
  for (std::size_t i = 0; i < 9; ++i) CHECK(rec.data()[i] == doctest::Approx(r1.data()[i]).epsilon(1e-12));
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = 0; b < 3; ++b) {
      double d = 0.0;
      for (std::size_t i = 0; i < 3; ++i) d += s.left(i, a) * s.left(i, b);
      CHECK(d == doctest::Approx(a == b ? 1.0 : 0.0).epsilon(1e-10));
    }
  }
}

TEST_CASE("svd_backward matches finite differences") {
  RngStream rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t r = 2 + static_cast<std::size_t>(trial % 3);
    auto c = random_matrix(r, r, rng);
    // Loss = w . sigma + <A, U> + <B, T>, with weights chosen once.
    std::vector<double> w(r);
    for (auto& x : w) x = rng.normal();
    auto a = random_matrix(r, r, rng);
    auto b = random_matrix(r, r, rng);
    auto loss = [&](const Matrix<double>& m) {
      auto s = svd_small(m);
      double l = 0.0;
      for (std::size_t i = 0; i < r; ++i) l += w[i] * s.singular_values[i];
      for (std::size_t i = 0; i < r * r; ++i) {
        l += a.data()[i] * s.left.data()[i] + b.data()[i] * s.right.data()[i];
      }
      return l;
    };
    auto s = svd_small(c);
    auto g = svd_backward(s, w, &a, &b);
    for (std::size_t i = 0; i < r * r; ++i) {
      auto cp = c, cm = c;
      cp.data()[i] += 1e-6;
      cm.data()[i] -= 1e-6;
      const double fd = (loss(cp) - loss(cm)) / 2e-6;
      CHECK(g.data()[i] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
    }
  }
}

TEST_CASE("truncated normal closed forms") {
  auto full = truncated_normal_moments(0.0, 1.0, -kInf, kInf);
  CHECK(full.mean == doctest::Approx(0.0));
  CHECK(full.variance == doctest::Approx(1.0));

  auto half = truncated_normal_moments(0.0, 1.0, 0.0, kInf);
  CHECK(half.mean == doctest::Approx(std::sqrt(2.0 / M_PI)).epsilon(1e-12));
  CHECK(half.variance == doctest::Approx(1.0 - 2.0 / M_PI).epsilon(1e-12));
  CHECK(half.mean == doctest::Approx(0.7979).epsilon(1e-4));
  CHECK(half.variance == doctest::Approx(0.3634).epsilon(1e-4));

  CHECK_THROWS_AS(truncated_normal_moments(0.0, 0.0, 0.0, 1.0), DomainError);
  CHECK_THROWS_AS(truncated_normal_moments(0.0, -1.0, 0.0, 1.0), DomainError);
  CHECK_THROWS_AS(truncated_normal_moments(0.0, 1.0, 1.0, 1.0), DomainError);

  // Far tail stays finite.
  auto tail = truncated_normal_moments(0.0, 1.0, 30.0, kInf);
  CHECK(std::isfinite(tail.mean));
  CHECK(tail.mean > 30.0);
}

TEST_CASE("truncated normal matches Monte-Carlo on 20 random intervals") {
  RngStream params(8);
  RngStream rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const double mu = params.normal(0.0, 1.0);
    const double sigma = 0.2 + params.uniform();
    double a = mu + sigma * params.normal(-0.5, 1.0);
    double b = a + sigma * (0.3 + 2.0 * params.uniform());
    if (trial % 4 == 0) b = kInf;
    if (trial % 4 == 1) a = -kInf;
    auto exact = truncated_normal_moments(mu, sigma, a, b);
    auto mc = sample_truncated(mu, sigma, a, b, 10'000'000, rng);
    CHECK(std::abs(exact.mean - mc.mean) <= 1e-3);
    CHECK(std::abs(exact.variance - mc.variance) <= 1e-3);
  }
}
