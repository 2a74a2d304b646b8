// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/truncnorm.hpp"

#include <cmath>
#include <numbers>

#include "umv2/errors.hpp"

namespace umv2 {

double standard_normal_pdf(double x) {
  if (std::isinf(x)) return 0.0;
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

Moments truncated_normal_moments(double mu, double sigma, double a, double b) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw DomainError("truncated_normal_moments: sigma must be > 0");
  if (std::isnan(mu) || std::isnan(a) || std::isnan(b) || !(a < b)) {
    throw DomainError("truncated_normal_moments: require a < b");
  }
  const double alpha = (a - mu) / sigma;
  const double beta = (b - mu) / sigma;
  const double pa = standard_normal_pdf(alpha);
  const double pb = standard_normal_pdf(beta);
  // x * pdf(x) -> 0 as |x| -> inf.
  const double apa = std::isinf(alpha) ? 0.0 : alpha * pa;
  const double bpb = std::isinf(beta) ? 0.0 : beta * pb;
  // Z via the tail that keeps precision.
  const double z = alpha > 0.0 ? standard_normal_cdf(-alpha) - standard_normal_cdf(-beta)
                               : standard_normal_cdf(beta) - standard_normal_cdf(alpha);
  if (!(z > 0.0)) throw NumericError("truncated_normal_moments: truncation interval has zero mass");
  const double shift = (pa - pb) / z;
  Moments m;
  m.mean = mu + shift * sigma;
  m.variance = sigma * sigma * (1.0 - (bpb - apa) / z - shift * shift);
  return m;
}

}  // namespace umv2
