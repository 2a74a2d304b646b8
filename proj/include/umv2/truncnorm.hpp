// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace umv2 {

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

double standard_normal_pdf(double x);
double standard_normal_cdf(double x);

/// Mean and variance of N(mu, sigma^2) conditioned on [a, b]; either bound may
/// be infinite.
Moments truncated_normal_moments(double mu, double sigma, double a, double b);

}  // namespace umv2
