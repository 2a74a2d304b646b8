// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace umv2 {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

double project(const Matrix<double>& y, const Matrix<double>& r) {
  if (y.rows() != r.rows() || y.cols() != r.cols()) throw ConfigError("project: shape mismatch");
  return dot<double>(y.flat(), r.flat());
}

GradCheckResult check_gradients(const std::function<double()>& loss, const std::vector<GradEntry>& entries,
                                const GradCheckOptions& opt,
                                const std::function<std::vector<std::uint32_t>()>& signature) {
  GradCheckResult res;
  RngStream rng(opt.seed, 0x6763);
  std::vector<std::uint32_t> base_sig;
  if (signature) {
    loss();
    base_sig = signature();
  }
  for (const auto& e : entries) {
    if (e.param == nullptr || e.grad == nullptr) throw UsageError("check_gradients: null entry " + e.name);
    if (e.param->size() != e.grad->size()) throw ConfigError("check_gradients: shape mismatch for " + e.name);
    const std::size_t n = e.param->size();
    if (n == 0) continue;
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords != 0 && n > opt.max_coords) {
      for (std::size_t i = 0; i < opt.max_coords; ++i) {
        std::swap(coords[i], coords[i + rng.below(n - i)]);
      }
      coords.resize(opt.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t c : coords) {
      double& p = e.param->data()[c];
      const double orig = p;
      p = orig + opt.eps;
      const double lp = loss();
      const bool sig_p = !signature || signature() == base_sig;
      p = orig - opt.eps;
      const double lm = loss();
      const bool sig_m = !signature || signature() == base_sig;
      p = orig;
      if (!sig_p || !sig_m) {
        ++res.skipped;
        continue;
      }
      const double numeric = (lp - lm) / (2.0 * opt.eps);
      const double rel = relative_error(e.grad->data()[c], numeric, opt.floor);
      ++res.checked;
      if (rel > res.max_rel_error || res.worst.empty()) {
        if (rel >= res.max_rel_error) {
          res.max_rel_error = rel;
          res.worst = e.name + "[" + std::to_string(c) + "]";
          res.worst_analytic = e.grad->data()[c];
          res.worst_numeric = numeric;
        }
      }
    }
  }
  return res;
}

}  // namespace umv2
