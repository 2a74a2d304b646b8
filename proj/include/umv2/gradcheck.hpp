// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "umv2/matrix.hpp"
#include "umv2/rng.hpp"

namespace umv2 {

/// One tensor under test: the live parameter (perturbed in place) and its
/// analytic gradient.
struct GradEntry {
  std::string name;
  Matrix<double>* param = nullptr;
  const Matrix<double>* grad = nullptr;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double floor = 1e-6;          // denominator floor for the relative error
  std::size_t max_coords = 64;  // per tensor; 0 checks every coordinate
  std::uint64_t seed = 0;       // coordinate sampling
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;       // "tensor[index]" of the worst coordinate
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose perturbation changed a discrete selection
};

/// Compares analytic gradients with central differences of `loss`.
/// `signature`, when set, returns the discrete routing state (selected
/// indices); coordinates whose +/-eps perturbation changes it are skipped.
GradCheckResult check_gradients(const std::function<double()>& loss, const std::vector<GradEntry>& entries,
                                const GradCheckOptions& opt = {},
                                const std::function<std::vector<std::uint32_t>()>& signature = {});

/// Relative error with the option floor in the denominator.
double relative_error(double analytic, double numeric, double floor);

/// sum(r .* y), the projection used to turn a tensor output into a scalar loss.
double project(const Matrix<double>& y, const Matrix<double>& r);

}  // namespace umv2
