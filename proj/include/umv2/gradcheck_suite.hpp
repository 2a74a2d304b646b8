// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace umv2 {

struct SuiteCase {
  std::string layer;
  std::size_t index = 0;
  nlohmann::json config;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::string worst;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct SuiteReport {
  double threshold = 1e-4;
  std::vector<SuiteCase> cases;
  double seconds = 0.0;

  bool passed() const;
  nlohmann::json to_json() const;
};

struct SuiteOptions {
  std::size_t configs = 20;   // random configs per layer
  std::uint64_t seed = 1;
  double threshold = 1e-4;
  double eps = 1e-5;     // central-difference step
  double floor = 1e-6;   // relative-error denominator floor
  std::vector<std::string> layers;  // empty = all of suite_layers()
};

/// ffn, moe, moe_balance, pkm, umv2, tucker, ultramem_balance, model.
std::vector<std::string> suite_layers();

/// Central finite differences against every backward in 64-bit mode.
SuiteReport run_gradcheck_suite(const SuiteOptions& opt = {});

}  // namespace umv2
