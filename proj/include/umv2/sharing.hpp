// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

namespace umv2 {

enum class SharingMode { kNone, kNoRing, kRing, kBlock };

SharingMode parse_sharing_mode(const std::string& s);
std::string to_string(SharingMode m);

/// Which value tables each memory layer addresses. Layers and tables are
/// numbered from 1.
struct SharingPlan {
  SharingMode mode = SharingMode::kNone;
  std::size_t layers = 0;
  std::size_t g = 1;
  std::vector<std::vector<std::size_t>> assignments;  // [layer - 1] -> g table ids
  bool partial_block = false;  // block mode with g not dividing L

  const std::vector<std::size_t>& tables_for(std::size_t layer) const { return assignments.at(layer - 1); }
  /// Number of layers referencing each table, index [table - 1].
  std::vector<std::size_t> reference_counts() const;
};

/// Window of g tables per layer: floor((g - 1) / 2) preceding layers, the
/// rest succeeding. NoRing shifts the window inward at the ends; Ring wraps
/// around; Block gives every layer of block b the tables of that block.
SharingPlan build_plan(std::size_t layers, std::size_t g, SharingMode mode);

/// round(base_n * sqrt(g)): per-axis key count when g tables of base_n^2 values
/// are addressed as one grid.
std::size_t effective_key_count(std::size_t base_n, std::size_t g);

/// "S4-Ring", "S9-NoRing", "S1-None".
std::string plan_label(const SharingPlan& p);

/// Table layout: a "Layer number" header, then one row per plan with the
/// comma-joined table ids of each listed layer (all layers when empty).
std::string plan_text(const std::vector<SharingPlan>& plans, const std::vector<std::size_t>& layers = {});
nlohmann::json plan_json(const SharingPlan& p);

}  // namespace umv2
