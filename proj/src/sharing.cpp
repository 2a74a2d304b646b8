// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/sharing.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "umv2/errors.hpp"

namespace umv2 {

SharingMode parse_sharing_mode(const std::string& s) {
  if (s == "none") return SharingMode::kNone;
  if (s == "noring") return SharingMode::kNoRing;
  if (s == "ring") return SharingMode::kRing;
  if (s == "block") return SharingMode::kBlock;
  throw ConfigError("unknown sharing mode '" + s + "' (none, noring, ring, block)");
}

std::string to_string(SharingMode m) {
  switch (m) {
    case SharingMode::kNone: return "none";
    case SharingMode::kNoRing: return "noring";
    case SharingMode::kRing: return "ring";
    case SharingMode::kBlock: return "block";
  }
  return "?";
}

std::vector<std::size_t> SharingPlan::reference_counts() const {
  std::vector<std::size_t> c(layers, 0);
  for (const auto& a : assignments) {
    for (auto t : a) ++c[t - 1];
  }
  return c;
}

SharingPlan build_plan(std::size_t layers, std::size_t g, SharingMode mode) {
  if (layers == 0) throw ConfigError("sharing: layer count must be >= 1");
  if (g == 0) throw ConfigError("sharing.g must be >= 1");
  if (g > layers) {
    throw ConfigError("sharing.g = " + std::to_string(g) + " exceeds the " + std::to_string(layers) +
                      " memory layers");
  }
  if (mode == SharingMode::kNone && g != 1) throw ConfigError("sharing.g must be 1 when sharing is off");
  SharingPlan p;
  p.mode = mode;
  p.layers = layers;
  p.g = g;
  p.assignments.resize(layers);
  const std::size_t before = (g - 1) / 2;
  for (std::size_t l = 1; l <= layers; ++l) {
    auto& a = p.assignments[l - 1];
    switch (mode) {
      case SharingMode::kNone:
        a = {l};
        break;
      case SharingMode::kNoRing: {
        std::size_t start = l > before ? l - before : 1;
        start = std::min(start, layers - g + 1);
        for (std::size_t k = 0; k < g; ++k) a.push_back(start + k);
        break;
      }
      case SharingMode::kRing:
        for (std::size_t k = 0; k < g; ++k) a.push_back((l - 1 + layers - before + k) % layers + 1);
        break;
      case SharingMode::kBlock: {
        const std::size_t b = (l - 1) / g;
        for (std::size_t t = b * g + 1; t <= std::min((b + 1) * g, layers); ++t) a.push_back(t);
        break;
      }
    }
  }
  p.partial_block = mode == SharingMode::kBlock && layers % g != 0;
  return p;
}

std::size_t effective_key_count(std::size_t base_n, std::size_t g) {
  if (base_n == 0 || g == 0) throw DomainError("effective_key_count: base_n and g must be positive");
  return static_cast<std::size_t>(std::llround(static_cast<double>(base_n) * std::sqrt(static_cast<double>(g))));
}

std::string plan_label(const SharingPlan& p) {
  static const char* kNames[] = {"None", "NoRing", "Ring", "Block"};
  return "S" + std::to_string(p.g) + "-" + kNames[static_cast<int>(p.mode)];
}

std::string plan_text(const std::vector<SharingPlan>& plans, const std::vector<std::size_t>& layers) {
  if (plans.empty()) return "";
  std::vector<std::size_t> cols = layers;
  if (cols.empty()) {
    for (std::size_t l = 1; l <= plans[0].layers; ++l) cols.push_back(l);
  }
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"Layer number"});
  for (auto l : cols) rows[0].push_back("L=" + std::to_string(l));
  for (const auto& p : plans) {
    std::vector<std::string> r{plan_label(p)};
    for (auto l : cols) {
      std::string cell;
      for (auto t : p.tables_for(l)) cell += (cell.empty() ? "" : ",") + std::to_string(t);
      r.push_back(cell);
    }
    rows.push_back(std::move(r));
  }
  std::vector<std::size_t> width(rows[0].size(), 0);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream os;
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      os << (c ? " | " : "") << r[c] << std::string(c + 1 < r.size() ? width[c] - r[c].size() : 0, ' ');
    }
    os << "\n";
  }
  return os.str();
}

nlohmann::json plan_json(const SharingPlan& p) {
  nlohmann::json j;
  j["mode"] = to_string(p.mode);
  j["layers"] = p.layers;
  j["g"] = p.g;
  j["partial_block"] = p.partial_block;
  j["assignments"] = p.assignments;
  return j;
}

}  // namespace umv2
