// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/cost_model.hpp"

#include <array>
#include <utility>

namespace umv2 {

CostReport flops_and_access(const MemoryLayerConfig& cfg, double ffn_inner, std::size_t batch_tokens,
                            std::size_t bytes_per_element) {
  const double h = static_cast<double>(cfg.hidden);
  const double n = static_cast<double>(cfg.n);
  const double dk = static_cast<double>(cfg.key_dim);
  const double r = static_cast<double>(cfg.rank);
  const double heads = static_cast<double>(cfg.heads);
  const double pairs = heads * heads;
  const double m = static_cast<double>(cfg.top_m);
  const double dv = static_cast<double>(cfg.value_dim);
  const double dp = static_cast<double>(cfg.gate == GateActivation::kOff ? 0 : cfg.prevalue_dim);
  const double cand = static_cast<double>(cfg.n == 0 ? 0 : cfg.retrieval().axis_candidates());

  CostReport rep;
  CostBreakdown& c = rep.per_token;
  c.query_macs = 2.0 * heads * r * dk * h;
  c.axis_macs = 2.0 * heads * r * n * dk;
  c.proxy_macs = 2.0 * pairs * r * n;
  c.subgrid_macs = pairs * cand * cand * r * r;
  c.aggregation_macs = m * (dv + dp);
  c.projector_macs = h * dp + dv * static_cast<double>(cfg.projector_blocks()) * h;
  c.ffn_macs = 3.0 * h * ffn_inner;

  const double t = static_cast<double>(batch_tokens);
  rep.batch_tokens = batch_tokens;
  rep.memory_flops = 2.0 * c.memory_macs() * t;
  rep.ffn_flops = 2.0 * c.ffn_macs * t;
  rep.bytes_accessed = m * (dv + dp) * static_cast<double>(bytes_per_element) * t;
  const double total = c.memory_macs() + c.ffn_macs;
  rep.mcp = total > 0 ? c.memory_macs() / total : 0.0;
  return rep;
}

MemoryLayerConfig kdim_base_config(std::size_t key_dim) {
  MemoryLayerConfig c;
  c.hidden = 1152;
  c.n = 964;
  c.key_dim = key_dim;
  c.top_m = 94;
  c.value_dim = 144;
  c.prevalue_dim = 144;
  return c;
}

std::vector<KdimRow> kdim_table() {
  static constexpr std::array<std::pair<std::size_t, double>, 7> kRows{{
      {344, 0.120}, {432, 0.145}, {524, 0.170}, {610, 0.195}, {730, 0.230}, {796, 0.250}, {880, 0.275}}};
  // Anchor: total compute per token from the first row.
  const auto anchor = flops_and_access(kdim_base_config(kRows[0].first), 0.0, 1);
  const double total = anchor.per_token.memory_macs() / kRows[0].second;
  const double h = 1152.0;
  std::vector<KdimRow> out;
  for (const auto& [dk, published] : kRows) {
    const double mem = flops_and_access(kdim_base_config(dk), 0.0, 1).per_token.memory_macs();
    const double inner = (total - mem) / (3.0 * h);
    KdimRow row;
    row.key_dim = dk;
    row.published_mcp = published;
    row.ffn_inner = inner;
    row.mcp = flops_and_access(kdim_base_config(dk), inner, 1).mcp;
    out.push_back(row);
  }
  return out;
}

}  // namespace umv2
