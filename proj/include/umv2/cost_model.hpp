// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "umv2/memory_layer.hpp"

namespace umv2 {

/// Per-token multiply-accumulate counts of one memory layer and its companion
/// SwiGLU FFN. FLOPs are 2 x MACs.
struct CostBreakdown {
  double query_macs = 0;       // row + column query maps
  double axis_macs = 0;        // q . k for every row/column key
  double proxy_macs = 0;       // rank-1 proxies
  double subgrid_macs = 0;     // exact scores on the pruned candidate grid
  double aggregation_macs = 0; // gates and the weighted value sum
  double projector_macs = 0;   // pre-value and value projectors
  double ffn_macs = 0;

  double memory_macs() const {
    return query_macs + axis_macs + proxy_macs + subgrid_macs + aggregation_macs + projector_macs;
  }
};

struct CostReport {
  CostBreakdown per_token;
  std::size_t batch_tokens = 0;
  double memory_flops = 0;  // whole batch
  double ffn_flops = 0;
  double bytes_accessed = 0;  // value and pre-value rows fetched for the batch
  double mcp = 0;             // memory / (memory + FFN) FLOPs
};

/// `ffn_inner` is the absolute inner width of the companion FFN (0 for none).
CostReport flops_and_access(const MemoryLayerConfig& cfg, double ffn_inner, std::size_t batch_tokens,
                            std::size_t bytes_per_element = 4);

/// One row of the key-dimension sweep. The FFN inner width of every row is
/// chosen so that memory + FFN compute equals the first row's total at the
/// first row's published MCP (iso-compute sweep).
struct KdimRow {
  std::size_t key_dim = 0;
  double published_mcp = 0;
  double ffn_inner = 0;
  double mcp = 0;
};

/// Base layer of the sweep: hidden 1152, n 964, 94 activated values,
/// D_v = D_p = 144, one head, rank 2.
MemoryLayerConfig kdim_base_config(std::size_t key_dim);
std::vector<KdimRow> kdim_table();

}  // namespace umv2
