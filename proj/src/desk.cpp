// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/desk.hpp"

#include <filesystem>

#include "umv2/errors.hpp"

namespace umv2 {

std::vector<std::string> desk_arms() { return {"umv2", "dense", "peer_off"}; }

namespace {

ModelConfig umv2_model() {
  ModelConfig c;
  c.layers = 4;
  c.hidden = 128;
  c.attn_heads = 4;
  c.ffn_inner = 512;
  c.vocab = 256;
  c.context = 128;
  MemoryLayerConfig m;
  m.n = 128;
  m.key_dim = 64;
  m.rank = 2;
  m.heads = 1;
  m.top_m = 16;
  m.axis_top_m = 16;
  m.value_dim = 48;
  m.prevalue_dim = 16;
  c.memory = m;
  c.seed = 1;
  return c;
}

}  // namespace

TrainConfig desk_config(const std::string& arm, const std::string& data, const std::string& out_root,
                        double total_tokens) {
  TrainConfig t;
  t.model = umv2_model();
  if (arm == "dense") {
    t.model.ffn_inner = iso_activated_ffn_inner(t.model);
    t.model.memory.reset();
  } else if (arm == "peer_off") {
    auto& m = *t.model.memory;
    // m (D_v + D_p) + h D_p + D_v h is kept: 16 * 64 + 128 * 64 = 9216.
    m.gate = GateActivation::kOff;
    m.value_dim = 64;
    m.prevalue_dim = 0;
  } else if (arm != "umv2") {
    throw UsageError("unknown desk arm '" + arm + "' (umv2, dense, peer_off)");
  }
  t.data = {data};
  t.batch = 16;
  t.seq = 128;
  t.total_tokens = total_tokens;
  t.log_interval = 500;
  t.eval_tokens = 65536;
  t.lr = {2e-3, 0.02 * total_tokens, total_tokens, DecayShape::kCosine, 0.1};
  if (t.model.memory) t.value_lr = {ValueLrMode::kDecay, 1.0, 4.0, 0.25 * total_tokens};
  t.out_dir = (std::filesystem::path(out_root) / arm).string();
  t.validate();
  return t;
}

}  // namespace umv2
