// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "umv2/aux_losses.hpp"
#include "umv2/baselines.hpp"
#include "umv2/init_calib.hpp"
#include "umv2/memory_layer.hpp"
#include "umv2/sharing.hpp"

namespace umv2 {

struct ModelInitOptions {
  InitTarget target = InitTarget::kExactSilu;
  bool calibrate = true;              // bisect the query/key norm gains
  std::size_t calib_samples = 10000;
  std::optional<double> sigma_v;      // overrides the solved value
};

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t hidden = 64;
  std::size_t attn_heads = 4;
  std::size_t ffn_inner = 256;
  std::size_t vocab = 256;
  std::size_t context = 64;
  /// `memory.n` is the per-table key count; `memory.hidden` follows `hidden`.
  std::optional<MemoryLayerConfig> memory;
  std::size_t memory_interval = 1;
  SharingMode sharing = SharingMode::kNone;
  std::size_t sharing_g = 1;
  double norm_eps = 1e-6;
  double rope_base = 10000.0;
  ModelInitOptions init;
  std::uint64_t seed = 1;

  /// Throws ConfigError naming the offending field ("model.memory.top_m").
  void validate() const;
  bool hosts_memory(std::size_t block) const;  // 0-based block index
  std::size_t memory_layer_count() const;
  /// Config of every memory layer: hidden filled in and, under sharing, the
  /// per-axis key count widened to effective_key_count(n, g).
  MemoryLayerConfig layer_memory_config() const;
  /// Rows of one value table: heads^2 n^2.
  std::size_t table_rows() const;
  double k_inner() const { return static_cast<double>(ffn_inner) / static_cast<double>(hidden); }
};

nlohmann::json to_json(const ModelConfig& c);
/// Unknown keys and wrong types are rejected with the key path.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model");

template <typename T>
struct BlockParams {
  Matrix<T> norm1;  // 1 x hidden
  Matrix<T> wq, wk, wv, wo;
  Matrix<T> norm2;
  FfnParams<T> ffn;
  std::optional<Umv2Params<T>> mem;

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + "norm1", norm1);
    f(prefix + "attn.wq", wq);
    f(prefix + "attn.wk", wk);
    f(prefix + "attn.wv", wv);
    f(prefix + "attn.wo", wo);
    f(prefix + "norm2", norm2);
    ffn.for_each([&](const std::string& n, Matrix<T>& m) { f(prefix + "ffn." + n, m); });
    if (mem) mem->for_each([&](const std::string& n, Matrix<T>& m) { f(prefix + "mem." + n, m); });
  }
};

template <typename T>
struct Model {
  ModelConfig cfg;
  SharingPlan plan;                       // over memory layers
  Matrix<T> embed;                        // vocab x hidden
  std::vector<BlockParams<T>> blocks;
  Matrix<T> final_norm;                   // 1 x hidden
  Matrix<T> unembed;                      // vocab x hidden
  std::vector<ValueTable<T>> tables;      // one per memory layer
  std::vector<std::size_t> memory_index;  // block -> memory layer (or npos)

  /// Tables addressed by memory layer `mem_layer` (0-based), in plan order.
  ValuePool<T> pool_for(std::size_t mem_layer) const;
  /// Zero-valued copy with identical shapes (gradient buffer).
  Model zeros_like() const;

  template <typename F>
  void for_each(F&& f) {
    f("embed", embed);
    for (std::size_t b = 0; b < blocks.size(); ++b) blocks[b].for_each("blocks." + std::to_string(b) + ".", f);
    f("final_norm", final_norm);
    f("unembed", unembed);
    for (std::size_t t = 0; t < tables.size(); ++t) {
      tables[t].for_each([&](const std::string& n, Matrix<T>& m) { f("tables." + std::to_string(t) + "." + n, m); });
    }
  }
};

/// Parameter names of value and pre-value tables (value LR multiplier).
bool is_value_table_param(const std::string& name);
/// RMS-norm gains (no weight decay).
bool is_norm_param(const std::string& name);

struct MemoryInitInfo {
  std::size_t block = 0;
  CalibReport calib;
  double sigma_v = 0.0;
  double target_variance = 0.0;
};

/// Builds and initializes a model. Attention and FFN linears use std
/// sqrt(2/(5h)), output linears additionally sqrt(1/(2L)); memory gains are
/// calibrated and tables drawn with the solved sigma_V.
template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::vector<MemoryInitInfo>* info = nullptr);

/// Closed-form parameter counts.
struct ParamCount {
  double dense = 0;         // embeddings, attention, FFN, norms
  double memory_layers = 0; // queries, keys, cores, projectors
  double tables = 0;        // value and pre-value rows
  double total = 0;
  double activated = 0;     // per token: everything but the tables plus m (D_v + D_p) per memory layer
};
ParamCount param_count(const ModelConfig& cfg);

template <typename T>
std::size_t enumerate_params(Model<T>& m);

/// batch rows of seq + 1 tokens; position t predicts t + 1.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::uint16_t> tokens;

  std::uint16_t at(std::size_t b, std::size_t t) const { return tokens[b * (seq + 1) + t]; }
};

struct AuxConfig {
  bool tucker = false;
  PenaltyConfig tucker_cfg{1.0, 0.0};
  bool balance = false;
  double balance_beta = 0.001;
};

struct LossReport {
  double lm = 0.0;
  double tucker = 0.0;   // summed over memory layers, already scaled
  double balance = 0.0;
  double total = 0.0;    // lm + tucker + balance
  double row_entropy = 0.0;  // mean normalized key-activation entropy (when requested)
  double col_entropy = 0.0;
};

/// Mean next-token cross-entropy plus enabled aux terms. Gradients of the
/// total are accumulated into `grads` when set.
template <typename T>
LossReport lm_loss(const Model<T>& m, const TokenBatch& batch, Model<T>* grads = nullptr, const AuxConfig& aux = {},
                   bool key_stats = false);

/// Logits for every input position: (batch * seq) x vocab.
template <typename T>
Matrix<T> forward_logits(const Model<T>& m, const TokenBatch& batch);

/// Per-block output statistics of a forward pass over hidden-state inputs.
struct BlockTrace {
  std::size_t block = 0;
  bool has_memory = false;
  double residual_std = 0.0;  // after the block
  double attn_std = 0.0;
  double ffn_std = 0.0;
  double mem_std = 0.0;
};

/// Runs the block stack on `x` ((batch * seq) x hidden) and reports stats.
template <typename T>
std::vector<BlockTrace> trace_blocks(const Model<T>& m, const Matrix<T>& x, std::size_t batch, std::size_t seq);

/// Discrete routing state of a forward pass: selected grid cells and axis
/// counts of every memory layer. Used to skip finite-difference coordinates
/// that flip a selection.
template <typename T>
std::vector<std::uint32_t> routing_signature(const Model<T>& m, const TokenBatch& batch);

struct InitVerifyReport {
  std::vector<BlockTrace> trace;
  std::size_t samples = 0;
  double input_var = 0.0;
  double one_block_delta = 0.0;        // residual variance added by block 0
  std::vector<double> bound;           // per block: 2 sqrt(input_var + (l + 1) delta)
  std::vector<double> mem_ffn_ratio;   // per memory block
  double ratio_lo = 0.85, ratio_hi = 1.15;
  bool monotone = true;
  bool bounded = true;
  bool ratio_ok = true;

  bool passed() const { return monotone && bounded && ratio_ok; }
  nlohmann::json to_json() const;
  /// Throws VerificationError with the per-layer trace unless passed().
  void enforce() const;
};

/// Feeds `samples` unit-normal hidden states through the block stack and
/// checks non-divergent residual growth and memory/FFN output std parity.
template <typename T>
InitVerifyReport verify_init(const Model<T>& m, std::size_t samples, RngStream& rng);

}  // namespace umv2
