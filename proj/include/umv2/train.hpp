// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "umv2/model.hpp"

namespace umv2 {

// ---------------------------------------------------------------------------
// Schedules

enum class DecayShape { kConstant, kCosine, kLinear };
DecayShape parse_decay_shape(const std::string& s);
std::string to_string(DecayShape d);

/// Linear warmup to `base`, then the decay shape down to base * min_ratio
/// at total_tokens.
struct LrSchedule {
  double base = 3e-4;
  double warmup_tokens = 0;
  double total_tokens = 1;
  DecayShape decay = DecayShape::kCosine;
  double min_ratio = 0.1;

  double at(double tokens) const;
};

enum class ValueLrMode { kConstant, kDecay };
ValueLrMode parse_value_lr_mode(const std::string& s);
std::string to_string(ValueLrMode m);

/// Multiplier on the value/pre-value table LR: constant c, or linear from
/// c0 down to 1 over budget_tokens and 1 afterwards.
struct ValueLrSchedule {
  ValueLrMode mode = ValueLrMode::kConstant;
  double c = 1.0;
  double c0 = 4.0;
  double budget_tokens = 1;

  double at(double tokens) const;
};

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;  // global norm; 0 disables
};

// ---------------------------------------------------------------------------
// Data

/// Byte corpus split per file: the last `eval_fraction` of every file is
/// held out.
struct Corpus {
  std::vector<std::uint8_t> train;
  std::vector<std::uint8_t> eval;
  std::vector<std::string> files;
};

/// Paths may be files or directories (every regular file inside, sorted).
Corpus load_corpus(const std::vector<std::string>& paths, double eval_fraction = 0.02);

/// `batch` windows of seq + 1 bytes at uniform random offsets.
TokenBatch sample_batch(const std::vector<std::uint8_t>& data, std::size_t batch, std::size_t seq, RngStream& rng);

/// Mean next-token loss over consecutive non-overlapping windows of `data`,
/// at most `max_tokens` predictions (0 = all).
template <typename T>
double evaluate(const Model<T>& m, const std::vector<std::uint8_t>& data, std::size_t seq, std::size_t batch,
                std::size_t max_tokens = 0);

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
struct AdamW {
  OptimConfig cfg;
  Model<T> m1, m2;
  std::size_t step = 0;

  explicit AdamW(const Model<T>& like, const OptimConfig& c);
  /// One decoupled-weight-decay Adam step. Value and pre-value tables use
  /// lr * value_mult; norm gains get no weight decay.
  void update(Model<T>& params, const Model<T>& grads, double lr, double value_mult);
};

/// Global gradient L2 norm; rescales `grads` to `clip` when above it.
template <typename T>
double clip_gradients(Model<T>& grads, double clip);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  ModelConfig model;
  std::vector<std::string> data;
  double eval_fraction = 0.02;
  std::uint64_t data_seed = 1;
  std::size_t batch = 16;
  std::size_t seq = 128;
  double total_tokens = 1e6;
  std::size_t log_interval = 50;   // steps
  std::size_t eval_tokens = 65536; // per log step; the final eval covers the whole split
  LrSchedule lr;                   // total_tokens follows the config above
  ValueLrSchedule value_lr;
  OptimConfig optim;
  AuxConfig aux;
  std::string out_dir = "run";

  void validate() const;
  std::size_t tokens_per_step() const { return batch * seq; }
  std::size_t steps() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Unknown keys and wrong types are rejected with the key path.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::string& path);

struct MetricsRecord {
  std::size_t step = 0;
  std::uint64_t tokens = 0;
  double train_loss = 0.0;   // mean LM loss over the steps since the last record
  double eval_loss = 0.0;
  double lr = 0.0;
  double value_lr_mult = 0.0;
  double tucker = 0.0;
  double balance = 0.0;
  double total = 0.0;
  double row_entropy = 0.0;
  double col_entropy = 0.0;
  double grad_norm = 0.0;
  double wall_clock = 0.0;   // seconds; written to timing.jsonl only

  /// Deterministic fields (no wall clock).
  nlohmann::json to_json() const;
  bool finite() const;
};

struct TrainResult {
  std::vector<MetricsRecord> records;
  double final_eval = 0.0;
  std::string checkpoint;
  std::string metrics_path;
};

/// Runs the loop and writes <out_dir>/metrics.jsonl, timing.jsonl,
/// last_good.ckpt (refreshed every log step) and model.ckpt. Throws
/// NumericError on a non-finite loss, after which last_good.ckpt is the
/// newest finite state.
TrainResult train(const TrainConfig& cfg, std::ostream* progress = nullptr);

/// Dense FFN width whose activated parameter count matches `with_memory`
/// (memory removed, FFN widened), rounded to the nearest integer.
std::size_t iso_activated_ffn_inner(const ModelConfig& with_memory);

}  // namespace umv2
