// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <ostream>

#include "json_util.hpp"
#include "umv2/checkpoint.hpp"
#include "umv2/errors.hpp"

namespace umv2 {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Schedules

DecayShape parse_decay_shape(const std::string& s) {
  if (s == "constant") return DecayShape::kConstant;
  if (s == "cosine") return DecayShape::kCosine;
  if (s == "linear") return DecayShape::kLinear;
  throw ConfigError("unknown decay shape '" + s + "' (constant, cosine, linear)");
}

std::string to_string(DecayShape d) {
  switch (d) {
    case DecayShape::kConstant: return "constant";
    case DecayShape::kCosine: return "cosine";
    case DecayShape::kLinear: return "linear";
  }
  return "?";
}

double LrSchedule::at(double tokens) const {
  if (warmup_tokens > 0 && tokens < warmup_tokens) return base * tokens / warmup_tokens;
  if (decay == DecayShape::kConstant) return base;
  const double span = total_tokens - warmup_tokens;
  const double p = span > 0 ? std::clamp((tokens - warmup_tokens) / span, 0.0, 1.0) : 1.0;
  const double f = decay == DecayShape::kCosine ? 0.5 * (1.0 + std::cos(std::numbers::pi * p)) : 1.0 - p;
  return base * (min_ratio + (1.0 - min_ratio) * f);
}

ValueLrMode parse_value_lr_mode(const std::string& s) {
  if (s == "constant") return ValueLrMode::kConstant;
  if (s == "decay") return ValueLrMode::kDecay;
  throw ConfigError("unknown value_lr mode '" + s + "' (constant, decay)");
}

std::string to_string(ValueLrMode m) { return m == ValueLrMode::kConstant ? "constant" : "decay"; }

double ValueLrSchedule::at(double tokens) const {
  if (mode == ValueLrMode::kConstant) return c;
  if (tokens >= budget_tokens) return 1.0;
  return c0 + (1.0 - c0) * tokens / budget_tokens;
}

// ---------------------------------------------------------------------------
// Data

namespace {

std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError(p.string() + ": cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

Corpus load_corpus(const std::vector<std::string>& paths, double eval_fraction) {
  if (paths.empty()) throw UsageError("no data paths given");
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("data.eval_fraction must be in (0, 1)");
  std::vector<fs::path> files;
  for (const auto& p : paths) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> inside;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file()) inside.push_back(e.path());
      }
      std::sort(inside.begin(), inside.end());
      files.insert(files.end(), inside.begin(), inside.end());
    } else if (fs::is_regular_file(p)) {
      files.emplace_back(p);
    } else {
      throw UsageError(p + ": data path does not exist");
    }
  }
  Corpus c;
  for (const auto& f : files) {
    const auto bytes = read_file(f);
    const auto held = static_cast<std::size_t>(std::ceil(static_cast<double>(bytes.size()) * eval_fraction));
    const auto cut = bytes.size() - std::min(held, bytes.size());
    c.train.insert(c.train.end(), bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    c.eval.insert(c.eval.end(), bytes.begin() + static_cast<std::ptrdiff_t>(cut), bytes.end());
    c.files.push_back(f.string());
  }
  if (c.train.empty()) throw UsageError("data paths contain no bytes");
  return c;
}

TokenBatch sample_batch(const std::vector<std::uint8_t>& data, std::size_t batch, std::size_t seq, RngStream& rng) {
  if (data.size() < seq + 1) throw UsageError("training split is shorter than one window");
  TokenBatch b{batch, seq, {}};
  b.tokens.reserve(batch * (seq + 1));
  for (std::size_t i = 0; i < batch; ++i) {
    const auto off = rng.below(data.size() - seq);
    b.tokens.insert(b.tokens.end(), data.begin() + static_cast<std::ptrdiff_t>(off),
                    data.begin() + static_cast<std::ptrdiff_t>(off + seq + 1));
  }
  return b;
}

template <typename T>
double evaluate(const Model<T>& m, const std::vector<std::uint8_t>& data, std::size_t seq, std::size_t batch,
                std::size_t max_tokens) {
  if (seq == 0 || batch == 0) throw UsageError("evaluate: seq and batch must be positive");
  if (data.size() < seq + 1) throw UsageError("evaluation split is empty or shorter than one window");
  std::size_t windows = (data.size() - 1) / seq;
  if (max_tokens > 0) windows = std::min(windows, (max_tokens + seq - 1) / seq);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t w = 0; w < windows; w += batch) {
    const std::size_t rows = std::min(batch, windows - w);
    TokenBatch b{rows, seq, {}};
    for (std::size_t r = 0; r < rows; ++r) {
      const auto off = static_cast<std::ptrdiff_t>((w + r) * seq);
      b.tokens.insert(b.tokens.end(), data.begin() + off, data.begin() + off + static_cast<std::ptrdiff_t>(seq + 1));
    }
    sum += lm_loss<T>(m, b).lm * static_cast<double>(rows * seq);
    count += rows * seq;
  }
  return sum / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Optimizer

namespace {

template <typename T>
std::vector<Matrix<T>*> tensors(Model<T>& m) {
  std::vector<Matrix<T>*> out;
  m.for_each([&](const std::string&, Matrix<T>& t) { out.push_back(&t); });
  return out;
}

template <typename T>
void zero(Model<T>& m) {
  m.for_each([](const std::string&, Matrix<T>& t) { t.set_zero(); });
}

}  // namespace

template <typename T>
AdamW<T>::AdamW(const Model<T>& like, const OptimConfig& c) : cfg(c), m1(like.zeros_like()), m2(like.zeros_like()) {}

template <typename T>
void AdamW<T>::update(Model<T>& params, const Model<T>& grads, double lr, double value_mult) {
  ++step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  auto g = tensors(const_cast<Model<T>&>(grads));
  auto a = tensors(m1);
  auto b = tensors(m2);
  std::size_t i = 0;
  params.for_each([&](const std::string& name, Matrix<T>& p) {
    const double rate = is_value_table_param(name) ? lr * value_mult : lr;
    const double decay = is_norm_param(name) ? 0.0 : rate * cfg.weight_decay;
    T* pp = p.data();
    const T* gg = g[i]->data();
    T* ma = a[i]->data();
    T* mb = b[i]->data();
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T step_size = static_cast<T>(rate / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(cfg.eps);
    const T keep = static_cast<T>(1.0 - decay);
    for (std::size_t k = 0; k < p.size(); ++k) {
      ma[k] = b1 * ma[k] + (T{1} - b1) * gg[k];
      mb[k] = b2 * mb[k] + (T{1} - b2) * gg[k] * gg[k];
      pp[k] = keep * pp[k] - step_size * ma[k] / (std::sqrt(mb[k] * inv_bc2) + eps);
    }
    ++i;
  });
}

template <typename T>
double clip_gradients(Model<T>& grads, double clip) {
  double ss = 0.0;
  grads.for_each([&](const std::string&, Matrix<T>& t) {
    for (T v : t.flat()) ss += static_cast<double>(v) * v;
  });
  const double norm = std::sqrt(ss);
  if (clip > 0.0 && norm > clip) {
    const T s = static_cast<T>(clip / norm);
    grads.for_each([&](const std::string&, Matrix<T>& t) {
      for (T& v : t.flat()) v *= s;
    });
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  model.validate();
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(!data.empty(), "data.paths must list at least one file or directory");
  need(eval_fraction > 0.0 && eval_fraction < 1.0, "data.eval_fraction must be in (0, 1)");
  need(model.vocab >= 256, "model.vocab must be >= 256 for byte-level data");
  need(batch >= 1, "train.batch must be >= 1");
  need(seq >= 1 && seq <= model.context, "train.seq must be in [1, model.context]");
  need(total_tokens >= static_cast<double>(batch * seq), "train.total_tokens must cover at least one step");
  need(log_interval >= 1, "train.log_interval must be >= 1");
  need(lr.base > 0.0 && std::isfinite(lr.base), "lr.base must be positive");
  need(lr.warmup_tokens >= 0.0, "lr.warmup_tokens must be >= 0");
  need(lr.min_ratio >= 0.0 && lr.min_ratio <= 1.0, "lr.min_ratio must be in [0, 1]");
  need(value_lr.c > 0.0, "value_lr.c must be positive");
  need(value_lr.c0 >= 1.0, "value_lr.c0 must be >= 1");
  need(value_lr.budget_tokens > 0.0, "value_lr.budget_tokens must be positive");
  need(optim.beta1 >= 0.0 && optim.beta1 < 1.0, "optim.beta1 must be in [0, 1)");
  need(optim.beta2 >= 0.0 && optim.beta2 < 1.0, "optim.beta2 must be in [0, 1)");
  need(optim.eps > 0.0, "optim.eps must be positive");
  need(optim.weight_decay >= 0.0, "optim.weight_decay must be >= 0");
  need(optim.grad_clip >= 0.0, "optim.grad_clip must be >= 0");
  need(aux.balance_beta >= 0.0, "aux.balance.beta must be >= 0");
  try {
    aux.tucker_cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("aux.tucker: ") + e.what());
  }
  need(!(aux.tucker || aux.balance) || model.memory.has_value(), "aux losses need a memory config");
  need(!out_dir.empty(), "train.out_dir must be set");
}

std::size_t TrainConfig::steps() const {
  return static_cast<std::size_t>(total_tokens / static_cast<double>(tokens_per_step()));
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["model"] = to_json(c.model);
  j["data"] = {{"paths", c.data}, {"eval_fraction", c.eval_fraction}, {"seed", c.data_seed}};
  j["train"] = {{"batch", c.batch},
                {"seq", c.seq},
                {"total_tokens", c.total_tokens},
                {"log_interval", c.log_interval},
                {"eval_tokens", c.eval_tokens},
                {"out_dir", c.out_dir}};
  j["lr"] = {{"base", c.lr.base},
             {"warmup_tokens", c.lr.warmup_tokens},
             {"decay", to_string(c.lr.decay)},
             {"min_ratio", c.lr.min_ratio}};
  j["value_lr"] = {{"mode", to_string(c.value_lr.mode)},
                   {"c", c.value_lr.c},
                   {"c0", c.value_lr.c0},
                   {"budget_tokens", c.value_lr.budget_tokens}};
  j["optim"] = {{"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"eps", c.optim.eps},
                {"weight_decay", c.optim.weight_decay},
                {"grad_clip", c.optim.grad_clip}};
  j["aux"] = {{"tucker", {{"enabled", c.aux.tucker}, {"alpha", c.aux.tucker_cfg.alpha}, {"tau", c.aux.tucker_cfg.tau}}},
              {"balance", {{"enabled", c.aux.balance}, {"beta", c.aux.balance_beta}}}};
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  using detail::read;
  using detail::read_enum;
  using detail::reject_unknown;
  reject_unknown(j, "config", {"model", "data", "train", "lr", "value_lr", "optim", "aux"});
  TrainConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j["model"], "model");
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, "data", {"paths", "eval_fraction", "seed"});
    read(d, "data", "paths", c.data);
    read(d, "data", "eval_fraction", c.eval_fraction);
    read(d, "data", "seed", c.data_seed);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t, "train", {"batch", "seq", "total_tokens", "log_interval", "eval_tokens", "out_dir"});
    read(t, "train", "batch", c.batch);
    read(t, "train", "seq", c.seq);
    read(t, "train", "total_tokens", c.total_tokens);
    read(t, "train", "log_interval", c.log_interval);
    read(t, "train", "eval_tokens", c.eval_tokens);
    read(t, "train", "out_dir", c.out_dir);
  }
  if (j.contains("lr")) {
    const auto& l = j["lr"];
    reject_unknown(l, "lr", {"base", "warmup_tokens", "decay", "min_ratio"});
    read(l, "lr", "base", c.lr.base);
    read(l, "lr", "warmup_tokens", c.lr.warmup_tokens);
    read_enum(l, "lr", "decay", c.lr.decay, &parse_decay_shape);
    read(l, "lr", "min_ratio", c.lr.min_ratio);
  }
  if (j.contains("value_lr")) {
    const auto& v = j["value_lr"];
    reject_unknown(v, "value_lr", {"mode", "c", "c0", "budget_tokens"});
    read_enum(v, "value_lr", "mode", c.value_lr.mode, &parse_value_lr_mode);
    read(v, "value_lr", "c", c.value_lr.c);
    read(v, "value_lr", "c0", c.value_lr.c0);
    read(v, "value_lr", "budget_tokens", c.value_lr.budget_tokens);
  }
  if (j.contains("optim")) {
    const auto& o = j["optim"];
    reject_unknown(o, "optim", {"beta1", "beta2", "eps", "weight_decay", "grad_clip"});
    read(o, "optim", "beta1", c.optim.beta1);
    read(o, "optim", "beta2", c.optim.beta2);
    read(o, "optim", "eps", c.optim.eps);
    read(o, "optim", "weight_decay", c.optim.weight_decay);
    read(o, "optim", "grad_clip", c.optim.grad_clip);
  }
  if (j.contains("aux")) {
    const auto& a = j["aux"];
    reject_unknown(a, "aux", {"tucker", "balance"});
    if (a.contains("tucker")) {
      reject_unknown(a["tucker"], "aux.tucker", {"enabled", "alpha", "tau"});
      read(a["tucker"], "aux.tucker", "enabled", c.aux.tucker);
      read(a["tucker"], "aux.tucker", "alpha", c.aux.tucker_cfg.alpha);
      read(a["tucker"], "aux.tucker", "tau", c.aux.tucker_cfg.tau);
    }
    if (a.contains("balance")) {
      reject_unknown(a["balance"], "aux.balance", {"enabled", "beta"});
      read(a["balance"], "aux.balance", "enabled", c.aux.balance);
      read(a["balance"], "aux.balance", "beta", c.aux.balance_beta);
    }
  }
  if (!j.contains("value_lr") || !j["value_lr"].contains("budget_tokens")) {
    // Decay knee at a quarter of the budget unless given.
    c.value_lr.budget_tokens = 0.25 * c.total_tokens;
  }
  c.lr.total_tokens = c.total_tokens;
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError(path + ": cannot open config");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return train_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Training

nlohmann::json MetricsRecord::to_json() const {
  return {{"step", step},
          {"tokens", tokens},
          {"train_loss", train_loss},
          {"eval_loss", eval_loss},
          {"lr", lr},
          {"value_lr_mult", value_lr_mult},
          {"tucker", tucker},
          {"balance", balance},
          {"total", total},
          {"row_entropy", row_entropy},
          {"col_entropy", col_entropy},
          {"grad_norm", grad_norm}};
}

bool MetricsRecord::finite() const {
  for (double v : {train_loss, eval_loss, lr, value_lr_mult, tucker, balance, total, row_entropy, col_entropy,
                   grad_norm}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

TrainResult train(const TrainConfig& cfg, std::ostream* progress) {
  cfg.validate();
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const Corpus corpus = load_corpus(cfg.data, cfg.eval_fraction);
  fs::create_directories(cfg.out_dir);
  const fs::path dir(cfg.out_dir);
  TrainResult res;
  res.metrics_path = (dir / "metrics.jsonl").string();
  res.checkpoint = (dir / "model.ckpt").string();
  const std::string last_good = (dir / "last_good.ckpt").string();
  std::ofstream metrics(res.metrics_path, std::ios::trunc);
  std::ofstream timing(dir / "timing.jsonl", std::ios::trunc);
  if (!metrics || !timing) throw Error(cfg.out_dir + ": cannot create metrics files");
  {
    std::ofstream cj(dir / "config.json", std::ios::trunc);
    cj << to_json(cfg).dump(2) << '\n';
  }

  Model<float> model = build_model<float>(cfg.model);
  Model<float> grads = model.zeros_like();
  AdamW<float> opt(model, cfg.optim);
  RngStream data_rng(cfg.data_seed, 17);
  const std::size_t steps = cfg.steps();
  const double tps = static_cast<double>(cfg.tokens_per_step());
  double loss_sum = 0.0;
  std::size_t loss_n = 0;
  MetricsRecord rec;
  save_checkpoint(model, last_good, {{"step", 0}, {"tokens", 0}});

  for (std::size_t step = 1; step <= steps; ++step) {
    const double tokens = static_cast<double>(step) * tps;
    const bool log_now = step % cfg.log_interval == 0 || step == steps;
    const TokenBatch batch = sample_batch(corpus.train, cfg.batch, cfg.seq, data_rng);
    zero(grads);
    const LossReport rep = lm_loss<float>(model, batch, &grads, cfg.aux, log_now && cfg.model.memory.has_value());
    if (!std::isfinite(rep.total)) {
      throw NumericError("non-finite loss at step " + std::to_string(step) + "; last good checkpoint: " + last_good);
    }
    const double gnorm = clip_gradients(grads, cfg.optim.grad_clip);
    const double lr = cfg.lr.at(tokens);
    const double vmult = cfg.value_lr.at(tokens);
    opt.update(model, grads, lr, vmult);
    loss_sum += rep.lm;
    ++loss_n;

    if (!log_now) continue;
    if (cfg.aux.tucker || cfg.aux.balance) {
      // The aux terms must account for the whole difference to the plain loss.
      const LossReport plain = lm_loss<float>(model, batch);
      const LossReport again = lm_loss<float>(model, batch, nullptr, cfg.aux);
      if (again.lm != plain.lm || again.total != plain.lm + again.tucker + again.balance) {
        throw VerificationError("aux bookkeeping mismatch at step " + std::to_string(step));
      }
    }
    rec = MetricsRecord{};
    rec.step = step;
    rec.tokens = static_cast<std::uint64_t>(tokens);
    rec.train_loss = loss_sum / static_cast<double>(loss_n);
    rec.eval_loss = evaluate(model, corpus.eval, cfg.seq, cfg.batch, step == steps ? 0 : cfg.eval_tokens);
    rec.lr = lr;
    rec.value_lr_mult = vmult;
    rec.tucker = rep.tucker;
    rec.balance = rep.balance;
    rec.total = rep.total;
    rec.row_entropy = rep.row_entropy;
    rec.col_entropy = rep.col_entropy;
    rec.grad_norm = gnorm;
    rec.wall_clock = std::chrono::duration<double>(clock::now() - t0).count();
    loss_sum = 0.0;
    loss_n = 0;
    if (!rec.finite()) {
      throw NumericError("non-finite metrics at step " + std::to_string(step) + ": " + rec.to_json().dump() +
                         "; last good checkpoint: " + last_good);
    }
    metrics << rec.to_json().dump() << '\n' << std::flush;
    timing << nlohmann::json{{"step", step}, {"wall_clock", rec.wall_clock}}.dump() << '\n' << std::flush;
    if (!metrics) throw Error(res.metrics_path + ": write failed");
    save_checkpoint(model, last_good, {{"step", step}, {"tokens", rec.tokens}});
    res.records.push_back(rec);
    if (progress) {
      *progress << "step " << step << "/" << steps << " tokens " << rec.tokens << " train " << rec.train_loss
                << " eval " << rec.eval_loss << " lr " << lr << " vmult " << vmult << " (" << rec.wall_clock
                << " s)\n"
                << std::flush;
    }
  }
  res.final_eval = rec.eval_loss;
  fs::copy_file(last_good, res.checkpoint, fs::copy_options::overwrite_existing);
  return res;
}

std::size_t iso_activated_ffn_inner(const ModelConfig& with_memory) {
  ModelConfig dense = with_memory;
  dense.memory.reset();
  dense.sharing = SharingMode::kNone;
  dense.sharing_g = 1;
  const double extra = param_count(with_memory).activated - param_count(dense).activated;
  const double per_unit = 3.0 * static_cast<double>(dense.hidden) * static_cast<double>(dense.layers);
  return dense.ffn_inner + static_cast<std::size_t>(std::llround(extra / per_unit));
}

template double evaluate<float>(const Model<float>&, const std::vector<std::uint8_t>&, std::size_t, std::size_t,
                                std::size_t);
template double evaluate<double>(const Model<double>&, const std::vector<std::uint8_t>&, std::size_t, std::size_t,
                                 std::size_t);
template struct AdamW<float>;
template struct AdamW<double>;
template double clip_gradients<float>(Model<float>&, double);
template double clip_gradients<double>(Model<double>&, double);

}  // namespace umv2
