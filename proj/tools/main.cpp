// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

// umv2: train, evaluate and inspect the memory-layer models.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"
#include "umv2/checkpoint.hpp"
#include "umv2/cost_model.hpp"
#include "umv2/desk.hpp"
#include "umv2/errors.hpp"
#include "umv2/gradcheck_suite.hpp"
#include "umv2/init_calib.hpp"
#include "umv2/model.hpp"
#include "umv2/sharing.hpp"
#include "umv2/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace umv2;

namespace {

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError(path + ": cannot open");
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// A train config, a {"model": ...} document, or a bare model config.
ModelConfig model_from_file(const std::string& path) {
  const json j = read_json(path);
  if (j.contains("train") || j.contains("data") || j.contains("optim")) return train_config_from_json(j).model;
  if (j.contains("model")) return model_config_from_json(j["model"]);
  return model_config_from_json(j);
}

std::string default_data_dir() {
  if (const char* d = std::getenv("UMV2_DATA_DIR")) return d;
  return "data/sotu";
}

// Relative run directories land under $UMV2_LOG_DIR when it is set.
std::string resolve_out_dir(const std::string& dir) {
  const char* root = std::getenv("UMV2_LOG_DIR");
  if (root == nullptr || fs::path(dir).is_absolute()) return dir;
  return (fs::path(root) / dir).string();
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoul(item));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Activation buffers are freed and reallocated every step. Keeping them on
  // the heap instead of fresh mmaps avoids page-fault churn.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
  CLI::App app{"umv2: memory-layer language models at desk scale"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model; writes metrics.jsonl and model.ckpt");
  std::string train_config, preset, data_dir, out_dir;
  double total_tokens = 0, lr = 0;
  std::int64_t model_seed = -1, data_seed = -1;
  std::size_t log_interval = 0;
  bool print_config = false;
  train_cmd->add_option("--config", train_config, "JSON training config");
  train_cmd->add_option("--preset", preset, "Desk-scale arm instead of a config: umv2, dense, peer_off");
  train_cmd->add_option("--data", data_dir, "Corpus file or directory (overrides the config)");
  train_cmd->add_option("--out", out_dir, "Run directory (overrides the config)");
  train_cmd->add_option("--total-tokens", total_tokens, "Token budget; schedules rescale with it");
  train_cmd->add_option("--lr", lr, "Base learning rate");
  train_cmd->add_option("--seed", model_seed, "Model init seed");
  train_cmd->add_option("--data-seed", data_seed, "Batch sampling seed");
  train_cmd->add_option("--log-interval", log_interval, "Steps between metrics records");
  train_cmd->add_flag("--print-config", print_config, "Print the resolved config and exit");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Mean next-token loss of a checkpoint");
  std::string ckpt;
  std::vector<std::string> eval_data;
  std::string split = "eval";
  std::size_t eval_seq = 0, eval_batch = 16, max_tokens = 0;
  double eval_fraction = 0.02;
  eval_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "Corpus files or directories");
  eval_cmd->add_option("--split", split, "eval (held-out tail of every file) or train")
      ->check(CLI::IsMember({"eval", "train"}));
  eval_cmd->add_option("--seq", eval_seq, "Window length (default: model context)");
  eval_cmd->add_option("--batch", eval_batch, "Windows per forward pass");
  eval_cmd->add_option("--max-tokens", max_tokens, "Cap on predicted tokens (0 = whole split)");
  eval_cmd->add_option("--eval-fraction", eval_fraction, "Held-out fraction per file");

  // calibrate
  auto* cal_cmd = app.add_subcommand("calibrate", "Calibrate the query/key norm gains of one memory layer");
  std::string cal_config, cal_preset = "umv2";
  std::size_t cal_samples = 10000;
  std::uint64_t cal_seed = 1;
  cal_cmd->add_option("--config", cal_config, "Model or training config");
  cal_cmd->add_option("--preset", cal_preset, "Desk-scale arm when no config is given");
  cal_cmd->add_option("--samples", cal_samples, "Monte-Carlo samples (>= 10000)");
  cal_cmd->add_option("--seed", cal_seed, "RNG seed");

  // gradcheck
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every backward (64-bit)");
  SuiteOptions gc;
  gc_cmd->add_option("--configs", gc.configs, "Random configs per layer");
  gc_cmd->add_option("--seed", gc.seed, "RNG seed");
  gc_cmd->add_option("--threshold", gc.threshold, "Max relative error");
  gc_cmd->add_option("--eps", gc.eps, "Central-difference step");
  gc_cmd->add_option("--floor", gc.floor, "Relative-error denominator floor");
  gc_cmd->add_option("--layers", gc.layers, "Subset of: ffn moe moe_balance pkm umv2 tucker ultramem_balance model");

  // init-verify
  auto* iv_cmd = app.add_subcommand("init-verify", "Check residual growth and memory/FFN std parity at init");
  std::string iv_config, iv_preset = "umv2";
  std::size_t iv_layers = 0, iv_samples = 4096;
  std::uint64_t iv_seed = 1;
  iv_cmd->add_option("--config", iv_config, "Model or training config");
  iv_cmd->add_option("--preset", iv_preset, "Desk-scale arm when no config is given");
  iv_cmd->add_option("--layers", iv_layers, "Override the block count");
  iv_cmd->add_option("--samples", iv_samples, "Unit-normal input tokens");
  iv_cmd->add_option("--seed", iv_seed, "RNG seed for the inputs");

  // plan
  auto* plan_cmd = app.add_subcommand("plan", "Value-table sharing plan");
  std::size_t plan_layers = 24, plan_g = 4;
  std::string plan_mode = "ring", plan_columns;
  bool plan_text_only = false;
  plan_cmd->add_option("--layers", plan_layers, "Memory layers");
  plan_cmd->add_option("--g", plan_g, "Tables per layer");
  plan_cmd->add_option("--mode", plan_mode, "none, noring, ring, block");
  plan_cmd->add_option("--columns", plan_columns, "Comma-separated layers to show (default: all)");
  plan_cmd->add_flag("--text", plan_text_only, "Print only the table");

  // cost
  auto* cost_cmd = app.add_subcommand("cost", "Memory computational proportion of the key-dimension sweep");
  std::size_t cost_kdim = 0, cost_batch = 1;
  cost_cmd->add_option("--key-dim", cost_kdim, "Report one row of the sweep");
  cost_cmd->add_option("--batch-tokens", cost_batch, "Tokens for FLOP and byte totals");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      TrainConfig cfg;
      if (!train_config.empty() == !preset.empty()) throw UsageError("train needs exactly one of --config, --preset");
      if (!preset.empty()) {
        cfg = desk_config(preset, data_dir.empty() ? default_data_dir() : data_dir, "runs",
                          total_tokens > 0 ? total_tokens : 30e6);
      } else {
        cfg = load_train_config(train_config);
        if (!data_dir.empty()) cfg.data = {data_dir};
        if (total_tokens > 0) {
          const double s = total_tokens / cfg.total_tokens;
          cfg.total_tokens = total_tokens;
          cfg.lr.total_tokens = total_tokens;
          cfg.lr.warmup_tokens *= s;
          cfg.value_lr.budget_tokens *= s;
        }
      }
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      cfg.out_dir = resolve_out_dir(cfg.out_dir);
      if (lr > 0) cfg.lr.base = lr;
      if (model_seed >= 0) cfg.model.seed = static_cast<std::uint64_t>(model_seed);
      if (data_seed >= 0) cfg.data_seed = static_cast<std::uint64_t>(data_seed);
      if (log_interval > 0) cfg.log_interval = log_interval;
      cfg.validate();
      if (print_config) {
        print(to_json(cfg));
        return 0;
      }
      const auto res = train(cfg, &std::cerr);
      print({{"final_eval_loss", res.final_eval},
             {"steps", res.records.empty() ? 0 : res.records.back().step},
             {"tokens", res.records.empty() ? 0 : res.records.back().tokens},
             {"checkpoint", res.checkpoint},
             {"metrics", res.metrics_path}});
      return 0;
    }

    if (*eval_cmd) {
      const auto loaded = load_checkpoint<float>(ckpt);
      if (eval_data.empty()) eval_data = {default_data_dir()};
      const auto corpus = load_corpus(eval_data, eval_fraction);
      const auto& data = split == "eval" ? corpus.eval : corpus.train;
      const std::size_t seq = eval_seq > 0 ? eval_seq : loaded.model.cfg.context;
      const double loss = evaluate(loaded.model, data, seq, eval_batch, max_tokens);
      print({{"eval_loss", loss}, {"split", split}, {"bytes", data.size()}, {"seq", seq}, {"checkpoint", ckpt}});
      return 0;
    }

    if (*cal_cmd) {
      ModelConfig mc = cal_config.empty() ? desk_config(cal_preset, default_data_dir(), "runs").model
                                          : model_from_file(cal_config);
      if (!mc.memory) throw UsageError("calibrate needs a config with a memory layer");
      const auto lc = mc.layer_memory_config();
      RngStream init_rng(cal_seed, 1);
      auto p = retrieval_init<float>(lc.retrieval(), init_rng);
      RngStream rng(cal_seed, 2);
      CalibOptions opt;
      opt.samples = cal_samples;
      const auto rep = calibrate_sigma_s<float>(p, lc.retrieval(), rng, opt);
      const double target = mc.init.target == InitTarget::kExactSilu
                                ? ffn_output_variance_exact(mc.k_inner(), static_cast<double>(mc.layers))
                                : ffn_output_variance(mc.k_inner(), static_cast<double>(mc.layers));
      const double sv = solve_sigma_v_for_layer(lc, target, rep.sigma_s);
      const bool ok = std::abs(rep.mean_score - 1.0) <= 0.05 && rep.sigma_s > 0.0;
      print({{"gamma_q", rep.gamma_q},
             {"gamma_k", rep.gamma_k},
             {"sigma_s", rep.sigma_s},
             {"mean_score", rep.mean_score},
             {"tuned_mean", rep.tuned_mean},
             {"samples", rep.samples},
             {"bisection_steps", rep.steps},
             {"init_target", to_string(mc.init.target)},
             {"ffn_output_variance", target},
             {"sigma_v", sv},
             {"passed", ok}});
      return ok ? 0 : 1;
    }

    if (*gc_cmd) {
      const auto rep = run_gradcheck_suite(gc);
      print(rep.to_json());
      return rep.passed() ? 0 : 1;
    }

    if (*iv_cmd) {
      ModelConfig mc = iv_config.empty() ? desk_config(iv_preset, default_data_dir(), "runs").model
                                         : model_from_file(iv_config);
      if (iv_layers > 0) mc.layers = iv_layers;
      std::vector<MemoryInitInfo> info;
      const auto model = build_model<float>(mc, &info);
      RngStream rng(iv_seed, 0x1e);
      const auto rep = verify_init(model, iv_samples, rng);
      json j = rep.to_json();
      for (const auto& i : info) {
        j["memory_init"].push_back({{"block", i.block},
                                    {"sigma_v", i.sigma_v},
                                    {"sigma_s", i.calib.sigma_s},
                                    {"target_variance", i.target_variance}});
      }
      print(j);
      return rep.passed() ? 0 : 1;
    }

    if (*plan_cmd) {
      const auto plan = build_plan(plan_layers, plan_g, parse_sharing_mode(plan_mode));
      const auto text = plan_text({plan}, parse_list(plan_columns));
      if (plan_text_only) {
        std::cout << text;
        return 0;
      }
      json j = plan_json(plan);
      j["label"] = plan_label(plan);
      j["table"] = text;
      print(j);
      return 0;
    }

    if (*cost_cmd) {
      const auto rows = kdim_table();
      json out;
      bool monotone = true;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        if (cost_kdim != 0 && r.key_dim != cost_kdim) continue;
        const auto rep = flops_and_access(kdim_base_config(r.key_dim), r.ffn_inner, cost_batch);
        const auto& b = rep.per_token;
        out["rows"].push_back({{"key_dim", r.key_dim},
                               {"mcp", r.mcp},
                               {"published_mcp", r.published_mcp},
                               {"ffn_inner", r.ffn_inner},
                               {"memory_flops", rep.memory_flops},
                               {"ffn_flops", rep.ffn_flops},
                               {"bytes_accessed", rep.bytes_accessed},
                               {"macs_per_token",
                                {{"query", b.query_macs},
                                 {"axis", b.axis_macs},
                                 {"proxy", b.proxy_macs},
                                 {"subgrid", b.subgrid_macs},
                                 {"aggregation", b.aggregation_macs},
                                 {"projector", b.projector_macs},
                                 {"ffn", b.ffn_macs}}}});
      }
      for (std::size_t i = 1; i < rows.size(); ++i) monotone = monotone && rows[i].mcp > rows[i - 1].mcp;
      if (out["rows"].is_null()) throw UsageError("no sweep row with key_dim " + std::to_string(cost_kdim));
      bool within = true;
      for (const auto& r : rows) {
        if (r.key_dim == 524) within = std::abs(r.mcp - 0.17) <= 0.03;
      }
      out["monotone_in_key_dim"] = monotone;
      out["key_dim_524_within_3_points_of_17"] = within;
      out["passed"] = monotone && within;
      print(out);
      return monotone && within ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
