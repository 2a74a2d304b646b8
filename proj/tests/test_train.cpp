// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "doctest.h"
#include "umv2/checkpoint.hpp"
#include "umv2/errors.hpp"
#include "umv2/train.hpp"

using namespace umv2;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("umv2_train_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

TrainConfig tiny_config(const fs::path& data, const fs::path& out, bool memory) {
  TrainConfig c;
  c.model.layers = 1;
  c.model.hidden = 32;
  c.model.attn_heads = 2;
  c.model.ffn_inner = 64;
  c.model.vocab = 256;
  c.model.context = 16;
  if (memory) {
    MemoryLayerConfig m;
    m.n = 8;
    m.key_dim = 8;
    m.top_m = 4;
    m.axis_top_m = 4;
    m.value_dim = 8;
    m.prevalue_dim = 4;
    c.model.memory = m;
  }
  c.model.init.calibrate = false;
  c.data = {data.string()};
  c.batch = 4;
  c.seq = 16;
  c.total_tokens = 64.0 * 40;
  c.log_interval = 10;
  c.eval_tokens = 256;
  c.lr.base = 3e-3;
  c.lr.total_tokens = c.total_tokens;
  c.lr.warmup_tokens = 64.0 * 4;
  c.out_dir = out.string();
  return c;
}

}  // namespace

TEST_CASE("value LR multiplier schedules") {
  ValueLrSchedule d{ValueLrMode::kDecay, 1.0, 4.0, 1000.0};
  CHECK(d.at(0) == 4.0);
  CHECK(d.at(500) == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(d.at(1000) == 1.0);
  CHECK(d.at(5000) == 1.0);
  double prev = d.at(0);
  for (int t = 1; t <= 2000; ++t) {
    const double v = d.at(t);
    CHECK(v >= 1.0);
    CHECK(v <= prev);
    CHECK(std::abs(v - prev) <= 3.0 / 1000.0 + 1e-12);  // continuous, slope (c0 - 1) / B
    prev = v;
  }
  for (double c : {1.0, 1.5}) {
    ValueLrSchedule k{ValueLrMode::kConstant, c, 4.0, 1000.0};
    for (int t = 0; t <= 3000; t += 100) CHECK(k.at(t) == c);
  }
  CHECK_THROWS_AS(parse_value_lr_mode("step"), ConfigError);
}

TEST_CASE("base LR schedules") {
  LrSchedule s{1.0, 100, 1100, DecayShape::kCosine, 0.1};
  CHECK(s.at(50) == doctest::Approx(0.5));
  CHECK(s.at(100) == doctest::Approx(1.0));
  CHECK(s.at(600) == doctest::Approx(0.55));
  CHECK(s.at(1100) == doctest::Approx(0.1));
  s.decay = DecayShape::kLinear;
  CHECK(s.at(600) == doctest::Approx(0.55));
  s.decay = DecayShape::kConstant;
  CHECK(s.at(1100) == 1.0);
}

TEST_CASE("value tables get exactly the multiplied LR") {
  ModelConfig mc;
  mc.layers = 1;
  mc.hidden = 8;
  mc.attn_heads = 2;
  mc.ffn_inner = 8;
  mc.vocab = 5;
  mc.context = 4;
  MemoryLayerConfig m;
  m.n = 4;
  m.key_dim = 4;
  m.top_m = 2;
  m.axis_top_m = 2;
  m.value_dim = 4;
  m.prevalue_dim = 2;
  mc.memory = m;
  mc.init.calibrate = false;
  for (double mult : {1.0, 4.0}) {
    auto model = build_model<double>(mc);
    auto before = model;
    auto grads = model.zeros_like();
    grads.for_each([](const std::string&, Matrix<double>& t) { t = Matrix<double>(t.rows(), t.cols(), 1.0); });
    OptimConfig oc;
    oc.weight_decay = 0.0;
    oc.eps = 0.0;
    AdamW<double> opt(model, oc);
    opt.update(model, grads, 0.01, mult);
    CHECK(model.embed(0, 0) - before.embed(0, 0) == doctest::Approx(-0.01).epsilon(1e-12));
    CHECK(model.tables[0].values(3, 1) - before.tables[0].values(3, 1) == doctest::Approx(-0.01 * mult).epsilon(1e-12));
    CHECK(model.tables[0].prevalues(0, 0) - before.tables[0].prevalues(0, 0) ==
          doctest::Approx(-0.01 * mult).epsilon(1e-12));
  }
}

TEST_CASE("corpus split and evaluation") {
  TempDir dir("split");
  std::string a(100, 'a'), b(50, 'b');
  write_text(dir.path / "a.txt", a);
  write_text(dir.path / "b.txt", b);
  const auto c = load_corpus({dir.path.string()});
  CHECK(c.files.size() == 2);
  CHECK(c.train.size() == 98 + 49);
  CHECK(c.eval.size() == 3);
  CHECK(c.eval[0] == 'a');
  CHECK(c.eval[2] == 'b');
  CHECK_THROWS_AS(load_corpus({(dir.path / "missing").string()}), UsageError);

  ModelConfig mc;
  mc.layers = 1;
  mc.hidden = 16;
  mc.attn_heads = 2;
  mc.ffn_inner = 16;
  mc.context = 8;
  auto m = build_model<float>(mc);
  m.unembed.set_zero();
  CHECK(evaluate(m, c.train, 8, 4) == doctest::Approx(std::log(256.0)).epsilon(1e-6));
  m = build_model<float>(mc);
  CHECK(evaluate(m, c.train, 8, 4) == evaluate(m, c.train, 8, 4));
  CHECK_THROWS_AS(evaluate(m, std::vector<std::uint8_t>{}, 8, 4), UsageError);
}

TEST_CASE("config file parsing") {
  TempDir dir("cfg");
  const auto cfg = tiny_config(dir.path, dir.path / "out", true);
  const auto j = to_json(cfg);
  const auto back = train_config_from_json(j);
  CHECK(to_json(back) == j);
  auto bad = j;
  bad["optim"]["momentum"] = 0.9;
  CHECK_THROWS_WITH_AS(train_config_from_json(bad), doctest::Contains("optim.momentum"), ConfigError);
  bad = j;
  bad["value_lr"]["c0"] = 0.5;
  CHECK_THROWS_WITH_AS(train_config_from_json(bad), doctest::Contains("value_lr.c0"), ConfigError);
  bad = j;
  bad["train"]["seq"] = 64;
  CHECK_THROWS_WITH_AS(train_config_from_json(bad), doctest::Contains("train.seq"), ConfigError);
}

TEST_CASE("overfitting a bigram corpus drives the loss to zero") {
  TempDir dir("overfit");
  std::string text;
  for (int i = 0; i < 4000; ++i) text += "ab";
  write_text(dir.path / "ab.txt", text);
  auto cfg = tiny_config(dir.path / "ab.txt", dir.path / "run", false);
  cfg.total_tokens = 64.0 * 150;
  cfg.lr.total_tokens = cfg.total_tokens;
  cfg.lr.base = 1e-2;
  cfg.log_interval = 50;
  const auto res = train(cfg);
  CHECK(res.final_eval < 0.02);
  const auto loaded = load_checkpoint<float>(res.checkpoint);
  const auto corpus = load_corpus(cfg.data);
  CHECK(evaluate(loaded.model, corpus.train, 16, 4, 512) < 0.02);
}

TEST_CASE("same seed gives byte-identical metrics and checkpoints") {
  TempDir dir("det");
  std::string text;
  for (int i = 0; i < 3000; ++i) text += static_cast<char>('a' + (i * i + 3 * i) % 23);
  write_text(dir.path / "t.txt", text);
  auto cfg = tiny_config(dir.path / "t.txt", dir.path / "r1", true);
  cfg.model.init.calibrate = true;
  cfg.aux.tucker = true;
  cfg.aux.tucker_cfg = {1.0, 0.2};
  cfg.aux.balance = true;
  cfg.value_lr = {ValueLrMode::kDecay, 1.0, 4.0, cfg.total_tokens / 4};
  const auto r1 = train(cfg);
  cfg.out_dir = (dir.path / "r2").string();
  const auto r2 = train(cfg);
  const auto m1 = slurp(r1.metrics_path);
  CHECK(!m1.empty());
  CHECK(m1 == slurp(r2.metrics_path));
  CHECK(slurp(r1.checkpoint) == slurp(r2.checkpoint));
  std::istringstream lines(m1);
  std::string line;
  std::size_t n = 0, prev_step = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["step"].get<std::size_t>() > prev_step);
    prev_step = j["step"];
    CHECK(j["row_entropy"].get<double>() > 0.0);
    ++n;
  }
  CHECK(n == 4);
  cfg.data_seed = 2;
  cfg.out_dir = (dir.path / "r3").string();
  CHECK(slurp(train(cfg).metrics_path) != m1);
}

TEST_CASE("non-finite loss aborts with the last good checkpoint") {
  TempDir dir("nan");
  std::string text;
  for (int i = 0; i < 2000; ++i) text += static_cast<char>('a' + i % 7);
  write_text(dir.path / "t.txt", text);
  auto cfg = tiny_config(dir.path / "t.txt", dir.path / "run", false);
  cfg.lr = {1e30, 0, cfg.total_tokens, DecayShape::kConstant, 1.0};
  cfg.log_interval = 1;
  CHECK_THROWS_WITH_AS(train(cfg), doctest::Contains("last good checkpoint"), NumericError);
  CHECK(fs::exists(dir.path / "run" / "last_good.ckpt"));
}
