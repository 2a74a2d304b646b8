// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>
#include <functional>

#include "umv2/aux_losses.hpp"
#include "umv2/baselines.hpp"
#include "umv2/errors.hpp"
#include "umv2/gradcheck.hpp"
#include "umv2/memory_layer.hpp"
#include "umv2/model.hpp"
#include "umv2/svd.hpp"

namespace umv2 {

namespace {

// top_m may not exceed the cells the axis top-k can reach.
std::size_t candidate_cells(const RetrievalConfig& c) { return c.pairs() * c.axis_candidates() * c.axis_candidates(); }

using Sig = std::vector<std::uint32_t>;

Matrix<double> randn(std::size_t r, std::size_t c, RngStream& rng, double std = 1.0) {
  Matrix<double> m(r, c);
  rng.fill_normal(m.flat(), 0.0, std);
  return m;
}

// Pairs the tensors of `p` with those of `g` by enumeration order.
template <typename P>
std::vector<GradEntry> pair_entries(P& p, P& g, const std::string& prefix = "") {
  std::vector<Matrix<double>*> gs;
  g.for_each([&](const std::string&, Matrix<double>& m) { gs.push_back(&m); });
  std::vector<GradEntry> out;
  std::size_t i = 0;
  p.for_each([&](const std::string& name, Matrix<double>& m) { out.push_back({prefix + name, &m, gs[i++]}); });
  return out;
}

SuiteCase finish(const std::string& layer, std::size_t idx, nlohmann::json cfg, const GradCheckResult& r) {
  return {layer, idx, std::move(cfg), r.max_rel_error, r.checked, r.skipped, r.worst, r.worst_analytic, r.worst_numeric};
}

SuiteCase ffn_case(std::size_t idx, RngStream& rng, const GradCheckOptions& base) {
  const std::size_t h = 2 + rng.below(12), k = 2 + rng.below(20), t = 1 + rng.below(4);
  auto p = ffn_init<double>(h, k, 2, rng);
  for (auto* w : {&p.w1, &p.w2, &p.w3}) rng.fill_normal(w->flat(), 0.0, 0.5);
  auto x = randn(t, h, rng);
  auto r = randn(t, h, rng);
  FfnCache<double> cache;
  ffn_forward<double>(p, x, &cache);
  auto g = FfnParams<double>::zeros(h, k);
  Matrix<double> dx(t, h);
  ffn_backward<double>(p, cache, r, g, dx);
  auto entries = pair_entries(p, g);
  entries.push_back({"x", &x, &dx});
  const auto res = check_gradients([&] { return project(ffn_forward<double>(p, x), r); }, entries, base);
  return finish("ffn", idx, {{"hidden", h}, {"inner", k}, {"tokens", t}}, res);
}

SuiteCase moe_case(std::size_t idx, RngStream& rng, const GradCheckOptions& base) {
  const GateMode mode = std::array{GateMode::kRaw, GateMode::kSoftmaxThenTopM, GateMode::kTopMThenSoftmax}[idx % 3];
  const std::size_t in = 2 + rng.below(8), inner = 2 + rng.below(6), out = 2 + rng.below(8);
  const std::size_t experts = 2 + rng.below(6), m = 1 + rng.below(experts), t = 1 + rng.below(4);
  auto p = moe_init<double>(in, inner, out, experts, m, rng);
  auto x = randn(t, in, rng);
  auto r = randn(t, out, rng);
  MoeCache<double> cache;
  moe_forward<double>(p, x, mode, nullptr, &cache);
  auto g = MoeParams<double>::zeros_like(p);
  Matrix<double> dx(t, in);
  moe_backward<double>(p, cache, r, g, dx);
  auto entries = pair_entries(p, g);
  entries.push_back({"x", &x, &dx});
  Sig sel;
  auto loss = [&] {
    MoeCache<double> c;
    const double l = project(moe_forward<double>(p, x, mode, nullptr, &c), r);
    sel = c.selected;
    return l;
  };
  const auto res = check_gradients(loss, entries, base, [&] { return sel; });
  return finish("moe", idx,
                {{"in", in}, {"experts", experts}, {"top_m", m}, {"tokens", t}, {"gate_mode", to_string(mode)}}, res);
}

SuiteCase moe_balance_case(std::size_t idx, RngStream& rng, const GradCheckOptions& base) {
  const std::size_t in = 2 + rng.below(8), experts = 2 + rng.below(6), m = 1 + rng.below(experts);
  const std::size_t t = 1 + rng.below(6);
  auto p = moe_init<double>(in, 3, 3, experts, m, rng);
  auto x = randn(t, in, rng);
  const double beta = 0.5;
  GateStats stats;
  MoeCache<double> cache;
  moe_forward<double>(p, x, GateMode::kSoftmaxThenTopM, &stats, &cache);
  auto g = MoeParams<double>::zeros_like(p);
  Matrix<double> dx(t, in);
  moe_balance_backward<double>(p, cache, stats, beta, g, dx);
  Sig sel;
  auto loss = [&] {
    GateStats s;
    MoeCache<double> c;
    moe_forward<double>(p, x, GateMode::kSoftmaxThenTopM, &s, &c);
    sel = c.selected;
    return moe_balance_loss(s, beta);
  };
  const auto res = check_gradients(loss, {{"gate", &p.gate, &g.gate}, {"x", &x, &dx}}, base, [&] { return sel; });
  return finish("moe_balance", idx, {{"in", in}, {"experts", experts}, {"top_m", m}, {"tokens", t}}, res);
}

SuiteCase pkm_case(std::size_t idx, RngStream& rng, const GradCheckOptions& base) {
  const std::size_t in = 2 + rng.below(10), n = 2 + rng.below(8), dk = 2 + rng.below(4);
  const std::size_t axis = 1 + rng.below(n), m = 1 + rng.below(axis * axis), t = 1 + rng.below(3);
  const std::size_t heads = 1 + rng.below(2);
  auto p = pkm_init<double>(in, n, dk, 3, heads, m, axis, rng);
  auto x = randn(t, in, rng);
  auto r = randn(t, 3, rng);
  PkmCache<double> cache;
  pkm_forward<double>(p, x, &cache);
  auto g = PkmParams<double>::zeros_like(p);
  Matrix<double> dx(t, in);
  pkm_backward<double>(p, cache, r, g, dx);
  auto entries = pair_entries(p, g);
  entries.push_back({"x", &x, &dx});
  Sig sel;
  auto loss = [&] {
    PkmCache<double> c;
    const double l = project(pkm_forward<double>(p, x, &c), r);
    sel = c.cells;
    return l;
  };
  const auto res = check_gradients(loss, entries, base, [&] { return sel; });
  return finish("pkm", idx, {{"in", in}, {"n", n}, {"key_dim", dk}, {"heads", heads}, {"top_m", m}, {"axis_top_m", axis}},
                res);
}

SuiteCase umv2_case(std::size_t idx, RngStream& rng, const GradCheckOptions& base) {
  MemoryLayerConfig cfg;
  cfg.gate = std::array{GateActivation::kNone, GateActivation::kSilu, GateActivation::kOff}[idx % 3];
  cfg.projector = (idx / 3) % 2 == 0 ? ProjectorMode::kShared : ProjectorMode::kPerHeadPair;
  cfg.hidden = 4 + rng.below(13);
  cfg.n = 3 + rng.below(6);
  cfg.key_dim = 2 + rng.below(4);
  cfg.rank = 1 + rng.below(3);
  cfg.heads = 1 + rng.below(2);
  cfg.axis_top_m = 1 + rng.below(cfg.n);
  cfg.top_m = 1 + rng.below(std::min<std::size_t>(8, cfg.num_values()));
  cfg.value_dim = 2 + rng.below(5);
  cfg.prevalue_dim = cfg.gate == GateActivation::kOff ? 0 : 1 + rng.below(4);
  cfg.top_m = std::min(cfg.top_m, candidate_cells(cfg.retrieval()));
  const std::size_t t = 1 + rng.below(3);
  auto p = umv2_init<double>(cfg, 1000 + idx, rng);
  rng.fill_normal(p.retrieval.cores.flat(), 0.0, 1.0);
  auto table = value_table_init<double>(cfg.num_values(), cfg.value_dim, cfg.prevalue_dim, 0.5, rng);
  ValuePool<double> pool{{&table}};
  auto x = randn(t, cfg.hidden, rng);
  auto r = randn(t, cfg.hidden, rng);
  Umv2Cache<double> cache;
  umv2_forward<double>(p, cfg, pool, x, &cache);
  auto g = Umv2Params<double>::zeros_like(p);
  ValueTable<double> gt{Matrix<double>(cfg.num_values(), cfg.value_dim),
                        Matrix<double>(cfg.num_values(), cfg.prevalue_dim)};
  ValuePool<double> gp{{&gt}};
  Matrix<double> dx(t, cfg.hidden);
  umv2_backward<double>(p, cfg, pool, cache, r, g, gp, dx);
  auto entries = pair_entries(p, g);
  entries.push_back({"values", &table.values, &gt.values});
  if (cfg.prevalue_dim > 0) entries.push_back({"prevalues", &table.prevalues, &gt.prevalues});
  entries.push_back({"x", &x, &dx});
  Sig sel;
  auto loss = [&] {
    Umv2Cache<double> c;
    const double l = project(umv2_forward<double>(p, cfg, pool, x, &c), r);
    sel = c.retrieval.selected.raw;
    return l;
  };
  const auto res = check_gradients(loss, entries, base, [&] { return sel; });
  return finish("umv2", idx,
                {{"hidden", cfg.hidden},
                 {"n", cfg.n},
                 {"key_dim", cfg.key_dim},
                 {"rank", cfg.rank},
                 {"heads", cfg.heads},
                 {"top_m", cfg.top_m},
                 {"axis_top_m", cfg.axis_top_m},
                 {"value_dim", cfg.value_dim},
                 {"prevalue_dim", cfg.prevalue_dim},
                 {"gate", to_string(cfg.gate)},
                 {"projector", to_string(cfg.projector)}},
                res);
}

SuiteCase tucker_case(std::size_t idx, RngStream& rng, const GradCheckOptions& base) {
  const PenaltyConfig pc{0.5 + rng.uniform(), 0.1 + 0.4 * rng.uniform()};
  const std::size_t r = 2 + rng.below(3), pairs = 1 + rng.below(4);
  // Redraw until every core keeps clear of the hinge and of repeated
  // singular values, where the penalty is not differentiable.
  Matrix<double> cores;
  for (;;) {
    cores = randn(pairs, r * r, rng);
    bool ok = true;
    for (std::size_t a = 0; a < pairs && ok; ++a) {
      Matrix<double> c(r, r, std::vector<double>(cores.row(a).begin(), cores.row(a).end()));
      const auto sv = svd_small(c).singular_values;
      for (std::size_t i = 0; i < r; ++i) {
        ok &= std::abs(sv[i] - pc.tau) > 1e-3;
        if (i > 0) ok &= sv[i - 1] - sv[i] > 1e-3;
      }
    }
    if (ok) break;
  }
  Matrix<double> g(pairs, r * r);
  tucker_penalty_all<double>(cores, r, pc, &g);
  const auto res =
      check_gradients([&] { return tucker_penalty_all<double>(cores, r, pc); }, {{"cores", &cores, &g}}, base);
  return finish("tucker", idx, {{"rank", r}, {"pairs", pairs}, {"alpha", pc.alpha}, {"tau", pc.tau}}, res);
}

SuiteCase ultramem_balance_case(std::size_t idx, RngStream& rng, const GradCheckOptions& base) {
  RetrievalConfig cfg;
  cfg.input_dim = 3 + rng.below(6);
  cfg.n = 3 + rng.below(6);
  cfg.key_dim = 2 + rng.below(4);
  cfg.rank = 1 + rng.below(3);
  cfg.heads = 1 + rng.below(2);
  cfg.axis_top_m = 1 + rng.below(cfg.n);
  cfg.top_m = std::min<std::size_t>(1 + rng.below(4), candidate_cells(cfg));
  const std::size_t t = 1 + rng.below(4);
  auto p = retrieval_init<double>(cfg, rng);
  rng.fill_normal(p.cores.flat(), 0.0, 1.0);
  auto x = randn(t, cfg.input_dim, rng);
  const double beta = 0.3;
  RetrievalCache<double> cache;
  retrieval_forward<double>(p, cfg, x, cache);
  auto g = RetrievalParams<double>::zeros_like(p);
  AxisGrads<double> axis;
  ultramem_balance_loss<double>(p, cfg, cache, beta, &axis, &g);
  Matrix<double> dx(t, cfg.input_dim);
  retrieval_backward_axes<double>(p, cfg, cache, axis, g, dx);
  Sig sig;
  auto loss = [&] {
    RetrievalCache<double> c;
    retrieval_forward<double>(p, cfg, x, c);
    auto r = ultramem_balance_loss<double>(p, cfg, c, beta);
    sig.clear();
    for (auto v : r.stats.row_counts) sig.push_back(static_cast<std::uint32_t>(v));
    for (auto v : r.stats.col_counts) sig.push_back(static_cast<std::uint32_t>(v));
    return r.loss;
  };
  auto entries = pair_entries(p, g);
  entries.push_back({"x", &x, &dx});
  const auto res = check_gradients(loss, entries, base, [&] { return sig; });
  return finish("ultramem_balance", idx,
                {{"n", cfg.n}, {"key_dim", cfg.key_dim}, {"rank", cfg.rank}, {"heads", cfg.heads},
                 {"axis_top_m", cfg.axis_top_m}, {"tokens", t}},
                res);
}

SuiteCase model_case(std::size_t idx, RngStream& rng, const GradCheckOptions& base) {
  ModelConfig c;
  c.layers = 1 + rng.below(2);
  c.attn_heads = 1 + rng.below(2);
  c.hidden = 4 * c.attn_heads * (1 + rng.below(2));
  c.ffn_inner = 4 + rng.below(12);
  c.vocab = 5 + rng.below(8);
  c.context = 6;
  MemoryLayerConfig m;
  m.n = 3 + rng.below(4);
  m.key_dim = 2 + rng.below(3);
  m.rank = 1 + rng.below(2);
  m.top_m = 1 + rng.below(4);
  m.axis_top_m = 1 + rng.below(m.n);
  m.value_dim = 2 + rng.below(4);
  m.gate = std::array{GateActivation::kNone, GateActivation::kSilu, GateActivation::kOff}[idx % 3];
  m.prevalue_dim = m.gate == GateActivation::kOff ? 0 : 1 + rng.below(3);
  m.top_m = std::min(m.top_m, candidate_cells(m.retrieval()));
  c.memory = m;
  c.init.calibrate = false;
  c.init.sigma_v = 0.3;
  c.seed = 100 + idx;
  auto model = build_model<double>(c);
  for (auto& b : model.blocks) rng.fill_normal(b.mem->retrieval.cores.flat(), 0.0, 1.0);
  TokenBatch batch{2, 1 + rng.below(c.context), {}};
  for (std::size_t i = 0; i < batch.batch * (batch.seq + 1); ++i) {
    batch.tokens.push_back(static_cast<std::uint16_t>(rng.below(c.vocab)));
  }
  AuxConfig aux;
  aux.tucker = true;
  aux.tucker_cfg = {1.0, 0.3};
  aux.balance = true;
  aux.balance_beta = 0.2;
  auto g = model.zeros_like();
  lm_loss<double>(model, batch, &g, aux);
  const auto entries = pair_entries(model, g);
  GradCheckOptions opt = base;
  opt.max_coords = 16;
  opt.seed = idx;
  const auto res = check_gradients([&] { return lm_loss<double>(model, batch, nullptr, aux).total; }, entries, opt,
                                   [&] { return routing_signature(model, batch); });
  return finish("model", idx,
                {{"layers", c.layers}, {"hidden", c.hidden}, {"attn_heads", c.attn_heads}, {"seq", batch.seq},
                 {"gate", to_string(m.gate)}, {"n", m.n}, {"top_m", m.top_m}},
                res);
}

}  // namespace

std::vector<std::string> suite_layers() {
  return {"ffn", "moe", "moe_balance", "pkm", "umv2", "tucker", "ultramem_balance", "model"};
}

bool SuiteReport::passed() const {
  if (cases.empty()) return false;
  for (const auto& c : cases) {
    if (!(c.max_rel_error <= threshold) || c.checked == 0) return false;
  }
  return true;
}

nlohmann::json SuiteReport::to_json() const {
  nlohmann::json j;
  j["threshold"] = threshold;
  j["passed"] = passed();
  j["seconds"] = seconds;
  auto& layers = j["layers"] = nlohmann::json::object();
  for (const auto& c : cases) {
    auto& l = layers[c.layer];
    if (l.is_null()) l = {{"configs", 0}, {"max_rel_error", 0.0}, {"checked", 0}, {"skipped", 0}, {"worst", ""}};
    l["configs"] = l["configs"].get<std::size_t>() + 1;
    l["checked"] = l["checked"].get<std::size_t>() + c.checked;
    l["skipped"] = l["skipped"].get<std::size_t>() + c.skipped;
    if (c.max_rel_error >= l["max_rel_error"].get<double>()) {
      l["max_rel_error"] = c.max_rel_error;
      l["worst"] = c.worst;
      l["worst_config"] = c.config;
      l["worst_analytic"] = c.worst_analytic;
      l["worst_numeric"] = c.worst_numeric;
    }
  }
  return j;
}

SuiteReport run_gradcheck_suite(const SuiteOptions& opt) {
  using Fn = std::function<SuiteCase(std::size_t, RngStream&, const GradCheckOptions&)>;
  const std::vector<std::pair<std::string, Fn>> all = {
      {"ffn", ffn_case},       {"moe", moe_case},       {"moe_balance", moe_balance_case},
      {"pkm", pkm_case},       {"umv2", umv2_case},     {"tucker", tucker_case},
      {"ultramem_balance", ultramem_balance_case},      {"model", model_case}};
  for (const auto& l : opt.layers) {
    if (std::none_of(all.begin(), all.end(), [&](const auto& a) { return a.first == l; })) {
      throw UsageError("unknown gradcheck layer '" + l + "'");
    }
  }
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport rep;
  rep.threshold = opt.threshold;
  GradCheckOptions base;
  base.eps = opt.eps;
  base.floor = opt.floor;
  std::uint64_t stream = 0;
  for (const auto& [name, fn] : all) {
    ++stream;
    if (!opt.layers.empty() && std::find(opt.layers.begin(), opt.layers.end(), name) == opt.layers.end()) continue;
    RngStream rng(opt.seed, stream);
    for (std::size_t i = 0; i < opt.configs; ++i) rep.cases.push_back(fn(i, rng, base));
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace umv2
