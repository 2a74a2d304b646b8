// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "json_util.hpp"
#include "umv2/ops.hpp"

namespace umv2 {

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model." + what);
  };
  need(layers >= 1, "layers must be >= 1");
  need(hidden >= 1, "hidden must be >= 1");
  need(attn_heads >= 1 && hidden % attn_heads == 0, "attn_heads must divide hidden");
  need((hidden / attn_heads) % 2 == 0, "hidden / attn_heads must be even (rotary encoding)");
  need(ffn_inner >= 1, "ffn_inner must be >= 1");
  need(vocab >= 2 && vocab <= 65536, "vocab must be in [2, 65536]");
  need(context >= 1, "context must be >= 1");
  need(memory_interval >= 1, "memory_interval must be >= 1");
  need(norm_eps > 0.0, "norm_eps must be positive");
  need(rope_base > 1.0, "rope_base must be > 1");
  need(!init.calibrate || init.calib_samples >= 10000, "init.calib_samples must be >= 10000");
  need(!init.sigma_v || *init.sigma_v >= 0.0, "init.sigma_v must be >= 0");
  if (sharing != SharingMode::kNone || sharing_g != 1) {
    need(memory.has_value(), "sharing requires a memory config");
    need(memory_interval == 1, "sharing requires memory_interval = 1");
    need(sharing != SharingMode::kNone, "sharing.g > 1 requires a sharing mode");
  }
  if (memory) {
    need(memory_layer_count() >= 1, "memory_interval exceeds layers; no block hosts memory");
    need(sharing_g >= 1 && sharing_g <= memory_layer_count(), "sharing.g must be in [1, memory layers]");
    try {
      layer_memory_config().validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("model.memory: ") + e.what());
    }
  }
}

bool ModelConfig::hosts_memory(std::size_t block) const {
  return memory.has_value() && (block + 1) % memory_interval == 0;
}

std::size_t ModelConfig::memory_layer_count() const { return memory ? layers / memory_interval : 0; }

MemoryLayerConfig ModelConfig::layer_memory_config() const {
  if (!memory) throw ConfigError("model.memory is not set");
  MemoryLayerConfig c = *memory;
  c.hidden = hidden;
  if (sharing != SharingMode::kNone && sharing_g > 1) c.n = effective_key_count(memory->n, sharing_g);
  return c;
}

std::size_t ModelConfig::table_rows() const {
  return memory ? memory->heads * memory->heads * memory->n * memory->n : 0;
}

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["layers"] = c.layers;
  j["hidden"] = c.hidden;
  j["attn_heads"] = c.attn_heads;
  j["ffn_inner"] = c.ffn_inner;
  j["vocab"] = c.vocab;
  j["context"] = c.context;
  if (c.memory) {
    const auto& m = *c.memory;
    j["memory"] = {{"n", m.n},
                   {"key_dim", m.key_dim},
                   {"rank", m.rank},
                   {"heads", m.heads},
                   {"top_m", m.top_m},
                   {"axis_top_m", m.axis_top_m},
                   {"value_dim", m.value_dim},
                   {"prevalue_dim", m.prevalue_dim},
                   {"gate", to_string(m.gate)},
                   {"projector", to_string(m.projector)},
                   {"prune", to_string(m.prune)}};
  } else {
    j["memory"] = nullptr;
  }
  j["memory_interval"] = c.memory_interval;
  j["sharing"] = {{"mode", to_string(c.sharing)}, {"g", c.sharing_g}};
  j["norm_eps"] = c.norm_eps;
  j["rope_base"] = c.rope_base;
  j["init"] = {{"target", to_string(c.init.target)},
               {"calibrate", c.init.calibrate},
               {"calib_samples", c.init.calib_samples}};
  j["init"]["sigma_v"] = c.init.sigma_v ? nlohmann::json(*c.init.sigma_v) : nlohmann::json(nullptr);
  j["seed"] = c.seed;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path) {
  using detail::read;
  using detail::read_enum;
  using detail::reject_unknown;
  reject_unknown(j, path,
                 {"layers", "hidden", "attn_heads", "ffn_inner", "vocab", "context", "memory", "memory_interval",
                  "sharing", "norm_eps", "rope_base", "init", "seed"});
  ModelConfig c;
  read(j, path, "layers", c.layers);
  read(j, path, "hidden", c.hidden);
  read(j, path, "attn_heads", c.attn_heads);
  read(j, path, "ffn_inner", c.ffn_inner);
  read(j, path, "vocab", c.vocab);
  read(j, path, "context", c.context);
  read(j, path, "memory_interval", c.memory_interval);
  read(j, path, "norm_eps", c.norm_eps);
  read(j, path, "rope_base", c.rope_base);
  read(j, path, "seed", c.seed);
  if (j.contains("memory") && !j["memory"].is_null()) {
    const auto& m = j["memory"];
    const std::string mp = path + ".memory";
    reject_unknown(m, mp,
                   {"n", "key_dim", "rank", "heads", "top_m", "axis_top_m", "value_dim", "prevalue_dim", "gate",
                    "projector", "prune"});
    MemoryLayerConfig mc;
    read(m, mp, "n", mc.n);
    read(m, mp, "key_dim", mc.key_dim);
    read(m, mp, "rank", mc.rank);
    read(m, mp, "heads", mc.heads);
    read(m, mp, "top_m", mc.top_m);
    read(m, mp, "axis_top_m", mc.axis_top_m);
    read(m, mp, "value_dim", mc.value_dim);
    read(m, mp, "prevalue_dim", mc.prevalue_dim);
    read_enum(m, mp, "gate", mc.gate, &parse_gate_activation);
    read_enum(m, mp, "projector", mc.projector, &parse_projector_mode);
    read_enum(m, mp, "prune", mc.prune, &parse_prune_mode);
    c.memory = mc;
  }
  if (j.contains("sharing")) {
    const auto& s = j["sharing"];
    reject_unknown(s, path + ".sharing", {"mode", "g"});
    read_enum(s, path + ".sharing", "mode", c.sharing, &parse_sharing_mode);
    read(s, path + ".sharing", "g", c.sharing_g);
  }
  if (j.contains("init")) {
    const auto& i = j["init"];
    const std::string ip = path + ".init";
    reject_unknown(i, ip, {"target", "calibrate", "calib_samples", "sigma_v"});
    read_enum(i, ip, "target", c.init.target, &parse_init_target);
    read(i, ip, "calibrate", c.init.calibrate);
    read(i, ip, "calib_samples", c.init.calib_samples);
    if (i.contains("sigma_v") && !i["sigma_v"].is_null()) {
      double v = 0;
      read(i, ip, "sigma_v", v);
      c.init.sigma_v = v;
    }
  }
  c.validate();
  return c;
}

bool is_value_table_param(const std::string& name) { return name.rfind("tables.", 0) == 0; }

bool is_norm_param(const std::string& name) {
  const auto dot = name.rfind('.');
  const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
  return leaf == "norm1" || leaf == "norm2" || leaf == "final_norm";
}

// ---------------------------------------------------------------------------
// Model container

template <typename T>
ValuePool<T> Model<T>::pool_for(std::size_t mem_layer) const {
  ValuePool<T> pool;
  for (auto t : plan.tables_for(mem_layer + 1)) pool.tables.push_back(const_cast<ValueTable<T>*>(&tables[t - 1]));
  return pool;
}

template <typename T>
Model<T> Model<T>::zeros_like() const {
  Model<T> z;
  z.cfg = cfg;
  z.plan = plan;
  z.memory_index = memory_index;
  z.embed = Matrix<T>(embed.rows(), embed.cols());
  z.final_norm = Matrix<T>(final_norm.rows(), final_norm.cols());
  z.unembed = Matrix<T>(unembed.rows(), unembed.cols());
  for (const auto& b : blocks) {
    BlockParams<T> zb;
    zb.norm1 = Matrix<T>(b.norm1.rows(), b.norm1.cols());
    zb.wq = Matrix<T>(b.wq.rows(), b.wq.cols());
    zb.wk = Matrix<T>(b.wk.rows(), b.wk.cols());
    zb.wv = Matrix<T>(b.wv.rows(), b.wv.cols());
    zb.wo = Matrix<T>(b.wo.rows(), b.wo.cols());
    zb.norm2 = Matrix<T>(b.norm2.rows(), b.norm2.cols());
    zb.ffn = FfnParams<T>::zeros(b.ffn.hidden(), b.ffn.inner());
    if (b.mem) zb.mem = Umv2Params<T>::zeros_like(*b.mem);
    z.blocks.push_back(std::move(zb));
  }
  for (const auto& t : tables) {
    z.tables.push_back({Matrix<T>(t.values.rows(), t.values.cols()), Matrix<T>(t.prevalues.rows(), t.prevalues.cols())});
  }
  return z;
}

namespace {

constexpr std::size_t kNoMemory = std::numeric_limits<std::size_t>::max();

std::uint64_t shuffle_seed(std::uint64_t seed, std::size_t mem_layer) {
  return splitmix64(seed ^ (0x5348ULL + 0x9E3779B97F4A7C15ULL * (mem_layer + 1)));
}

}  // namespace

template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::vector<MemoryInitInfo>* info) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  const std::size_t h = cfg.hidden, L = cfg.layers, M = cfg.memory_layer_count();
  const double s = linear_init_std(h);
  const double out_extra = std::sqrt(1.0 / (2.0 * static_cast<double>(L)));

  RngStream top(cfg.seed, 1);
  m.embed = Matrix<T>(cfg.vocab, h);
  top.fill_normal(m.embed.flat(), 0.0, 1.0);
  m.unembed = Matrix<T>(cfg.vocab, h);
  top.fill_normal(m.unembed.flat(), 0.0, s);
  m.final_norm = Matrix<T>(1, h, T{1});

  if (M > 0) m.plan = build_plan(M, cfg.sharing_g, cfg.sharing);
  const MemoryLayerConfig mcfg = M > 0 ? cfg.layer_memory_config() : MemoryLayerConfig{};
  const double target = M > 0 ? (cfg.init.target == InitTarget::kExactSilu
                                     ? ffn_output_variance_exact(cfg.k_inner(), static_cast<double>(L))
                                     : ffn_output_variance(cfg.k_inner(), static_cast<double>(L)))
                              : 0.0;
  std::vector<double> sigma_v(M, 0.0);
  m.memory_index.assign(L, kNoMemory);
  std::size_t mi = 0;
  for (std::size_t b = 0; b < L; ++b) {
    RngStream rb(cfg.seed, 100 + b);
    BlockParams<T> bp;
    bp.norm1 = Matrix<T>(1, h, T{1});
    bp.norm2 = Matrix<T>(1, h, T{1});
    for (auto* w : {&bp.wq, &bp.wk, &bp.wv, &bp.wo}) *w = Matrix<T>(h, h);
    rb.fill_normal(bp.wq.flat(), 0.0, s);
    rb.fill_normal(bp.wk.flat(), 0.0, s);
    rb.fill_normal(bp.wv.flat(), 0.0, s);
    rb.fill_normal(bp.wo.flat(), 0.0, s * out_extra);
    bp.ffn = ffn_init<T>(h, cfg.ffn_inner, L, rb);
    if (cfg.hosts_memory(b)) {
      bp.mem = umv2_init<T>(mcfg, shuffle_seed(cfg.seed, mi), rb);
      MemoryInitInfo mii;
      mii.block = b;
      mii.target_variance = target;
      if (cfg.init.calibrate) {
        RngStream cal(cfg.seed, 2000 + b);
        CalibOptions opt;
        opt.samples = cfg.init.calib_samples;
        mii.calib = calibrate_sigma_s<T>(bp.mem->retrieval, mcfg.retrieval(), cal, opt);
      }
      mii.sigma_v = cfg.init.sigma_v ? *cfg.init.sigma_v : solve_sigma_v_for_layer(mcfg, target, mii.calib.sigma_s);
      sigma_v[mi] = mii.sigma_v;
      if (info) info->push_back(mii);
      m.memory_index[b] = mi++;
    }
    m.blocks.push_back(std::move(bp));
  }
  for (std::size_t t = 0; t < M; ++t) {
    RngStream rt(cfg.seed, 3000 + t);
    m.tables.push_back(value_table_init<T>(cfg.table_rows(), mcfg.value_dim, mcfg.prevalue_dim, sigma_v[t], rt));
  }
  return m;
}

ParamCount param_count(const ModelConfig& cfg) {
  cfg.validate();
  ParamCount c;
  const double h = static_cast<double>(cfg.hidden), L = static_cast<double>(cfg.layers);
  const double V = static_cast<double>(cfg.vocab), inner = static_cast<double>(cfg.ffn_inner);
  c.dense = 2.0 * V * h + h + L * (2.0 * h + 4.0 * h * h + 3.0 * h * inner);
  const double M = static_cast<double>(cfg.memory_layer_count());
  double act_mem = 0.0;
  if (M > 0) {
    const auto m = cfg.layer_memory_config();
    const double dk = static_cast<double>(m.key_dim), r = static_cast<double>(m.rank);
    const double heads = static_cast<double>(m.heads), n = static_cast<double>(m.n);
    const double dv = static_cast<double>(m.value_dim), dp = static_cast<double>(m.prevalue_dim);
    const double per_layer = 2.0 * h * dk * r * heads + 2.0 * n * dk * r * heads + heads * heads * r * r + h * dp +
                             dv * static_cast<double>(m.projector_blocks()) * h;
    c.memory_layers = M * per_layer;
    c.tables = M * static_cast<double>(cfg.table_rows()) * (dv + dp);
    act_mem = M * static_cast<double>(m.top_m) * (dv + dp);
  }
  c.total = c.dense + c.memory_layers + c.tables;
  c.activated = c.dense + c.memory_layers + act_mem;
  return c;
}

template <typename T>
std::size_t enumerate_params(Model<T>& m) {
  std::size_t n = 0;
  m.for_each([&](const std::string&, Matrix<T>& t) { n += t.size(); });
  return n;
}

// ---------------------------------------------------------------------------
// Layers

namespace {

template <typename T>
void rms_forward(ConstMatrixView<T> x, const Matrix<T>& gain, double eps, Matrix<T>& y, std::vector<T>& inv) {
  const std::size_t d = x.cols;
  y = Matrix<T>(x.rows, d);
  inv.assign(x.rows, T{0});
  for (std::size_t r = 0; r < x.rows; ++r) {
    const T* xr = &x(r, 0);
    double ss = 0.0;
    for (std::size_t i = 0; i < d; ++i) ss += static_cast<double>(xr[i]) * xr[i];
    const T iv = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(d) + eps));
    inv[r] = iv;
    T* yr = y.row(r).data();
    for (std::size_t i = 0; i < d; ++i) yr[i] = xr[i] * iv * gain(0, i);
  }
}

template <typename T>
void rms_backward(ConstMatrixView<T> x, const Matrix<T>& gain, const std::vector<T>& inv, ConstMatrixView<T> dy,
                  Matrix<T>& dgain, MatrixView<T> dx) {
  const std::size_t d = x.cols;
  for (std::size_t r = 0; r < x.rows; ++r) {
    const T* xr = &x(r, 0);
    const T* dyr = &dy(r, 0);
    const double iv = inv[r];
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dgain(0, i) += static_cast<T>(dyr[i] * xr[i] * iv);
      dot += static_cast<double>(dyr[i]) * gain(0, i) * xr[i];
    }
    const double c = iv * iv * iv * dot / static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) dx(r, i) += static_cast<T>(iv * dyr[i] * gain(0, i) - c * xr[i]);
  }
}

struct Rope {
  std::vector<double> cos, sin;  // seq x half
  std::size_t half = 0;

  Rope(std::size_t seq, std::size_t head_dim, double base) : half(head_dim / 2) {
    cos.resize(seq * half);
    sin.resize(seq * half);
    for (std::size_t t = 0; t < seq; ++t) {
      for (std::size_t i = 0; i < half; ++i) {
        const double ang = static_cast<double>(t) * std::pow(base, -2.0 * static_cast<double>(i) /
                                                                       static_cast<double>(head_dim));
        cos[t * half + i] = std::cos(ang);
        sin[t * half + i] = std::sin(ang);
      }
    }
  }

  // Rotates every head of every row in place; `inverse` applies the transpose.
  template <typename T>
  void apply(Matrix<T>& m, std::size_t seq, std::size_t heads, bool inverse) const {
    const std::size_t dh = 2 * half;
    for (std::size_t r = 0; r < m.rows(); ++r) {
      const std::size_t t = r % seq;
      T* row = m.row(r).data();
      for (std::size_t hd = 0; hd < heads; ++hd) {
        T* v = row + hd * dh;
        for (std::size_t i = 0; i < half; ++i) {
          const double c = cos[t * half + i], s = inverse ? -sin[t * half + i] : sin[t * half + i];
          const double a = v[2 * i], b = v[2 * i + 1];
          v[2 * i] = static_cast<T>(a * c - b * s);
          v[2 * i + 1] = static_cast<T>(a * s + b * c);
        }
      }
    }
  }
};

template <typename T>
struct AttnCache {
  Matrix<T> q, k, v;  // rotated q, k
  Matrix<T> probs;    // (batch * heads * seq) x seq
  Matrix<T> ctx;
};

template <typename T>
Matrix<T> attn_forward(const BlockParams<T>& p, const ModelConfig& cfg, const Rope& rope, ConstMatrixView<T> x,
                       std::size_t batch, std::size_t seq, AttnCache<T>& c) {
  const std::size_t tokens = x.rows, h = cfg.hidden, H = cfg.attn_heads, dh = h / H;
  c.q = Matrix<T>(tokens, h);
  c.k = Matrix<T>(tokens, h);
  c.v = Matrix<T>(tokens, h);
  gemm<T>(x, Trans::kNo, p.wq, Trans::kYes, c.q);
  gemm<T>(x, Trans::kNo, p.wk, Trans::kYes, c.k);
  gemm<T>(x, Trans::kNo, p.wv, Trans::kYes, c.v);
  rope.apply(c.q, seq, H, false);
  rope.apply(c.k, seq, H, false);
  c.probs = Matrix<T>(batch * H * seq, seq);
  c.ctx = Matrix<T>(tokens, h);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hd = 0; hd < H; ++hd) {
      ConstMatrixView<T> q = ConstMatrixView<T>(c.q).row_block(b * seq, seq).col_block(hd * dh, dh);
      ConstMatrixView<T> k = ConstMatrixView<T>(c.k).row_block(b * seq, seq).col_block(hd * dh, dh);
      ConstMatrixView<T> v = ConstMatrixView<T>(c.v).row_block(b * seq, seq).col_block(hd * dh, dh);
      MatrixView<T> pr = MatrixView<T>(c.probs).row_block((b * H + hd) * seq, seq);
      gemm<T>(q, Trans::kNo, k, Trans::kYes, pr, scale);
      for (std::size_t i = 0; i < seq; ++i) {
        T* row = &pr(i, 0);
        softmax<T>(std::span<T>(row, i + 1));
        std::fill(row + i + 1, row + seq, T{0});
      }
      gemm<T>(pr, Trans::kNo, v, Trans::kNo, MatrixView<T>(c.ctx).row_block(b * seq, seq).col_block(hd * dh, dh));
    }
  }
  Matrix<T> y(tokens, h);
  gemm<T>(c.ctx, Trans::kNo, p.wo, Trans::kYes, y);
  return y;
}

template <typename T>
void attn_backward(const BlockParams<T>& p, const ModelConfig& cfg, const Rope& rope, ConstMatrixView<T> x,
                   std::size_t batch, std::size_t seq, const AttnCache<T>& c, ConstMatrixView<T> dy,
                   BlockParams<T>& g, MatrixView<T> dx) {
  const std::size_t tokens = x.rows, h = cfg.hidden, H = cfg.attn_heads, dh = h / H;
  Matrix<T> dctx(tokens, h);
  gemm<T>(dy, Trans::kNo, p.wo, Trans::kNo, dctx);
  gemm<T>(dy, Trans::kYes, c.ctx, Trans::kNo, g.wo, T{1}, T{1});
  Matrix<T> dq(tokens, h), dk(tokens, h), dv(tokens, h), dp(seq, seq);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hd = 0; hd < H; ++hd) {
      auto blk = [&](const Matrix<T>& m) { return ConstMatrixView<T>(m).row_block(b * seq, seq).col_block(hd * dh, dh); };
      auto mblk = [&](Matrix<T>& m) { return MatrixView<T>(m).row_block(b * seq, seq).col_block(hd * dh, dh); };
      ConstMatrixView<T> pr = ConstMatrixView<T>(c.probs).row_block((b * H + hd) * seq, seq);
      gemm<T>(blk(dctx), Trans::kNo, blk(c.v), Trans::kYes, dp);
      gemm<T>(pr, Trans::kYes, blk(dctx), Trans::kNo, mblk(dv));
      for (std::size_t i = 0; i < seq; ++i) {
        T* d = dp.row(i).data();
        const T* y = &pr(i, 0);
        double s = 0.0;
        for (std::size_t j = 0; j <= i; ++j) s += static_cast<double>(y[j]) * d[j];
        for (std::size_t j = 0; j <= i; ++j) d[j] = static_cast<T>(y[j] * (d[j] - s)) * scale;
        std::fill(d + i + 1, d + seq, T{0});
      }
      gemm<T>(dp, Trans::kNo, blk(c.k), Trans::kNo, mblk(dq));
      gemm<T>(dp, Trans::kYes, blk(c.q), Trans::kNo, mblk(dk));
    }
  }
  rope.apply(dq, seq, H, true);
  rope.apply(dk, seq, H, true);
  gemm<T>(dq, Trans::kYes, x, Trans::kNo, g.wq, T{1}, T{1});
  gemm<T>(dk, Trans::kYes, x, Trans::kNo, g.wk, T{1}, T{1});
  gemm<T>(dv, Trans::kYes, x, Trans::kNo, g.wv, T{1}, T{1});
  gemm<T>(dq, Trans::kNo, p.wq, Trans::kNo, dx, T{1}, T{1});
  gemm<T>(dk, Trans::kNo, p.wk, Trans::kNo, dx, T{1}, T{1});
  gemm<T>(dv, Trans::kNo, p.wv, Trans::kNo, dx, T{1}, T{1});
}

template <typename T>
struct BlockCache {
  Matrix<T> x;
  std::vector<T> inv1, inv2;
  Matrix<T> n1, h1, n2;
  AttnCache<T> attn;
  FfnCache<T> ffn;
  Umv2Cache<T> mem;
  Matrix<T> attn_out, ffn_out, mem_out;  // kept only when tracing
};

template <typename T>
Matrix<T> block_forward(const Model<T>& m, std::size_t b, const Rope& rope, Matrix<T> x, std::size_t batch,
                        std::size_t seq, BlockCache<T>& c, bool keep_outputs) {
  const auto& p = m.blocks[b];
  const auto& cfg = m.cfg;
  c.x = std::move(x);
  rms_forward<T>(c.x, p.norm1, cfg.norm_eps, c.n1, c.inv1);
  Matrix<T> a = attn_forward<T>(p, cfg, rope, c.n1, batch, seq, c.attn);
  c.h1 = c.x;
  axpy<T>(T{1}, a.flat(), c.h1.flat());
  rms_forward<T>(c.h1, p.norm2, cfg.norm_eps, c.n2, c.inv2);
  Matrix<T> out = c.h1;
  Matrix<T> f = ffn_forward<T>(p.ffn, c.n2, &c.ffn);
  axpy<T>(T{1}, f.flat(), out.flat());
  Matrix<T> mo;
  if (p.mem) {
    const auto pool = m.pool_for(m.memory_index[b]);
    mo = umv2_forward<T>(*p.mem, cfg.layer_memory_config(), pool, c.n2, &c.mem);
    axpy<T>(T{1}, mo.flat(), out.flat());
  }
  if (keep_outputs) {
    c.attn_out = std::move(a);
    c.ffn_out = std::move(f);
    c.mem_out = std::move(mo);
  }
  return out;
}

// dout: gradient w.r.t. the block output. Returns the gradient w.r.t. its input.
template <typename T>
Matrix<T> block_backward(const Model<T>& m, std::size_t b, const Rope& rope, std::size_t batch, std::size_t seq,
                         const BlockCache<T>& c, const Matrix<T>& dout, Model<T>& grads, const AuxConfig& aux,
                         LossReport& rep) {
  const auto& p = m.blocks[b];
  auto& g = grads.blocks[b];
  const auto& cfg = m.cfg;
  const std::size_t tokens = dout.rows();
  Matrix<T> dn2(tokens, cfg.hidden);
  ffn_backward<T>(p.ffn, c.ffn, dout, g.ffn, dn2);
  if (p.mem) {
    const auto mcfg = cfg.layer_memory_config();
    const auto pool = m.pool_for(m.memory_index[b]);
    const auto gpool = grads.pool_for(m.memory_index[b]);
    AxisGrads<T> extra;
    const AxisGrads<T>* extra_ptr = nullptr;
    if (aux.balance) {
      rep.balance += ultramem_balance_loss<T>(p.mem->retrieval, mcfg.retrieval(), c.mem.retrieval, aux.balance_beta,
                                              &extra, &g.mem->retrieval)
                         .loss;
      extra_ptr = &extra;
    }
    if (aux.tucker) rep.tucker += tucker_penalty_all<T>(p.mem->retrieval.cores, mcfg.rank, aux.tucker_cfg, &g.mem->retrieval.cores);
    umv2_backward<T>(*p.mem, mcfg, pool, c.mem, dout, *g.mem, gpool, dn2, extra_ptr);
  }
  Matrix<T> dh1 = dout;
  rms_backward<T>(c.h1, p.norm2, c.inv2, dn2, g.norm2, dh1);
  Matrix<T> dn1(tokens, cfg.hidden);
  attn_backward<T>(p, cfg, rope, c.n1, batch, seq, c.attn, dh1, g, dn1);
  Matrix<T> dx = dh1;
  rms_backward<T>(c.x, p.norm1, c.inv1, dn1, g.norm1, dx);
  return dx;
}

double normalized_entropy(const std::uint64_t* counts, std::size_t n) {
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += static_cast<double>(counts[i]);
  if (total <= 0.0 || n < 2) return 0.0;
  double e = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (counts[i] == 0) continue;
    const double q = static_cast<double>(counts[i]) / total;
    e -= q * std::log(q);
  }
  return e / std::log(static_cast<double>(n));
}

template <typename T>
Matrix<T> embed_tokens(const Model<T>& m, const TokenBatch& batch) {
  Matrix<T> x(batch.batch * batch.seq, m.cfg.hidden);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < batch.seq; ++t) {
      const auto tok = batch.at(b, t);
      const auto src = m.embed.row(tok);
      std::copy(src.begin(), src.end(), x.row(b * batch.seq + t).begin());
    }
  }
  return x;
}

void check_batch(const ModelConfig& cfg, const TokenBatch& batch) {
  if (batch.batch == 0 || batch.seq == 0) throw UsageError("empty token batch");
  if (batch.tokens.size() != batch.batch * (batch.seq + 1)) throw UsageError("token batch has the wrong length");
  if (batch.seq > cfg.context) throw UsageError("sequence longer than the model context");
  for (auto t : batch.tokens) {
    if (t >= cfg.vocab) throw UsageError("token id " + std::to_string(t) + " >= vocab");
  }
}

}  // namespace

template <typename T>
LossReport lm_loss(const Model<T>& m, const TokenBatch& batch, Model<T>* grads, const AuxConfig& aux,
                   bool key_stats) {
  const auto& cfg = m.cfg;
  check_batch(cfg, batch);
  const std::size_t tokens = batch.batch * batch.seq, V = cfg.vocab, L = cfg.layers;
  const Rope rope(batch.seq, cfg.hidden / cfg.attn_heads, cfg.rope_base);

  std::vector<BlockCache<T>> caches(L);
  Matrix<T> x = embed_tokens(m, batch);
  for (std::size_t b = 0; b < L; ++b) x = block_forward<T>(m, b, rope, std::move(x), batch.batch, batch.seq, caches[b], false);
  Matrix<T> nf;
  std::vector<T> inv_f;
  rms_forward<T>(x, m.final_norm, cfg.norm_eps, nf, inv_f);
  Matrix<T> logits(tokens, V);
  gemm<T>(nf, Trans::kNo, m.unembed, Trans::kYes, logits);

  LossReport rep;
  double loss = 0.0;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < batch.seq; ++t) {
      auto row = logits.row(b * batch.seq + t);
      softmax<T>(row);
      loss -= std::log(std::max(static_cast<double>(row[batch.at(b, t + 1)]), 1e-300));
    }
  }
  rep.lm = loss / static_cast<double>(tokens);

  if (key_stats && cfg.memory_layer_count() > 0) {
    const auto mcfg = cfg.layer_memory_config();
    double re = 0.0, ce = 0.0, cnt = 0.0;
    for (std::size_t b = 0; b < L; ++b) {
      if (!m.blocks[b].mem) continue;
      const auto st = ultramem_balance_loss<T>(m.blocks[b].mem->retrieval, mcfg.retrieval(), caches[b].mem.retrieval, 0.0).stats;
      for (std::size_t pair = 0; pair < st.pairs; ++pair) {
        re += normalized_entropy(st.row_counts.data() + pair * st.n, st.n);
        ce += normalized_entropy(st.col_counts.data() + pair * st.n, st.n);
        cnt += 1.0;
      }
    }
    rep.row_entropy = re / cnt;
    rep.col_entropy = ce / cnt;
  }

  if (grads == nullptr) {
    // Aux values without gradients.
    for (std::size_t b = 0; b < L; ++b) {
      if (!m.blocks[b].mem) continue;
      const auto mcfg = cfg.layer_memory_config();
      if (aux.balance) {
        rep.balance += ultramem_balance_loss<T>(m.blocks[b].mem->retrieval, mcfg.retrieval(), caches[b].mem.retrieval,
                                                aux.balance_beta)
                           .loss;
      }
      if (aux.tucker) rep.tucker += tucker_penalty_all<T>(m.blocks[b].mem->retrieval.cores, mcfg.rank, aux.tucker_cfg);
    }
    rep.total = rep.lm + rep.tucker + rep.balance;
    return rep;
  }

  // dlogits = (p - onehot) / tokens, in place.
  const T inv_n = static_cast<T>(1.0 / static_cast<double>(tokens));
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < batch.seq; ++t) {
      auto row = logits.row(b * batch.seq + t);
      row[batch.at(b, t + 1)] -= T{1};
      for (auto& v : row) v *= inv_n;
    }
  }
  gemm<T>(logits, Trans::kYes, nf, Trans::kNo, grads->unembed, T{1}, T{1});
  Matrix<T> dnf(tokens, cfg.hidden);
  gemm<T>(logits, Trans::kNo, m.unembed, Trans::kNo, dnf);
  Matrix<T> dx(tokens, cfg.hidden);
  rms_backward<T>(x, m.final_norm, inv_f, dnf, grads->final_norm, dx);
  for (std::size_t b = L; b-- > 0;) dx = block_backward<T>(m, b, rope, batch.batch, batch.seq, caches[b], dx, *grads, aux, rep);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < batch.seq; ++t) {
      axpy<T>(T{1}, dx.row(b * batch.seq + t), grads->embed.row(batch.at(b, t)));
    }
  }
  rep.total = rep.lm + rep.tucker + rep.balance;
  return rep;
}

template <typename T>
Matrix<T> forward_logits(const Model<T>& m, const TokenBatch& batch) {
  const auto& cfg = m.cfg;
  check_batch(cfg, batch);
  const Rope rope(batch.seq, cfg.hidden / cfg.attn_heads, cfg.rope_base);
  Matrix<T> x = embed_tokens(m, batch);
  for (std::size_t b = 0; b < cfg.layers; ++b) {
    BlockCache<T> c;
    x = block_forward<T>(m, b, rope, std::move(x), batch.batch, batch.seq, c, false);
  }
  Matrix<T> nf;
  std::vector<T> inv;
  rms_forward<T>(x, m.final_norm, cfg.norm_eps, nf, inv);
  Matrix<T> logits(nf.rows(), cfg.vocab);
  gemm<T>(nf, Trans::kNo, m.unembed, Trans::kYes, logits);
  return logits;
}

namespace {

template <typename T>
double std_of(const Matrix<T>& m) {
  if (m.empty()) return 0.0;
  double s = 0.0, s2 = 0.0;
  for (T v : m.flat()) {
    s += v;
    s2 += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(m.size());
  return std::sqrt(std::max(0.0, s2 / n - (s / n) * (s / n)));
}

}  // namespace

template <typename T>
std::vector<BlockTrace> trace_blocks(const Model<T>& m, const Matrix<T>& x0, std::size_t batch, std::size_t seq) {
  if (x0.rows() != batch * seq || x0.cols() != m.cfg.hidden) throw UsageError("trace_blocks: input shape mismatch");
  const Rope rope(seq, m.cfg.hidden / m.cfg.attn_heads, m.cfg.rope_base);
  std::vector<BlockTrace> out;
  Matrix<T> x = x0;
  for (std::size_t b = 0; b < m.cfg.layers; ++b) {
    BlockCache<T> c;
    x = block_forward<T>(m, b, rope, std::move(x), batch, seq, c, true);
    BlockTrace t;
    t.block = b;
    t.has_memory = m.blocks[b].mem.has_value();
    t.residual_std = std_of(x);
    t.attn_std = std_of(c.attn_out);
    t.ffn_std = std_of(c.ffn_out);
    t.mem_std = std_of(c.mem_out);
    out.push_back(t);
  }
  return out;
}

template <typename T>
std::vector<std::uint32_t> routing_signature(const Model<T>& m, const TokenBatch& batch) {
  const auto& cfg = m.cfg;
  check_batch(cfg, batch);
  const Rope rope(batch.seq, cfg.hidden / cfg.attn_heads, cfg.rope_base);
  std::vector<std::uint32_t> sig;
  Matrix<T> x = embed_tokens(m, batch);
  for (std::size_t b = 0; b < cfg.layers; ++b) {
    BlockCache<T> c;
    x = block_forward<T>(m, b, rope, std::move(x), batch.batch, batch.seq, c, false);
    if (!m.blocks[b].mem) continue;
    const auto& sel = c.mem.retrieval.selected.raw;
    sig.insert(sig.end(), sel.begin(), sel.end());
    const auto st = ultramem_balance_loss<T>(m.blocks[b].mem->retrieval, cfg.layer_memory_config().retrieval(),
                                             c.mem.retrieval, 0.0)
                        .stats;
    for (auto v : st.row_counts) sig.push_back(static_cast<std::uint32_t>(v));
    for (auto v : st.col_counts) sig.push_back(static_cast<std::uint32_t>(v));
  }
  return sig;
}

nlohmann::json InitVerifyReport::to_json() const {
  nlohmann::json j;
  j["samples"] = samples;
  j["input_var"] = input_var;
  j["one_block_delta"] = one_block_delta;
  j["monotone"] = monotone;
  j["bounded"] = bounded;
  j["ratio_ok"] = ratio_ok;
  j["ratio_band"] = {ratio_lo, ratio_hi};
  j["passed"] = passed();
  auto& layers = j["layers"] = nlohmann::json::array();
  std::size_t mi = 0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& t = trace[i];
    nlohmann::json l = {{"block", t.block},        {"residual_std", t.residual_std}, {"bound", bound[i]},
                        {"attn_std", t.attn_std},  {"ffn_std", t.ffn_std}};
    if (t.has_memory) {
      l["mem_std"] = t.mem_std;
      l["mem_ffn_ratio"] = mem_ffn_ratio[mi++];
    }
    layers.push_back(l);
  }
  return j;
}

void InitVerifyReport::enforce() const {
  if (passed()) return;
  std::string why;
  if (!monotone) why += " residual std not monotone;";
  if (!bounded) why += " residual std above the independent-addition bound;";
  if (!ratio_ok) why += " memory/FFN std ratio outside the band;";
  throw VerificationError("verify_init failed:" + why + "\n" + to_json().dump(2));
}

template <typename T>
InitVerifyReport verify_init(const Model<T>& m, std::size_t samples, RngStream& rng) {
  if (samples == 0) throw UsageError("verify_init needs at least one sample");
  const std::size_t seq = std::min<std::size_t>(m.cfg.context, 64);
  const std::size_t batch = (samples + seq - 1) / seq;
  Matrix<T> x(batch * seq, m.cfg.hidden);
  rng.fill_normal(x.flat(), 0.0, 1.0);
  InitVerifyReport r;
  r.samples = batch * seq;
  const double in_std = std_of(x);
  r.input_var = in_std * in_std;
  r.trace = trace_blocks<T>(m, x, batch, seq);
  const double v0 = r.trace[0].residual_std * r.trace[0].residual_std;
  r.one_block_delta = v0 - r.input_var;
  double prev = in_std;
  for (std::size_t l = 0; l < r.trace.size(); ++l) {
    const auto& t = r.trace[l];
    const double b = 2.0 * std::sqrt(r.input_var + static_cast<double>(l + 1) * std::max(r.one_block_delta, 0.0));
    r.bound.push_back(b);
    if (!(t.residual_std >= prev)) r.monotone = false;
    if (!(t.residual_std <= b)) r.bounded = false;
    prev = t.residual_std;
    if (t.has_memory) {
      const double ratio = t.ffn_std > 0.0 ? t.mem_std / t.ffn_std : 0.0;
      r.mem_ffn_ratio.push_back(ratio);
      if (!(ratio >= r.ratio_lo && ratio <= r.ratio_hi)) r.ratio_ok = false;
    }
  }
  return r;
}

#define UMV2_INSTANTIATE(T)                                                                                     \
  template struct Model<T>;                                                                                     \
  template Model<T> build_model<T>(const ModelConfig&, std::vector<MemoryInitInfo>*);                           \
  template std::size_t enumerate_params<T>(Model<T>&);                                                          \
  template LossReport lm_loss<T>(const Model<T>&, const TokenBatch&, Model<T>*, const AuxConfig&, bool);        \
  template Matrix<T> forward_logits<T>(const Model<T>&, const TokenBatch&);                                     \
  template std::vector<BlockTrace> trace_blocks<T>(const Model<T>&, const Matrix<T>&, std::size_t, std::size_t); \
  template std::vector<std::uint32_t> routing_signature<T>(const Model<T>&, const TokenBatch&);                 \
  template InitVerifyReport verify_init<T>(const Model<T>&, std::size_t, RngStream&);

UMV2_INSTANTIATE(float)
UMV2_INSTANTIATE(double)

#undef UMV2_INSTANTIATE

}  // namespace umv2
