// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/init_calib.hpp"

#include <boost/math/quadrature/sinh_sinh.hpp>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "umv2/ops.hpp"
#include "umv2/truncnorm.hpp"

namespace umv2 {

namespace {

constexpr double kLinearVar = 0.4;  // h * 2 / (5 h)

void require_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw DomainError(std::string(name) + " must be positive and finite, got " + std::to_string(v));
  }
}

}  // namespace

double linear_init_std(std::size_t hidden) {
  require_positive(static_cast<double>(hidden), "hidden");
  return std::sqrt(2.0 / (5.0 * static_cast<double>(hidden)));
}

double ffn_inner_variance_truncated() {
  const Moments g = truncated_normal_moments(0.0, std::sqrt(kLinearVar), 0.0, std::numeric_limits<double>::infinity());
  return kLinearVar * (g.variance + g.mean * g.mean);
}

double silu_second_moment(double variance) {
  if (!(variance >= 0.0) || !std::isfinite(variance)) throw DomainError("silu_second_moment: bad variance");
  if (variance == 0.0) return 0.0;
  const double s = std::sqrt(variance);
  auto f = [s](double x) {
    const double a = silu(x);
    return a * a * std::exp(-0.5 * (x / s) * (x / s)) / (s * std::sqrt(2.0 * std::numbers::pi));
  };
  boost::math::quadrature::sinh_sinh<double> integrator;
  return integrator.integrate(f);
}

double ffn_inner_variance_exact() {
  static const double value = kLinearVar * silu_second_moment(kLinearVar);
  return value;
}

double ffn_output_variance(double k_inner, double num_layers) {
  require_positive(k_inner, "k_inner");
  if (!(num_layers >= 1.0)) throw DomainError("num_layers must be >= 1");
  return 0.064 * k_inner / (2.0 * num_layers);
}

double ffn_output_variance_exact(double k_inner, double num_layers) {
  return ffn_output_variance(k_inner, num_layers) * ffn_inner_variance_exact() / 0.16;
}

double memory_output_variance(double sigma_v, double sigma_s, double hidden, double top_m, double n_head,
                              double d_prev, double d_v) {
  if (!(sigma_v >= 0.0)) throw DomainError("sigma_v must be >= 0");
  if (!(sigma_s >= 0.0)) throw DomainError("sigma_s must be >= 0");
  require_positive(hidden, "hidden");
  const double s4 = sigma_v * sigma_v * sigma_v * sigma_v;
  return 0.16 * (1.0 + sigma_s * sigma_s) * s4 * d_prev * top_m * n_head * d_v / hidden;
}

double solve_sigma_v(double hidden, double k_inner, double top_m, double n_head, double sigma_s, double d_prev,
                     double d_v, double num_layers) {
  for (auto [v, name] : {std::pair{hidden, "hidden"}, {k_inner, "k_inner"}, {top_m, "top_m"}, {n_head, "n_head"},
                         {sigma_s, "sigma_s"}, {d_prev, "d_prev"}, {d_v, "d_v"}, {num_layers, "num_layers"}}) {
    require_positive(v, name);
  }
  const double s4 = 0.2 * k_inner * hidden / (top_m * n_head * (1.0 + sigma_s * sigma_s) * d_prev * d_v * num_layers);
  return std::sqrt(std::sqrt(s4));
}

double solve_sigma_v_for_target(double target_variance, double hidden, double top_m, double n_head, double sigma_s,
                                double d_prev, double d_v) {
  for (auto [v, name] : {std::pair{target_variance, "target_variance"}, {hidden, "hidden"}, {top_m, "top_m"},
                         {n_head, "n_head"}, {d_prev, "d_prev"}, {d_v, "d_v"}}) {
    require_positive(v, name);
  }
  if (!(sigma_s >= 0.0)) throw DomainError("sigma_s must be >= 0");
  const double s4 = target_variance * hidden / (0.16 * (1.0 + sigma_s * sigma_s) * d_prev * top_m * n_head * d_v);
  return std::sqrt(std::sqrt(s4));
}

double memory_output_variance(const MemoryLayerConfig& cfg, double sigma_v, double sigma_s) {
  const double h = static_cast<double>(cfg.hidden), m = static_cast<double>(cfg.top_m);
  const double dv = static_cast<double>(cfg.value_dim), dp = static_cast<double>(cfg.prevalue_dim);
  // Per activated value: E[gate^2] * E[s^2] * sigma_V^2, then m values, then the projector.
  const double rest = (1.0 + sigma_s * sigma_s) * sigma_v * sigma_v * m * kLinearVar * dv / h;
  switch (cfg.gate) {
    case GateActivation::kNone: return kLinearVar * sigma_v * sigma_v * dp * rest;
    case GateActivation::kOff: return rest;
    case GateActivation::kSilu: return silu_second_moment(kLinearVar * sigma_v * sigma_v * dp) * rest;
  }
  return rest;
}

double solve_sigma_v_for_layer(const MemoryLayerConfig& cfg, double target_variance, double sigma_s) {
  require_positive(target_variance, "target_variance");
  if (!(sigma_s >= 0.0)) throw DomainError("sigma_s must be >= 0");
  const double h = static_cast<double>(cfg.hidden), m = static_cast<double>(cfg.top_m);
  const double dv = static_cast<double>(cfg.value_dim), dp = static_cast<double>(cfg.prevalue_dim);
  switch (cfg.gate) {
    case GateActivation::kNone:
      return solve_sigma_v_for_target(target_variance, h, m, 1.0, sigma_s, dp, dv);
    case GateActivation::kOff:
      return std::sqrt(target_variance * h / ((1.0 + sigma_s * sigma_s) * m * kLinearVar * dv));
    case GateActivation::kSilu: {
      // Monotone in sigma_V; bisect on log2.
      double lo = -40.0, hi = 10.0;
      for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (memory_output_variance(cfg, std::exp2(mid), sigma_s) < target_variance ? lo : hi) = mid;
      }
      return std::exp2(0.5 * (lo + hi));
    }
  }
  return 0.0;
}

InitTarget parse_init_target(const std::string& s) {
  if (s == "exact_silu") return InitTarget::kExactSilu;
  if (s == "truncated_estimate") return InitTarget::kTruncatedEstimate;
  throw ConfigError("unknown init target '" + s + "'");
}

std::string to_string(InitTarget t) { return t == InitTarget::kExactSilu ? "exact_silu" : "truncated_estimate"; }

void InitSpec::validate() const {
  if (!(sigma_v > 0.0) || !std::isfinite(sigma_v)) throw ConfigError("init.sigma_v must be positive and finite");
  if (!(linear_std > 0.0)) throw ConfigError("init.linear_std must be positive");
  if (num_layers == 0) throw ConfigError("init.num_layers must be >= 1");
}

namespace {

// Selected scores for `tokens` unit-normal inputs, appended to `out`.
template <typename T>
void sample_scores(const RetrievalParams<T>& p, const RetrievalConfig& cfg, RngStream& rng, std::size_t tokens,
                   std::size_t chunk, std::vector<double>& out) {
  RetrievalCache<T> cache;
  for (std::size_t done = 0; done < tokens; done += chunk) {
    const std::size_t b = std::min(chunk, tokens - done);
    Matrix<T> x(b, cfg.input_dim);
    rng.fill_normal(x.flat(), 0.0, 1.0);
    retrieval_forward<T>(p, cfg, x, cache);
    for (T s : cache.selected.scores) out.push_back(static_cast<double>(s));
  }
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

template <typename T>
CalibReport calibrate_sigma_s(RetrievalParams<T>& p, const RetrievalConfig& cfg, RngStream& rng,
                              const CalibOptions& opt) {
  cfg.validate();
  if (opt.samples < 10000) throw DomainError("calibrate_sigma_s needs at least 10^4 samples");
  if (opt.chunk == 0) throw DomainError("calibrate_sigma_s: chunk must be positive");
  RngStream tune_rng = rng.fork(rng.stream() * 2 + 1);
  RngStream fresh_rng = rng.fork(rng.stream() * 2 + 2);

  std::vector<double> scores;
  sample_scores(p, cfg, tune_rng, opt.samples, opt.chunk, scores);
  const double mean0 = mean_of(scores);

  // Selection is invariant under a positive rescale of both gains; every score
  // scales by s^4, so each bisection step rescales the tuning batch instead of
  // rerunning retrieval.
  auto mean_at = [&](double log2s) { return mean0 * std::exp2(4.0 * log2s); };
  double lo = -20.0, hi = 20.0;
  if (!(mean_at(lo) < 1.0 && mean_at(hi) > 1.0)) {
    std::ostringstream os;
    os << "calibrate_sigma_s: mean score is not bracketed in 2^[-20, 20] (mean at unit scale " << mean0
       << ", gains " << p.gain_q << "/" << p.gain_k << ")";
    throw CalibrationError(os.str());
  }
  double mid = 0.0;
  std::size_t steps = 0;
  bool converged = false;
  while (steps < opt.max_steps) {
    mid = 0.5 * (lo + hi);
    ++steps;
    const double m = mean_at(mid);
    if (std::abs(m - 1.0) <= opt.tolerance) {
      converged = true;
      break;
    }
    (m < 1.0 ? lo : hi) = mid;
  }
  if (!converged) {
    std::ostringstream os;
    os << "calibrate_sigma_s: no convergence after " << steps << " steps (last mean " << mean_at(mid) << ")";
    throw CalibrationError(os.str());
  }
  const double s = std::exp2(mid);
  p.gain_q *= s;
  p.gain_k *= s;

  CalibReport rep;
  rep.gamma_q = p.gain_q;
  rep.gamma_k = p.gain_k;
  rep.tuned_mean = mean_at(mid);
  rep.steps = steps;
  rep.samples = opt.samples;
  std::vector<double> fresh;
  sample_scores(p, cfg, fresh_rng, opt.samples, opt.chunk, fresh);
  rep.mean_score = mean_of(fresh);
  double var = 0.0;
  for (double v : fresh) var += (v - rep.mean_score) * (v - rep.mean_score);
  rep.sigma_s = std::sqrt(var / static_cast<double>(fresh.size()));
  return rep;
}

template CalibReport calibrate_sigma_s<float>(RetrievalParams<float>&, const RetrievalConfig&, RngStream&,
                                              const CalibOptions&);
template CalibReport calibrate_sigma_s<double>(RetrievalParams<double>&, const RetrievalConfig&, RngStream&,
                                               const CalibOptions&);

}  // namespace umv2
