// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>

#include "umv2/memory_layer.hpp"
#include "umv2/rng.hpp"
#include "umv2/tdqkr.hpp"

namespace umv2 {

/// Linear-layer init std sqrt(2 / (5 h)).
double linear_init_std(std::size_t hidden);

/// Variance of the SwiGLU inner activation silu(g) * l with g, l ~ N(0, 0.4),
/// estimating silu(g) by a normal truncated to [0, inf). Evaluates to 0.16.
double ffn_inner_variance_truncated();

/// The same quantity with the real SiLU: 0.4 * E[silu(g)^2], by quadrature.
double ffn_inner_variance_exact();

/// 0.064 * k_inner / (2 L): FFN output variance under the truncated estimate.
double ffn_output_variance(double k_inner, double num_layers);

/// FFN output variance with the real SiLU inner variance.
double ffn_output_variance_exact(double k_inner, double num_layers);

/// 0.16 (1 + sigma_s^2) sigma_V^4 d_prev m n_head d_v / h.
double memory_output_variance(double sigma_v, double sigma_s, double hidden, double top_m, double n_head,
                              double d_prev, double d_v);

/// sigma_V that makes memory_output_variance equal ffn_output_variance:
/// (0.2 k_inner h / (m n_head (1 + sigma_s^2) d_prev d_v L))^(1/4).
double solve_sigma_v(double hidden, double k_inner, double top_m, double n_head, double sigma_s, double d_prev,
                     double d_v, double num_layers);

/// sigma_V that makes memory_output_variance equal `target_variance`.
double solve_sigma_v_for_target(double target_variance, double hidden, double top_m, double n_head, double sigma_s,
                                double d_prev, double d_v);

/// E[silu(g)^2] for g ~ N(0, variance), by quadrature.
double silu_second_moment(double variance);

/// Output variance of a memory layer for any gate: kNone is
/// memory_output_variance; kOff drops the gate factor 0.4 sigma_V^2 d_prev;
/// kSilu replaces it with E[silu(g)^2], g ~ N(0, 0.4 sigma_V^2 d_prev).
double memory_output_variance(const MemoryLayerConfig& cfg, double sigma_v, double sigma_s);

/// Inverts memory_output_variance(cfg, ., sigma_s) at `target_variance`
/// (closed form for kNone and kOff, bisection for kSilu).
double solve_sigma_v_for_layer(const MemoryLayerConfig& cfg, double target_variance, double sigma_s);

/// Which FFN variance the memory layer is matched to.
enum class InitTarget { kExactSilu, kTruncatedEstimate };

InitTarget parse_init_target(const std::string& s);
std::string to_string(InitTarget t);

struct InitSpec {
  double sigma_v = 0.0;
  double linear_std = 0.0;
  double out_proj_extra = 0.0;  // sqrt(1 / (2 L)) on FFN output linears
  double k_inner = 0.0;
  std::size_t num_layers = 0;

  void validate() const;
};

struct CalibReport {
  double gamma_q = 1.0;
  double gamma_k = 1.0;
  double sigma_s = 0.0;
  double mean_score = 0.0;    // on the fresh batch
  double tuned_mean = 0.0;    // on the tuning batch
  std::size_t samples = 0;
  std::size_t steps = 0;
};

struct CalibOptions {
  std::size_t samples = 10000;
  double tolerance = 1e-3;  // |mean - 1| on the tuning batch
  std::size_t max_steps = 60;
  std::size_t chunk = 512;  // tokens per retrieval call
};

/// Bisects a shared scale s on both norm gains (gamma_q s, gamma_k s) until
/// the mean selected score over unit-normal inputs is 1, then writes the gains
/// into `p` and measures sigma_s on a fresh batch.
template <typename T>
CalibReport calibrate_sigma_s(RetrievalParams<T>& p, const RetrievalConfig& cfg, RngStream& rng,
                              const CalibOptions& opt = {});

}  // namespace umv2
