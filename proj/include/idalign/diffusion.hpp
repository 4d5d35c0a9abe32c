// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Noise schedule, forward process, epsilon-prediction loss and the
// deterministic few-step sampler.

#pragma once

#include <cstdint>
#include <vector>

#include "idalign/backbones.hpp"

namespace idalign {

struct NoiseSchedule {
    int num_steps = 0;
    std::vector<double> betas;
    std::vector<double> alpha_bars;

    /// Linear betas from beta_start to beta_end over num_steps.
    static NoiseSchedule linear(int num_steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

    double alpha_bar(int t) const;
    void check_timestep(int t) const;
};

struct LatentState {
    Tensor x;
    int t = 0;
};

/// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, with one timestep per sample.
Tensor q_sample(const NoiseSchedule& schedule, const Tensor& x0, const std::vector<int>& t, const Tensor& eps);
Tensor q_sample(const NoiseSchedule& schedule, const Tensor& x0, int t, const Tensor& eps);

/// (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t), per sample.
Var x0_from_eps(const NoiseSchedule& schedule, const Var& x_t, const Var& eps_hat, const std::vector<int>& t);

Var predict_x0_onestep(const NoisePredictor& model, const NoiseSchedule& schedule, const Var& x_t,
                       const std::vector<int>& t, const TextConditioning& text, const IdConditioning* id);

struct DiffusionTerms {
    Var loss;
    Var eps_hat;
    Tensor x_t;
    Tensor eps;
    std::vector<int> t;
};

/// Samples t uniformly in [0, T) and eps ~ N(0, I); loss = mean (eps_hat - eps)^2.
DiffusionTerms diffusion_loss(const NoisePredictor& model, const NoiseSchedule& schedule, const TextConditioning& text,
                              const IdConditioning* id, const Tensor& x0, Rng& rng);

struct SamplerPlan {
    int steps = 4;
    double cfg_scale = 1.2;
    int bp_last_k = 4;
    /// First grid point; negative means T - 1.
    int t_start = -1;

    void validate(const NoiseSchedule& schedule) const;
    /// steps points, strictly decreasing, from t_start down to 0 inclusive.
    std::vector<int> grid(const NoiseSchedule& schedule) const;
};

struct SamplerConditions {
    const TextConditioning* text = nullptr;
    /// Required when cfg_scale > 1.
    const TextConditioning* uncond_text = nullptr;
    const IdConditioning* id = nullptr;
};

/// Standard normal [B, 32, 32, 3] from the seed.
Tensor initial_noise(int batch, std::uint64_t seed);

/// Runs grid steps first_step .. steps-1 starting from x (at grid[first_step]).
/// Steps before steps - bp_last_k record no graph. Returns the final x0 estimate.
Var sample_from(const NoisePredictor& model, const NoiseSchedule& schedule, const SamplerPlan& plan, const Var& x,
                int first_step, const SamplerConditions& cond, TapSink* taps = nullptr);

Var sample_kstep(const NoisePredictor& model, const NoiseSchedule& schedule, const SamplerPlan& plan,
                 const SamplerConditions& cond, int batch, std::uint64_t seed, TapSink* taps = nullptr);

/// State after the first n grid steps (no graph), for resuming with sample_from.
Tensor advance_detached(const NoisePredictor& model, const NoiseSchedule& schedule, const SamplerPlan& plan,
                        const Tensor& x_start, int n, const SamplerConditions& cond);

}  // namespace idalign
