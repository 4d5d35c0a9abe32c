// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/diffusion.hpp"

#include <cmath>

#include "idalign/errors.hpp"

namespace idalign {

NoiseSchedule NoiseSchedule::linear(int num_steps, double beta_start, double beta_end) {
    require(num_steps >= 2, "NoiseSchedule: need at least 2 steps");
    require(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end, "NoiseSchedule: invalid beta range");
    NoiseSchedule s;
    s.num_steps = num_steps;
    s.betas.resize(static_cast<std::size_t>(num_steps));
    s.alpha_bars.resize(static_cast<std::size_t>(num_steps));
    double prod = 1.0;
    for (int i = 0; i < num_steps; ++i) {
        const double beta = beta_start + (beta_end - beta_start) * i / (num_steps - 1);
        s.betas[static_cast<std::size_t>(i)] = beta;
        prod *= 1.0 - beta;
        s.alpha_bars[static_cast<std::size_t>(i)] = prod;
    }
    return s;
}

void NoiseSchedule::check_timestep(int t) const {
    require(t >= 0 && t < num_steps,
            "timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_steps) + ")");
}

double NoiseSchedule::alpha_bar(int t) const {
    check_timestep(t);
    return alpha_bars[static_cast<std::size_t>(t)];
}

Tensor q_sample(const NoiseSchedule& schedule, const Tensor& x0, const std::vector<int>& t, const Tensor& eps) {
    require(x0.shape() == eps.shape(), "q_sample: eps shape differs from x0");
    require(x0.rank() >= 1 && static_cast<int>(t.size()) == x0.dim(0), "q_sample: one timestep per sample");
    const std::size_t per = x0.numel() / t.size();
    Tensor out(x0.shape());
    for (std::size_t b = 0; b < t.size(); ++b) {
        const double ab = schedule.alpha_bar(t[b]);
        const double a = std::sqrt(ab);
        const double s = std::sqrt(1.0 - ab);
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
            out[i] = a * x0[i] + s * eps[i];
        }
    }
    return out;
}

Tensor q_sample(const NoiseSchedule& schedule, const Tensor& x0, int t, const Tensor& eps) {
    require(x0.shape() == eps.shape(), "q_sample: eps shape differs from x0");
    const double ab = schedule.alpha_bar(t);
    const double a = std::sqrt(ab);
    const double s = std::sqrt(1.0 - ab);
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < x0.numel(); ++i) {
        out[i] = a * x0[i] + s * eps[i];
    }
    return out;
}

Var x0_from_eps(const NoiseSchedule& schedule, const Var& x_t, const Var& eps_hat, const std::vector<int>& t) {
    require(x_t.shape() == eps_hat.shape(), "x0_from_eps: shape mismatch");
    std::vector<double> cx(t.size());
    std::vector<double> ce(t.size());
    for (std::size_t b = 0; b < t.size(); ++b) {
        const double ab = schedule.alpha_bar(t[b]);
        cx[b] = 1.0 / std::sqrt(ab);
        ce[b] = -std::sqrt(1.0 - ab) / std::sqrt(ab);
    }
    return add(scale_per_sample(x_t, cx), scale_per_sample(eps_hat, ce));
}

Var predict_x0_onestep(const NoisePredictor& model, const NoiseSchedule& schedule, const Var& x_t,
                       const std::vector<int>& t, const TextConditioning& text, const IdConditioning* id) {
    for (int ti : t) {
        schedule.check_timestep(ti);
    }
    return x0_from_eps(schedule, x_t, model.predict(x_t, t, text, id, nullptr), t);
}

DiffusionTerms diffusion_loss(const NoisePredictor& model, const NoiseSchedule& schedule, const TextConditioning& text,
                              const IdConditioning* id, const Tensor& x0, Rng& rng) {
    const int b = x0.dim(0);
    DiffusionTerms out;
    out.t.resize(static_cast<std::size_t>(b));
    for (int& ti : out.t) {
        ti = rng.below(schedule.num_steps);
    }
    out.eps = rng.normal_tensor(x0.shape());
    out.x_t = q_sample(schedule, x0, out.t, out.eps);
    out.eps_hat = model.predict(constant(out.x_t), out.t, text, id, nullptr);
    out.loss = mse(out.eps_hat, constant(out.eps));
    if (!std::isfinite(out.loss.item())) {
        throw NonFiniteError("non-finite diffusion loss", -1);
    }
    return out;
}

void SamplerPlan::validate(const NoiseSchedule& schedule) const {
    if (steps < 1) {
        throw ContractError("sampler steps must be >= 1, got " + std::to_string(steps));
    }
    if (bp_last_k < 1 || bp_last_k > steps) {
        throw ContractError("bp_last_k must lie in [1, " + std::to_string(steps) + "], got " +
                            std::to_string(bp_last_k));
    }
    const int start = t_start < 0 ? schedule.num_steps - 1 : t_start;
    schedule.check_timestep(start);
    require(steps <= start + 1 || steps == 1, "sampler grid cannot be strictly decreasing with that many steps");
    require(cfg_scale >= 0.0, "cfg_scale must be nonnegative");
}

std::vector<int> SamplerPlan::grid(const NoiseSchedule& schedule) const {
    validate(schedule);
    const int start = t_start < 0 ? schedule.num_steps - 1 : t_start;
    if (steps == 1) {
        return {start};
    }
    std::vector<int> out(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        out[static_cast<std::size_t>(i)] =
            static_cast<int>(std::lround(start * (1.0 - static_cast<double>(i) / (steps - 1))));
    }
    return out;
}

Tensor initial_noise(int batch, std::uint64_t seed) {
    Rng rng(seed);
    return rng.normal_tensor({batch, kImageSize, kImageSize, kChannels});
}

namespace {

Var guided_eps(const NoisePredictor& model, const Var& x, const std::vector<int>& t, const SamplerPlan& plan,
               const SamplerConditions& cond, TapSink* taps) {
    Var eps = model.predict(x, t, *cond.text, cond.id, taps);
    if (plan.cfg_scale > 1.0) {
        require(cond.uncond_text != nullptr, "sampler: cfg_scale > 1 needs an unconditional caption");
        Var eps_u = model.predict(x, t, *cond.uncond_text, cond.id, nullptr);
        eps = axpby(eps_u, 1.0 - plan.cfg_scale, eps, plan.cfg_scale);
    }
    return eps;
}

Var ddim_step(const NoiseSchedule& schedule, const Var& x, const Var& eps, int t, int t_prev, int batch) {
    const std::vector<int> tv(static_cast<std::size_t>(batch), t);
    const Var x0 = clamp(x0_from_eps(schedule, x, eps, tv), -1.0, 1.0);
    if (t_prev < 0) {
        return x0;
    }
    // Noise direction consistent with the clipped estimate.
    const double ab_t = schedule.alpha_bar(t);
    const Var eps_c = scale(axpby(x, 1.0, x0, -std::sqrt(ab_t)), 1.0 / std::sqrt(1.0 - ab_t));
    const double ab = schedule.alpha_bar(t_prev);
    return axpby(x0, std::sqrt(ab), eps_c, std::sqrt(1.0 - ab));
}

}  // namespace

Var sample_from(const NoisePredictor& model, const NoiseSchedule& schedule, const SamplerPlan& plan, const Var& x,
                int first_step, const SamplerConditions& cond, TapSink* taps) {
    require(cond.text != nullptr, "sampler: missing text conditioning");
    const std::vector<int> grid = plan.grid(schedule);
    require(first_step >= 0 && first_step < plan.steps, "sampler: first_step out of range");
    const int batch = x.dim(0);
    const int grad_from = plan.steps - plan.bp_last_k;
    Var cur = x;
    for (int i = first_step; i < plan.steps; ++i) {
        const int t = grid[static_cast<std::size_t>(i)];
        const int t_prev = i + 1 < plan.steps ? grid[static_cast<std::size_t>(i) + 1] : -1;
        const std::vector<int> tv(static_cast<std::size_t>(batch), t);
        if (taps != nullptr) {
            taps->step_index = i;
        }
        if (i < grad_from) {
            NoGradGuard guard;
            cur = constant(ddim_step(schedule, cur, guided_eps(model, cur, tv, plan, cond, taps), t, t_prev, batch)
                               .value());
        } else {
            cur = ddim_step(schedule, cur, guided_eps(model, cur, tv, plan, cond, taps), t, t_prev, batch);
        }
        if (!cur.value().all_finite()) {
            throw NonFiniteError("sampler produced non-finite values at step " + std::to_string(i), i);
        }
    }
    return cur;
}

Var sample_kstep(const NoisePredictor& model, const NoiseSchedule& schedule, const SamplerPlan& plan,
                 const SamplerConditions& cond, int batch, std::uint64_t seed, TapSink* taps) {
    plan.validate(schedule);
    return sample_from(model, schedule, plan, constant(initial_noise(batch, seed)), 0, cond, taps);
}

Tensor advance_detached(const NoisePredictor& model, const NoiseSchedule& schedule, const SamplerPlan& plan,
                        const Tensor& x_start, int n, const SamplerConditions& cond) {
    require(n >= 0 && n < plan.steps, "advance_detached: n out of range");
    if (n == 0) {
        return x_start;
    }
    NoGradGuard guard;
    const std::vector<int> grid = plan.grid(schedule);
    Var cur = constant(x_start);
    const int batch = x_start.dim(0);
    for (int i = 0; i < n; ++i) {
        const int t = grid[static_cast<std::size_t>(i)];
        const int t_prev = grid[static_cast<std::size_t>(i) + 1];
        const std::vector<int> tv(static_cast<std::size_t>(batch), t);
        cur = ddim_step(schedule, cur, guided_eps(model, cur, tv, plan, cond, nullptr), t, t_prev, batch);
    }
    return cur.value();
}

}  // namespace idalign
