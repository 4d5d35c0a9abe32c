// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "idalign/adapter.hpp"
#include "idalign/errors.hpp"
#include "idalign/diffusion.hpp"

namespace idalign {
namespace {

// Closed-form alpha_bar for the linear schedule.
double oracle_alpha_bar(int t) {
    double prod = 1.0;
    for (int s = 0; s <= t; ++s) {
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * s / 999.0);
    }
    return prod;
}

// Returns the exact noise for a known x0, optionally offset by a constant.
class TrueEpsStub : public NoisePredictor {
public:
    TrueEpsStub(const NoiseSchedule& s, Tensor x0, double offset = 0.0) : s_(s), x0_(std::move(x0)), c_(offset) {}
    Var predict(const Var& x_t, const std::vector<int>& t, const TextConditioning&, const IdConditioning*,
                TapSink*) const override {
        Tensor out(x_t.shape());
        const std::size_t per = out.numel() / t.size();
        for (std::size_t b = 0; b < t.size(); ++b) {
            const double ab = s_.alpha_bar(t[b]);
            for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
                out[i] = (x_t.value()[i] - std::sqrt(ab) * x0_[i]) / std::sqrt(1.0 - ab) + c_;
            }
        }
        return constant(out);
    }

private:
    const NoiseSchedule& s_;
    Tensor x0_;
    double c_;
};

// Ignores text; counts calls.
class CountingStub : public NoisePredictor {
public:
    Var predict(const Var& x_t, const std::vector<int>& t, const TextConditioning&, const IdConditioning*,
                TapSink*) const override {
        ++calls;
        return scale(x_t, 0.3 + 1e-4 * t.front());
    }
    mutable int calls = 0;
};

TextConditioning dummy_text(int batch) {
    return {constant(Tensor({batch, kCaptionLength, kTextDim})), Tensor({batch, kCaptionLength}, 1.0)};
}

TEST(Diffusion, ScheduleMatchesClosedForm) {
    const NoiseSchedule s = NoiseSchedule::linear();
    ASSERT_EQ(s.num_steps, 1000);
    for (int t = 0; t < 1000; ++t) {
        EXPECT_NEAR(s.alpha_bar(t), oracle_alpha_bar(t), 1e-12);
        EXPECT_GT(s.betas[static_cast<std::size_t>(t)], 0.0);
        EXPECT_LT(s.betas[static_cast<std::size_t>(t)], 1.0);
        if (t > 0) {
            EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
            EXPECT_GE(s.betas[static_cast<std::size_t>(t)], s.betas[static_cast<std::size_t>(t - 1)]);
        }
    }
    EXPECT_THROW(s.check_timestep(1000), ContractError);
    EXPECT_THROW(s.check_timestep(-1), ContractError);
}

TEST(Diffusion, QSampleLinearityAndEndpoint) {
    const NoiseSchedule s = NoiseSchedule::linear();
    Rng rng(1);
    const Tensor e = rng.normal_tensor({2, 4, 4, 3});
    const Tensor zero(e.shape());
    const Tensor xt = q_sample(s, zero, 600, e);
    for (std::size_t i = 0; i < e.numel(); ++i) {
        EXPECT_EQ(xt[i], std::sqrt(1.0 - s.alpha_bar(600)) * e[i]);
    }
    const Tensor x0 = rng.normal_tensor(e.shape());
    const Tensor x1 = q_sample(s, x0, 0, e);
    double dist = 0.0, norm_e = 0.0;
    for (std::size_t i = 0; i < e.numel(); ++i) {
        dist += (x1[i] - x0[i]) * (x1[i] - x0[i]);
        norm_e += e[i] * e[i];
    }
    EXPECT_LE(std::sqrt(dist), std::sqrt(1.0 - s.alpha_bar(0)) * std::sqrt(norm_e) + 1e-3);
    EXPECT_THROW(q_sample(s, x0, 1000, e), ContractError);
}

TEST(Diffusion, DiffusionLossStubs) {
    const NoiseSchedule s = NoiseSchedule::linear();
    Rng data_rng(2);
    const Tensor x0 = data_rng.normal_tensor({4, kImageSize, kImageSize, kChannels});
    const TextConditioning text = dummy_text(4);
    Rng rng(3);
    const TrueEpsStub exact(s, x0);
    EXPECT_LT(diffusion_loss(exact, s, text, nullptr, x0, rng).loss.item(), 1e-18);
    const TrueEpsStub shifted(s, x0, 0.25);
    EXPECT_NEAR(diffusion_loss(shifted, s, text, nullptr, x0, rng).loss.item(), 0.0625, 1e-9);
}

TEST(Diffusion, OneStepInversionIdentity) {
    const NoiseSchedule s = NoiseSchedule::linear();
    Rng rng(4);
    const Tensor x0 = rng.normal_tensor({3, kImageSize, kImageSize, kChannels});
    const Tensor e = rng.normal_tensor(x0.shape());
    const std::vector<int> t{5, 400, 980};
    const Tensor xt = q_sample(s, x0, t, e);
    const TrueEpsStub exact(s, x0);
    const Tensor x0_hat = predict_x0_onestep(exact, s, constant(xt), t, dummy_text(3), nullptr).value();
    EXPECT_LT(max_abs_diff(x0_hat, x0), 1e-10);
}

TEST(Diffusion, OneStepAmplifiesNoiseNearT) {
    const NoiseSchedule s = NoiseSchedule::linear();
    Rng rng(5);
    const Var xt = constant(Tensor({1, 4, 4, 3}));
    const Var eps = constant(rng.normal_tensor({1, 4, 4, 3}));
    const Tensor x0_hat = x0_from_eps(s, xt, eps, {999}).value();
    double n_hat = 0.0, n_eps = 0.0;
    for (std::size_t i = 0; i < x0_hat.numel(); ++i) {
        n_hat += x0_hat[i] * x0_hat[i];
        n_eps += eps.value()[i] * eps.value()[i];
    }
    const double gain = std::sqrt(n_hat / n_eps);
    EXPECT_NEAR(gain, std::sqrt((1.0 - s.alpha_bar(999)) / s.alpha_bar(999)), 1e-9);
    EXPECT_GT(gain, 50.0);
}

TEST(Diffusion, GridIsStrictlyDecreasing) {
    const NoiseSchedule s = NoiseSchedule::linear();
    for (int k : {1, 2, 3, 4, 8, 30}) {
        SamplerPlan p{k, 1.0, 1, -1};
        const auto g = p.grid(s);
        ASSERT_EQ(static_cast<int>(g.size()), k);
        EXPECT_EQ(g.front(), 999);
        if (k > 1) {
            EXPECT_EQ(g.back(), 0);
        }
        for (std::size_t i = 1; i < g.size(); ++i) {
            EXPECT_LT(g[i], g[i - 1]);
        }
    }
    EXPECT_THROW((SamplerPlan{0, 1.0, 1, -1}.validate(s)), ContractError);
    EXPECT_THROW((SamplerPlan{4, 1.0, 5, -1}.validate(s)), ContractError);
    EXPECT_THROW((SamplerPlan{4, 1.0, 0, -1}.validate(s)), ContractError);
}

TEST(Diffusion, GuidanceCollapsesWhenBranchesAgree) {
    const NoiseSchedule s = NoiseSchedule::linear();
    const TextConditioning text = dummy_text(2);
    CountingStub a;
    const Tensor one = sample_kstep(a, s, {4, 1.0, 1, -1}, {&text, &text, nullptr}, 2, 9).value();
    EXPECT_EQ(a.calls, 4);
    CountingStub b;
    const Tensor two = sample_kstep(b, s, {4, 1.2, 1, -1}, {&text, &text, nullptr}, 2, 9).value();
    EXPECT_EQ(b.calls, 8);
    EXPECT_LT(max_abs_diff(one, two), 1e-12);
}

TEST(Diffusion, SamplerDeterminismAndTaps) {
    const NoiseSchedule s = NoiseSchedule::linear();
    const BaseModel m(7);
    const TextConditioning text = m.text({caption_of(neutral_scene())});
    const SamplerPlan plan{4, 1.0, 4, -1};
    TapSink sink;
    const Tensor a = sample_kstep(m.denoiser, s, plan, {&text, nullptr, nullptr}, 1, 42, &sink).value();
    const Tensor b = sample_kstep(m.denoiser, s, plan, {&text, nullptr, nullptr}, 1, 42).value();
    EXPECT_TRUE(bitwise_equal(a, b));
    ASSERT_EQ(sink.records.size(), 12U);
    for (std::size_t i = 0; i < sink.records.size(); ++i) {
        EXPECT_EQ(sink.records[i].step_index, static_cast<int>(i) / kCrossAttnLayers);
        EXPECT_EQ(sink.records[i].layer_id, static_cast<int>(i) % kCrossAttnLayers);
    }
}

TEST(Diffusion, ZeroIdWeightMatchesPlainSampler) {
    const NoiseSchedule s = NoiseSchedule::linear();
    const BaseModel m(8);
    const IdAdapter adapter(m.denoiser, 3);
    Rng rng(6);
    IdFeatures f{rng.normal_tensor({1, 64}), rng.normal_tensor({1, 64}), rng.normal_tensor({1, 128})};
    const IdConditioning id = adapter.condition(f, 0.0);
    const TextConditioning text = m.text({caption_of(neutral_scene())});
    const TextConditioning uncond = m.text({empty_caption()});
    const SamplerPlan plan{4, 1.2, 4, -1};
    const Tensor a = sample_kstep(m.denoiser, s, plan, {&text, &uncond, nullptr}, 1, 5).value();
    const Tensor b = sample_kstep(m.denoiser, s, plan, {&text, &uncond, &id}, 1, 5).value();
    EXPECT_TRUE(bitwise_equal(a, b));
}

TEST(Diffusion, DetachedPrefixLeavesGradientUnchanged) {
    const NoiseSchedule s = NoiseSchedule::linear();
    const BaseModel m(9);
    const IdAdapter adapter(m.denoiser, 4);
    const ParamList params = adapter.parameters();
    set_trainable(params, true);
    Rng rng(7);
    IdFeatures f{rng.normal_tensor({1, 64}), rng.normal_tensor({1, 64}), rng.normal_tensor({1, 128})};
    const TextConditioning text = m.text({caption_of(neutral_scene())});
    const SamplerPlan plan{4, 1.0, 2, -1};
    auto grads = [&]() {
        std::vector<Tensor> out;
        for (const auto& p : params) {
            out.push_back(p.var.has_grad() ? p.var.grad() : Tensor(p.var.shape()));
        }
        zero_grads(params);
        return out;
    };
    zero_grads(params);
    {
        const IdConditioning id = adapter.condition(f);
        mean_all(square(sample_kstep(m.denoiser, s, plan, {&text, nullptr, &id}, 1, 11))).backward();
    }
    const auto full = grads();
    Tensor prefix;
    {
        const IdConditioning id = adapter.condition(f);
        prefix = advance_detached(m.denoiser, s, plan, initial_noise(1, 11), 2, {&text, nullptr, &id});
        mean_all(square(sample_from(m.denoiser, s, plan, constant(prefix), 2, {&text, nullptr, &id}))).backward();
    }
    const auto spliced = grads();
    ASSERT_EQ(full.size(), spliced.size());
    double total = 0.0;
    for (std::size_t i = 0; i < full.size(); ++i) {
        EXPECT_TRUE(bitwise_equal(full[i], spliced[i])) << params[i].name;
        for (double g : full[i].values()) total += std::abs(g);
    }
    EXPECT_GT(total, 0.0);

    // Perturbing the adapter inside the detached prefix moves the start state
    // but adds no gradient path through those steps.
    {
        NoGradGuard guard;
        Var wv = params.front().var;
        Tensor& w = wv.mutable_value();
        const Tensor keep = w;
        for (double& v : w.values()) v += 0.05;
        const IdConditioning id = adapter.condition(f);
        const Tensor moved = advance_detached(m.denoiser, s, plan, initial_noise(1, 11), 2, {&text, nullptr, &id});
        w = keep;
        EXPECT_GT(max_abs_diff(moved, prefix), 0.0);
        prefix = moved;
    }
    {
        const IdConditioning id = adapter.condition(f);
        Var x = constant(prefix);
        mean_all(square(sample_from(m.denoiser, s, plan, x, 2, {&text, nullptr, &id}))).backward();
        EXPECT_FALSE(x.has_grad());
    }
    zero_grads(params);
}

TEST(Diffusion, DiffusionLossGradientMatchesFiniteDifferences) {
    const NoiseSchedule s = NoiseSchedule::linear();
    const BaseModel m(10);
    const IdAdapter adapter(m.denoiser, 5);
    Rng rng(8);
    const Tensor x0 = rng.normal_tensor({4, kImageSize, kImageSize, kChannels}, 0.5);
    IdFeatures f{rng.normal_tensor({4, 64}), rng.normal_tensor({4, 64}), rng.normal_tensor({4, 128})};
    const TextConditioning text = m.text(std::vector<CaptionTokens>(4, caption_of(neutral_scene())));
    const ParamList params = adapter.parameters();
    set_trainable(params, true);
    for (const std::size_t which : {std::size_t{1}, params.size() - 1}) {
        const Var p = params[which].var;
        const double err = testing::probe_grad_error(
            [&]() {
                Rng r(99);
                const IdConditioning id = adapter.condition(f);
                return diffusion_loss(m.denoiser, s, text, &id, x0, r).loss;
            },
            p, testing::spread_entries(p.value().numel()));
        EXPECT_LE(err, 1e-4) << params[which].name;
    }
}

}  // namespace
}  // namespace idalign
