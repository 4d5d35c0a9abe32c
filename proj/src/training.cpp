// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "idalign/errors.hpp"

namespace idalign {

namespace {

std::vector<std::size_t> draw(const std::vector<std::size_t>& pool, int n, Rng& rng) {
    std::vector<std::size_t> out(static_cast<std::size_t>(n));
    for (auto& v : out) {
        v = pool[static_cast<std::size_t>(rng.below(static_cast<int>(pool.size())))];
    }
    return out;
}

std::vector<int> as_rows(const std::vector<std::size_t>& idx) { return {idx.begin(), idx.end()}; }

Tensor images_of(const Dataset& data, const std::vector<std::size_t>& idx) {
    std::vector<const Tensor*> ptrs;
    for (std::size_t i : idx) {
        ptrs.push_back(&data.samples[i].image);
    }
    return stack_images(ptrs);
}

TextConditioning encode_frozen(const TextEncoder& text, const std::vector<CaptionTokens>& captions) {
    NoGradGuard guard;
    return text(captions);
}

double grad_norm(const ParamList& params) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (p.var.has_grad()) {
            for (double g : p.var.grad().values()) {
                sq += g * g;
            }
        }
    }
    return std::sqrt(sq);
}

void check_frozen(const ParamList& frozen) {
    for (const auto& p : frozen) {
        if (p.var.requires_grad()) {
            throw FrozenParameterError("backbone parameter '" + p.name + "' is not frozen");
        }
    }
}

struct IterationTerms {
    Var diff;
    Var align;
    Var id;
    double sem = 0.0;
    double layout = 0.0;
};

/// Builds every loss term the stage uses for one iteration.
IterationTerms build_terms(const TrainingContext& ctx, const IdAdapter& adapter, const StageConfig& config,
                           Rng& rng) {
    const Backbones& bb = ctx.backbones();
    const Dataset& data = ctx.data();
    IterationTerms out;

    const auto idx = draw(ctx.train_indices(), config.batch_size, rng);
    std::vector<CaptionTokens> captions;
    for (std::size_t i : idx) {
        captions.push_back(data.samples[i].caption);
    }
    const Tensor x0 = images_of(data, idx);
    const TextConditioning text = encode_frozen(bb.base.text, captions);
    const IdConditioning id = adapter.condition(select_features(ctx.sample_features(), as_rows(idx)), config.id_weight);
    DiffusionTerms dt = diffusion_loss(bb.base.denoiser, ctx.schedule(), text, &id, x0, rng);
    out.diff = dt.loss;

    if (config.stage == Stage::naive) {
        out.id = id_loss_naive(bb.face, ctx.schedule(), dt, crops_of(x0));
    }
    if (config.stage == Stage::stage2 || config.stage == Stage::stage3) {
        const auto jdx = draw(ctx.train_indices(), config.id_batch, rng);
        const TextConditioning neutral = encode_frozen(
            bb.base.text, std::vector<CaptionTokens>(static_cast<std::size_t>(config.id_batch), caption_of(neutral_scene())));
        const TextConditioning uncond = encode_frozen(
            bb.base.text, std::vector<CaptionTokens>(static_cast<std::size_t>(config.id_batch), empty_caption()));
        const IdConditioning id2 =
            adapter.condition(select_features(ctx.sample_features(), as_rows(jdx)), config.id_weight);
        Var gen = sample_kstep(bb.base.denoiser, ctx.schedule(), config.plan, {&neutral, &uncond, &id2}, config.id_batch,
                               rng.next_u64());
        out.id = id_loss_accurate(bb.face, crops_of(images_of(data, jdx)), gen);
    }
    if (config.stage == Stage::stage3) {
        const PromptPool& pool = ctx.prompt_pool();
        const CaptionTokens& prompt = pool.prompts[static_cast<std::size_t>(rng.below(static_cast<int>(pool.size())))];
        const auto kdx = draw(ctx.train_indices(), config.id_batch, rng);
        const TextConditioning ptext =
            encode_frozen(bb.base.text, std::vector<CaptionTokens>(static_cast<std::size_t>(config.id_batch), prompt));
        const TextConditioning uncond = encode_frozen(
            bb.base.text, std::vector<CaptionTokens>(static_cast<std::size_t>(config.id_batch), empty_caption()));
        const IdConditioning id3 =
            adapter.condition(select_features(ctx.sample_features(), as_rows(kdx)), config.id_weight);
        const ContrastivePair pair = run_contrastive_pair(bb.base.denoiser, ctx.schedule(), config.plan, ptext,
                                                          &uncond, id3, config.id_batch, rng.next_u64());
        AlignTerms at = align_loss(pair, config.weights);
        out.align = at.total;
        out.sem = at.semantic.item();
        out.layout = at.layout.item();
    }
    return out;
}

}  // namespace

std::string stage_name(Stage stage) {
    switch (stage) {
        case Stage::stage1: return "stage1";
        case Stage::naive: return "naive";
        case Stage::stage2: return "stage2";
        case Stage::stage3: return "stage3";
    }
    return "unknown";
}

std::optional<Stage> parse_stage(const std::string& text) {
    if (text == "1" || text == "stage1") return Stage::stage1;
    if (text == "naive" || text == "naive_id") return Stage::naive;
    if (text == "2" || text == "stage2") return Stage::stage2;
    if (text == "3" || text == "stage3") return Stage::stage3;
    return std::nullopt;
}

std::string category_name(PromptCategory category) {
    switch (category) {
        case PromptCategory::accessory: return "accessory";
        case PromptCategory::attribute: return "attribute";
        case PromptCategory::view: return "view";
        case PromptCategory::background: return "background";
        case PromptCategory::style: return "style";
        case PromptCategory::complex: return "complex";
    }
    return "unknown";
}

PromptPool make_prompt_pool() {
    PromptPool pool;
    auto add = [&pool](PromptCategory cat, int bin, Style style, Accessory acc, Orientation orient,
                       std::vector<Attribute> attrs = {}) {
        pool.prompts.push_back(caption_of(SceneSpec::make(bin, style, acc, orient), attrs));
        pool.categories.push_back(cat);
    };
    add(PromptCategory::accessory, 0, Style::flat, Accessory::glasses, Orientation::front);
    add(PromptCategory::accessory, 0, Style::flat, Accessory::hat, Orientation::front);
    add(PromptCategory::attribute, 0, Style::flat, Accessory::none, Orientation::front, {Attribute::smiling});
    add(PromptCategory::attribute, 0, Style::flat, Accessory::none, Orientation::front, {Attribute::big_eyes});
    add(PromptCategory::view, 0, Style::flat, Accessory::none, Orientation::left);
    add(PromptCategory::view, 0, Style::flat, Accessory::none, Orientation::right);
    add(PromptCategory::background, 2, Style::flat, Accessory::none, Orientation::front);
    add(PromptCategory::background, 5, Style::flat, Accessory::none, Orientation::front);
    add(PromptCategory::background, 7, Style::flat, Accessory::none, Orientation::front);
    add(PromptCategory::style, 0, Style::outline, Accessory::none, Orientation::front);
    add(PromptCategory::style, 0, Style::textured, Accessory::none, Orientation::front);
    add(PromptCategory::complex, 3, Style::textured, Accessory::hat, Orientation::left);
    add(PromptCategory::complex, 6, Style::outline, Accessory::glasses, Orientation::right);
    add(PromptCategory::complex, 1, Style::textured, Accessory::glasses, Orientation::front, {Attribute::frowning});
    return pool;
}

StageConfig default_stage_config(Stage stage) {
    StageConfig c;
    c.stage = stage;
    switch (stage) {
        case Stage::stage1:
            c.steps = 3000;
            c.learning_rate = 1e-3;
            break;
        case Stage::naive:
        case Stage::stage2:
        case Stage::stage3:
            c.steps = 1500;
            c.learning_rate = 3e-4;
            break;
    }
    return c;
}

TrainingContext::TrainingContext(const Backbones& backbones, const Dataset& data)
    : backbones_(backbones),
      data_(data),
      schedule_(NoiseSchedule::linear()),
      pool_(make_prompt_pool()),
      train_(data.indices_for(false)) {
    require(!train_.empty(), "TrainingContext: dataset has no training samples");
    std::vector<const Tensor*> ptrs;
    for (const auto& s : data.samples) {
        ptrs.push_back(&s.image);
    }
    features_ = extract_id_features(backbones.face, backbones.joint, crops_of(stack_images(ptrs)));
}

std::vector<StepLog> train_stage(const TrainingContext& ctx, IdAdapter& adapter, const StageConfig& config,
                                 const StepCallback& on_step) {
    config.weights.validate();
    config.plan.validate(ctx.schedule());
    require(config.batch_size >= 1 && config.id_batch >= 1, "train_stage: batch sizes must be positive");
    const ParamList frozen = ctx.backbones().parameters();
    check_frozen(frozen);
    const std::vector<Tensor> before = snapshot(frozen);
    const ParamList params = adapter.parameters();
    set_trainable(params, true);
    std::vector<StepLog> trace;
    if (config.steps <= 0) {
        return trace;
    }
    Adam opt(params, AdamConfig{config.learning_rate, 0.9, 0.999, 1e-8, 1.0});
    Rng rng(config.seed);
    for (int step = 0; step < config.steps; ++step) {
        IterationTerms terms = build_terms(ctx, adapter, config, rng);
        Var total;
        try {
            total = full_objective(terms.diff, terms.align, terms.id, config.weights);
        } catch (const NonFiniteError& e) {
            throw NonFiniteError(std::string(e.what()) + " at step " + std::to_string(step), step);
        }
        total.backward();
        opt.step();
        if (!matches_snapshot(frozen, before)) {
            throw FrozenParameterError("backbone parameters changed at step " + std::to_string(step));
        }
        StepLog log{step,
                    terms.diff.item(),
                    terms.sem,
                    terms.layout,
                    terms.id.defined() ? terms.id.item() : 0.0,
                    total.item()};
        trace.push_back(log);
        if (on_step) {
            on_step(log);
        }
    }
    return trace;
}

TermGradients stage_term_gradients(const TrainingContext& ctx, const IdAdapter& adapter, const StageConfig& config) {
    const ParamList params = adapter.parameters();
    set_trainable(params, true);
    Rng rng(config.seed);
    StageConfig probe = config;
    // Build every term, then weight each by its coefficient in this stage.
    probe.stage = Stage::stage3;
    IterationTerms terms = build_terms(ctx, adapter, probe, rng);
    const bool uses_id = config.stage != Stage::stage1;
    const bool uses_align = config.stage == Stage::stage3;
    TermGradients out;
    auto norm_of = [&params](const Var& term, double coef) {
        zero_grads(params);
        scale(term, coef).backward();
        const double n = grad_norm(params);
        zero_grads(params);
        return n;
    };
    out.diff = norm_of(terms.diff, 1.0);
    out.align = norm_of(terms.align, uses_align ? 1.0 : 0.0);
    out.id = norm_of(terms.id, uses_id ? config.weights.lambda_id : 0.0);
    return out;
}

std::vector<TimingRow> timing_harness(const TrainingContext& ctx, const IdAdapter& adapter,
                                      const std::vector<int>& bp_grid, bool accelerated, int iters, int batch) {
    require(iters >= 1 && batch >= 1, "timing_harness: iters and batch must be positive");
    const Backbones& bb = ctx.backbones();
    const ParamList params = adapter.parameters();
    set_trainable(params, true);
    const std::vector<Tensor> original = snapshot(params);
    const TextConditioning neutral = encode_frozen(
        bb.base.text, std::vector<CaptionTokens>(static_cast<std::size_t>(batch), caption_of(neutral_scene())));
    const TextConditioning uncond =
        encode_frozen(bb.base.text, std::vector<CaptionTokens>(static_cast<std::size_t>(batch), empty_caption()));
    std::vector<TimingRow> rows;
    for (int bp : bp_grid) {
        SamplerPlan plan;
        plan.steps = accelerated ? 4 : 30;
        plan.cfg_scale = accelerated ? 1.0 : 1.2;
        plan.bp_last_k = bp;
        plan.validate(ctx.schedule());
        Adam opt(params, AdamConfig{1e-6, 0.9, 0.999, 1e-8, 1.0});
        Rng rng(1234);
        std::vector<double> secs;
        MemoryStats::reset_peak();
        for (int it = 0; it < iters; ++it) {
            const auto jdx = draw(ctx.train_indices(), batch, rng);
            const auto start = std::chrono::steady_clock::now();
            const IdConditioning id = adapter.condition(select_features(ctx.sample_features(), as_rows(jdx)));
            Var gen = sample_kstep(bb.base.denoiser, ctx.schedule(), plan, {&neutral, &uncond, &id}, batch,
                                   rng.next_u64());
            Var loss = id_loss_accurate(bb.face, crops_of(images_of(ctx.data(), jdx)), gen);
            loss.backward();
            opt.step();
            secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
        }
        std::sort(secs.begin(), secs.end());
        rows.push_back({accelerated, plan.steps, bp, secs[secs.size() / 2], MemoryStats::peak_bytes()});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Var v = params[i].var;
        v.mutable_value() = original[i];
    }
    return rows;
}

}  // namespace idalign
