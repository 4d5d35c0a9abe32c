// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "idalign/errors.hpp"

namespace idalign {

namespace {

std::vector<std::size_t> train_indices(const Dataset& data) {
    std::vector<std::size_t> idx = data.indices_for(false);
    require(!idx.empty(), "pretraining needs training-split samples");
    return idx;
}

std::vector<std::size_t> draw(const std::vector<std::size_t>& pool, int n, Rng& rng) {
    std::vector<std::size_t> out(static_cast<std::size_t>(n));
    for (auto& v : out) {
        v = pool[static_cast<std::size_t>(rng.below(static_cast<int>(pool.size())))];
    }
    return out;
}

Tensor batch_images(const Dataset& data, const std::vector<std::size_t>& idx) {
    std::vector<const Tensor*> ptrs;
    ptrs.reserve(idx.size());
    for (std::size_t i : idx) {
        ptrs.push_back(&data.samples[i].image);
    }
    return stack_images(ptrs);
}

void step_or_throw(Adam& opt, const Var& loss, int step, const char* what) {
    if (!std::isfinite(loss.item())) {
        throw NonFiniteError(std::string("non-finite ") + what + " loss at step " + std::to_string(step), step);
    }
    loss.backward();
    opt.step();
}

void report(const PretrainConfig& config, std::vector<double>* trace, int step, double loss) {
    if (trace != nullptr) {
        trace->push_back(loss);
    }
    if (config.on_step) {
        config.on_step(step, loss);
    }
}

double cosine_rows(const Tensor& a, const Tensor& b, int i, int j) {
    const int d = a.dim(1);
    double s = 0.0;
    for (int k = 0; k < d; ++k) {
        s += a[static_cast<std::size_t>(i) * d + k] * b[static_cast<std::size_t>(j) * d + k];
    }
    return s;
}

}  // namespace

Tensor crops_of(const Tensor& images) {
    require(images.rank() == 4 && images.dim(1) == kImageSize && images.dim(2) == kImageSize,
            "crops_of: expected [B, 32, 32, 3]");
    NoGradGuard guard;
    return crop(constant(images), kCropOrigin, kCropOrigin, kCropSize, kCropSize).value();
}

BaseModel pretrain_base(const Dataset& data, const PretrainConfig& config, std::vector<double>* trace) {
    BaseModel model(config.seed);
    if (config.steps <= 0) {
        return model;
    }
    const auto pool = train_indices(data);
    const NoiseSchedule schedule = NoiseSchedule::linear();
    Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    Adam opt(model.parameters(), AdamConfig{config.learning_rate, 0.9, 0.999, 1e-8, 1.0});
    for (int step = 0; step < config.steps; ++step) {
        const auto idx = draw(pool, config.batch_size, rng);
        std::vector<CaptionTokens> captions;
        for (std::size_t i : idx) {
            captions.push_back(rng.uniform() < kTextDropout ? empty_caption() : data.samples[i].caption);
        }
        const TextConditioning text = model.text(captions);
        DiffusionTerms terms = diffusion_loss(model.denoiser, schedule, text, nullptr, batch_images(data, idx), rng);
        const double value = terms.loss.item();
        step_or_throw(opt, terms.loss, step, "diffusion");
        report(config, trace, step, value);
    }
    return model;
}

FaceEmbedder pretrain_face_embedder(const Dataset& data, int width, const PretrainConfig& config,
                                    std::vector<double>* trace) {
    require(data.train_ids.size() >= 2, "face embedder pretraining needs at least 2 training identities");
    Rng init(config.seed);
    FaceEmbedder face(width, init);
    if (config.steps <= 0) {
        return face;
    }
    std::map<int, int> label_of;
    for (int id : data.train_ids) {
        label_of.emplace(id, static_cast<int>(label_of.size()));
    }
    Var prototypes(init.normal_tensor({static_cast<int>(label_of.size()), kEmbedDim}), true);
    ParamList params;
    face.collect("face", params);
    params.push_back({"face.prototypes", prototypes});
    Adam opt(params, AdamConfig{config.learning_rate, 0.9, 0.999, 1e-8, 1.0});
    const auto pool = train_indices(data);
    Rng rng(config.seed ^ 0x51ed270b27a3f1c5ULL);
    for (int step = 0; step < config.steps; ++step) {
        const auto idx = draw(pool, config.batch_size, rng);
        Tensor crops = crops_of(batch_images(data, idx));
        const std::size_t per = crops.numel() / idx.size();
        std::vector<int> labels;
        for (std::size_t b = 0; b < idx.size(); ++b) {
            labels.push_back(label_of.at(data.samples[idx[b]].identity.id_index));
            const double sigma = 0.25 * rng.uniform();
            for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
                crops[i] += sigma * rng.normal();
            }
        }
        Var loss = cross_entropy(face.logits(face.embed(constant(crops)), prototypes), labels);
        const double value = loss.item();
        step_or_throw(opt, loss, step, "face embedder");
        report(config, trace, step, value);
    }
    return face;
}

JointEncoder pretrain_joint_encoder(const Dataset& data, const PretrainConfig& config, std::vector<double>* trace) {
    Rng init(config.seed);
    JointEncoder joint(init);
    if (config.steps <= 0) {
        return joint;
    }
    ParamList params;
    joint.collect("joint", params);
    Adam opt(params, AdamConfig{config.learning_rate, 0.9, 0.999, 1e-8, 1.0});
    const auto pool = train_indices(data);
    Rng rng(config.seed ^ 0x2545f4914f6cdd1dULL);
    for (int step = 0; step < config.steps; ++step) {
        const auto idx = draw(pool, config.batch_size, rng);
        Tensor images = batch_images(data, idx);
        for (double& v : images.values()) {
            v += 0.1 * rng.uniform() * rng.normal();
        }
        std::vector<CaptionTokens> captions;
        for (std::size_t i : idx) {
            captions.push_back(data.samples[i].caption);
        }
        Var loss = info_nce(joint.embed_images(constant(images)), joint.embed_text(captions),
                            JointEncoder::kTemperature);
        const double value = loss.item();
        step_or_throw(opt, loss, step, "joint encoder");
        report(config, trace, step, value);
    }
    return joint;
}

ParamList Backbones::parameters() const {
    ParamList out = base.parameters();
    face.collect("face", out);
    eval_face.collect("eval_face", out);
    joint.collect("joint", out);
    return out;
}

void Backbones::freeze() const { set_trainable(parameters(), false); }

VerificationStats face_verification(const FaceEmbedder& face, const Dataset& data, int pairs, std::uint64_t seed) {
    NoGradGuard guard;
    const auto idx = data.indices_for(true);
    require(data.heldout_ids.size() >= 2, "face_verification needs at least 2 held-out identities");
    std::map<int, std::vector<std::size_t>> by_id;
    for (std::size_t i : idx) {
        by_id[data.samples[i].identity.id_index].push_back(i);
    }
    std::vector<const Tensor*> ptrs;
    for (std::size_t i : idx) {
        ptrs.push_back(&data.samples[i].image);
    }
    const Tensor emb = face.embed(constant(crops_of(stack_images(ptrs)))).value();
    std::map<std::size_t, int> row_of;
    for (std::size_t r = 0; r < idx.size(); ++r) {
        row_of[idx[r]] = static_cast<int>(r);
    }
    Rng rng(seed);
    VerificationStats s;
    int same = 0;
    int cross = 0;
    const auto& ids = data.heldout_ids;
    for (int p = 0; p < pairs; ++p) {
        const int a = ids[static_cast<std::size_t>(rng.below(static_cast<int>(ids.size())))];
        int b = ids[static_cast<std::size_t>(rng.below(static_cast<int>(ids.size() - 1)))];
        if (b == a) {
            b = ids.back();
        }
        const auto& va = by_id.at(a);
        const auto& vb = by_id.at(b);
        const std::size_t a1 = va[static_cast<std::size_t>(rng.below(static_cast<int>(va.size())))];
        std::size_t a2 = va[static_cast<std::size_t>(rng.below(static_cast<int>(va.size())))];
        while (va.size() > 1 && a2 == a1) {
            a2 = va[static_cast<std::size_t>(rng.below(static_cast<int>(va.size())))];
        }
        const std::size_t b1 = vb[static_cast<std::size_t>(rng.below(static_cast<int>(vb.size())))];
        s.same_mean += cosine_rows(emb, emb, row_of.at(a1), row_of.at(a2));
        s.cross_mean += cosine_rows(emb, emb, row_of.at(a1), row_of.at(b1));
        ++same;
        ++cross;
    }
    s.same_mean /= std::max(1, same);
    s.cross_mean /= std::max(1, cross);
    s.pairs = pairs;
    return s;
}

RetrievalStats caption_retrieval(const JointEncoder& joint, const Dataset& data, int max_samples) {
    NoGradGuard guard;
    auto idx = data.indices_for(true);
    if (static_cast<int>(idx.size()) > max_samples) {
        idx.resize(static_cast<std::size_t>(max_samples));
    }
    require(!idx.empty(), "caption_retrieval: no held-out samples");
    std::vector<CaptionTokens> distinct;
    std::vector<int> truth;
    std::vector<const Tensor*> ptrs;
    std::vector<CaptionTokens> own;
    for (std::size_t i : idx) {
        const auto& cap = data.samples[i].caption;
        auto it = std::find(distinct.begin(), distinct.end(), cap);
        if (it == distinct.end()) {
            distinct.push_back(cap);
            it = distinct.end() - 1;
        }
        truth.push_back(static_cast<int>(it - distinct.begin()));
        ptrs.push_back(&data.samples[i].image);
        own.push_back(cap);
    }
    const Tensor img = joint.embed_images(constant(stack_images(ptrs))).value();
    const Tensor txt = joint.embed_text(distinct).value();
    RetrievalStats s;
    const int n = static_cast<int>(idx.size());
    const int m = static_cast<int>(distinct.size());
    int hits = 0;
    for (int i = 0; i < n; ++i) {
        int best = 0;
        double best_v = -2.0;
        for (int j = 0; j < m; ++j) {
            const double v = cosine_rows(img, txt, i, j);
            if (v > best_v) {
                best_v = v;
                best = j;
            }
        }
        hits += best == truth[static_cast<std::size_t>(i)] ? 1 : 0;
        s.matched_cosine += cosine_rows(img, txt, i, truth[static_cast<std::size_t>(i)]);
        s.shuffled_cosine += cosine_rows(img, txt, i, truth[static_cast<std::size_t>((i + 1) % n)]);
    }
    s.top1 = static_cast<double>(hits) / n;
    s.chance = 1.0 / m;
    s.matched_cosine /= n;
    s.shuffled_cosine /= n;
    return s;
}

CaptionMatchStats base_caption_match(const BaseModel& base, const JointEncoder& joint, const NoiseSchedule& schedule,
                                     const std::vector<CaptionTokens>& prompts, int sampler_steps,
                                     std::uint64_t seed) {
    NoGradGuard guard;
    const int n = static_cast<int>(prompts.size());
    require(n > 0, "base_caption_match: no prompts");
    const TextConditioning cond = base.text(prompts);
    const TextConditioning uncond = base.text(std::vector<CaptionTokens>(prompts.size(), empty_caption()));
    SamplerPlan plan;
    plan.steps = sampler_steps;
    plan.bp_last_k = 1;
    const Tensor with_text = sample_kstep(base.denoiser, schedule, plan, {&cond, &uncond, nullptr}, n, seed).value();
    plan.cfg_scale = 1.0;
    const Tensor without = sample_kstep(base.denoiser, schedule, plan, {&uncond, nullptr, nullptr}, n, seed).value();
    const Tensor txt = joint.embed_text(prompts).value();
    const Tensor a = joint.embed_images(constant(with_text)).value();
    const Tensor b = joint.embed_images(constant(without)).value();
    CaptionMatchStats s;
    for (int i = 0; i < n; ++i) {
        s.conditional += cosine_rows(a, txt, i, i) / n;
        s.unconditional += cosine_rows(b, txt, i, i) / n;
    }
    return s;
}

}  // namespace idalign
