// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/losses.hpp"

#include <cmath>

#include "idalign/errors.hpp"

namespace idalign {

namespace {

Var as_batched(const Var& x) {
    if (x.value().rank() == 2) {
        return reshape(x, {1, x.dim(0), x.dim(1)});
    }
    require(x.value().rank() == 3, "alignment loss: expected 2-D or 3-D operand, got " + shape_str(x.shape()));
    return x;
}

Var prompt_response(const Var& keys, const Var& q) {
    const double d = q.dim(-1);
    return bmm(softmax_lastdim(scale(bmm(keys, q, true), 1.0 / std::sqrt(d))), q);
}

void check_finite(const Var& v, const char* what) {
    if (v.defined() && !std::isfinite(v.item())) {
        throw NonFiniteError(std::string("non-finite ") + what, -1);
    }
}

}  // namespace

void LossWeights::validate() const {
    const std::pair<const char*, double> fields[] = {
        {"lambda_sem", lambda_sem}, {"lambda_layout", lambda_layout}, {"lambda_id", lambda_id}};
    for (const auto& [name, value] : fields) {
        if (!std::isfinite(value) || value < 0.0) {
            throw ConfigError(name, "must be a finite nonnegative number, got " + std::to_string(value));
        }
    }
}

Var semantic_align_loss(const Var& keys, const Var& q_plain, const Var& q_id) {
    require(q_plain.shape() == q_id.shape(), "semantic_align_loss: query shapes differ " +
                                                 shape_str(q_plain.shape()) + " vs " + shape_str(q_id.shape()));
    require(keys.dim(-1) == q_id.dim(-1), "semantic_align_loss: key and query widths differ");
    const Var k = as_batched(keys);
    const Var qp = as_batched(q_plain);
    const Var qi = as_batched(q_id);
    require(k.dim(0) == qi.dim(0), "semantic_align_loss: batch mismatch");
    return mse(prompt_response(k, qi), prompt_response(k, qp));
}

Var layout_align_loss(const Var& q_plain, const Var& q_id) {
    require(q_plain.shape() == q_id.shape(), "layout_align_loss: shape mismatch " + shape_str(q_plain.shape()) +
                                                 " vs " + shape_str(q_id.shape()));
    return mse(q_id, q_plain);
}

ContrastivePair run_contrastive_pair(const NoisePredictor& model, const NoiseSchedule& schedule,
                                     const SamplerPlan& plan, const TextConditioning& prompt,
                                     const TextConditioning* uncond, const IdConditioning& id, int batch,
                                     std::uint64_t seed) {
    ContrastivePair pair;
    pair.seed = seed;
    TapSink plain_taps;
    TapSink id_taps;
    {
        NoGradGuard guard;
        pair.x0_no_id = sample_kstep(model, schedule, plan, {&prompt, uncond, nullptr}, batch, seed, &plain_taps);
    }
    pair.x0_id = sample_kstep(model, schedule, plan, {&prompt, uncond, &id}, batch, seed, &id_taps);
    pair.taps_no_id = std::move(plain_taps.records);
    pair.taps_id = std::move(id_taps.records);
    if (pair.taps_no_id.size() != pair.taps_id.size()) {
        throw ContractError("contrastive paths recorded different tap counts");
    }
    for (std::size_t i = 0; i < pair.taps_id.size(); ++i) {
        const auto& a = pair.taps_no_id[i];
        const auto& b = pair.taps_id[i];
        if (a.layer_id != b.layer_id || a.step_index != b.step_index) {
            throw ContractError("contrastive paths recorded mismatched tap indices");
        }
    }
    return pair;
}

AlignTerms align_loss(const ContrastivePair& pair, const LossWeights& weights) {
    if (pair.taps_id.empty() || pair.taps_id.size() != pair.taps_no_id.size()) {
        throw ContractError("align_loss: empty or mismatched tap lists");
    }
    AlignTerms out;
    Var sem_sum;
    Var lay_sum;
    for (std::size_t i = 0; i < pair.taps_id.size(); ++i) {
        const AttentionTap& plain = pair.taps_no_id[i];
        const AttentionTap& with_id = pair.taps_id[i];
        Var q_plain = detach(plain.queries);
        Var sem = semantic_align_loss(detach(plain.keys), q_plain, with_id.queries);
        Var lay = layout_align_loss(q_plain, with_id.queries);
        out.per_tap_semantic.push_back(sem.item());
        out.per_tap_layout.push_back(lay.item());
        sem_sum = sem_sum.defined() ? add(sem_sum, sem) : sem;
        lay_sum = lay_sum.defined() ? add(lay_sum, lay) : lay;
    }
    const double inv = 1.0 / static_cast<double>(pair.taps_id.size());
    out.semantic = scale(sem_sum, inv);
    out.layout = scale(lay_sum, inv);
    out.total = axpby(out.semantic, weights.lambda_sem, out.layout, weights.lambda_layout);
    return out;
}

double combine_align(const std::vector<double>& semantic, const std::vector<double>& layout,
                     const LossWeights& weights) {
    if (semantic.empty() || semantic.size() != layout.size()) {
        throw ContractError("combine_align: empty or mismatched tap lists");
    }
    double s = 0.0;
    double l = 0.0;
    for (std::size_t i = 0; i < semantic.size(); ++i) {
        s += semantic[i];
        l += layout[i];
    }
    const double n = static_cast<double>(semantic.size());
    return weights.lambda_sem * (s / n) + weights.lambda_layout * (l / n);
}

Var cosine_loss(const Var& reference, const Var& generated) {
    require(reference.shape() == generated.shape(), "cosine_loss: shape mismatch");
    const double rows = reference.dim(0);
    return add_scalar(scale(sum_all(dot_lastdim(reference, generated)), -1.0 / rows), 1.0);
}

Var id_loss_accurate(const FaceEmbedder& face, const Tensor& id_crops, const Var& generated) {
    require(generated.dim(0) == id_crops.dim(0), "id_loss_accurate: batch mismatch");
    Var reference;
    {
        NoGradGuard guard;
        reference = face.embed(constant(id_crops));
    }
    Var gen = face.embed(crop(generated, kCropOrigin, kCropOrigin, kCropSize, kCropSize));
    return cosine_loss(detach(reference), gen);
}

Var id_loss_naive(const FaceEmbedder& face, const NoiseSchedule& schedule, const DiffusionTerms& terms,
                  const Tensor& id_crops) {
    Var x0_hat = x0_from_eps(schedule, constant(terms.x_t), terms.eps_hat, terms.t);
    return id_loss_accurate(face, id_crops, clamp(x0_hat, -1.0, 1.0));
}

Var full_objective(const Var& l_diff, const Var& l_align, const Var& l_id, const LossWeights& weights) {
    check_finite(l_diff, "diffusion loss");
    check_finite(l_align, "alignment loss");
    check_finite(l_id, "identity loss");
    Var total = l_diff.defined() ? l_diff : constant(Tensor({}, 0.0));
    if (l_align.defined()) {
        total = add(total, l_align);
    }
    if (l_id.defined() && weights.lambda_id != 0.0) {
        total = axpby(total, 1.0, l_id, weights.lambda_id);
    }
    return total;
}

}  // namespace idalign
