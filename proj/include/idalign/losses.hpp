// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Alignment losses between ID-conditioned and unconditioned denoising paths,
// identity losses and the combined objective.

#pragma once

#include <cstdint>
#include <vector>

#include "idalign/diffusion.hpp"

namespace idalign {

struct LossWeights {
    double lambda_sem = 0.6;
    double lambda_layout = 0.1;
    double lambda_id = 1.0;

    /// Throws ConfigError naming the first negative or non-finite weight.
    void validate() const;
};

/// mean((softmax(K Q_id^T / sqrt(d)) Q_id - softmax(K Q_t^T / sqrt(d)) Q_t)^2).
/// K is [L, d] or [B, L, d]; Q_* are [N, d] or [B, N, d].
Var semantic_align_loss(const Var& keys, const Var& q_plain, const Var& q_id);
/// mean((Q_id - Q_t)^2).
Var layout_align_loss(const Var& q_plain, const Var& q_id);

struct ContrastivePair {
    std::uint64_t seed = 0;
    std::vector<AttentionTap> taps_no_id;
    std::vector<AttentionTap> taps_id;
    Var x0_no_id;
    Var x0_id;
};

/// Both paths start from the same noise and prompt. The plain path records no
/// graph; the ID path keeps gradients for the last plan.bp_last_k steps.
ContrastivePair run_contrastive_pair(const NoisePredictor& model, const NoiseSchedule& schedule,
                                     const SamplerPlan& plan, const TextConditioning& prompt,
                                     const TextConditioning* uncond, const IdConditioning& id, int batch,
                                     std::uint64_t seed);

struct AlignTerms {
    Var total;
    Var semantic;  // mean over taps
    Var layout;    // mean over taps
    std::vector<double> per_tap_semantic;
    std::vector<double> per_tap_layout;
};

AlignTerms align_loss(const ContrastivePair& pair, const LossWeights& weights);
/// lambda_sem * mean(sem) + lambda_layout * mean(layout) over per-tap values.
double combine_align(const std::vector<double>& semantic, const std::vector<double>& layout,
                     const LossWeights& weights);

/// mean over rows of 1 - <a, b> for unit embeddings [B, D].
Var cosine_loss(const Var& reference, const Var& generated);
/// Embeds the identity crops of generated images [B, 32, 32, 3] against
/// reference crops [B, 16, 16, 3].
Var id_loss_accurate(const FaceEmbedder& face, const Tensor& id_crops, const Var& generated);
/// Same cosine form on the one-step estimate from a diffusion forward pass,
/// clamped to [-1, 1] before embedding.
Var id_loss_naive(const FaceEmbedder& face, const NoiseSchedule& schedule, const DiffusionTerms& terms,
                  const Tensor& id_crops);

/// L_diff + L_align + lambda_id * L_id; undefined terms count as zero.
Var full_objective(const Var& l_diff, const Var& l_align, const Var& l_id, const LossWeights& weights);

}  // namespace idalign
