// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pretraining of the frozen backbones and their quality gates.

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "idalign/backbones.hpp"
#include "idalign/diffusion.hpp"

namespace idalign {

struct PretrainConfig {
    int steps = 0;
    int batch_size = 16;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    /// Called after every optimizer step with (step, loss).
    std::function<void(int, double)> on_step;
};

inline constexpr double kTextDropout = 0.1;

/// Epsilon-prediction training on training-split samples; captions are
/// replaced by the empty caption with probability 0.1.
BaseModel pretrain_base(const Dataset& data, const PretrainConfig& config, std::vector<double>* trace = nullptr);

/// Identity classification on training-split crops with noise augmentation.
FaceEmbedder pretrain_face_embedder(const Dataset& data, int width, const PretrainConfig& config,
                                    std::vector<double>* trace = nullptr);

/// Symmetric in-batch contrastive image/caption training.
JointEncoder pretrain_joint_encoder(const Dataset& data, const PretrainConfig& config,
                                    std::vector<double>* trace = nullptr);

/// All frozen models used by the identity stages.
struct Backbones {
    BaseModel base{0};
    FaceEmbedder face;
    FaceEmbedder eval_face;
    JointEncoder joint;

    /// Census of every frozen parameter.
    ParamList parameters() const;
    void freeze() const;
};

// --- quality gates ---------------------------------------------------------------

struct VerificationStats {
    double same_mean = 0.0;
    double cross_mean = 0.0;
    int pairs = 0;

    double gap() const { return same_mean - cross_mean; }
};

/// Same-identity vs cross-identity crop cosine over held-out identities.
VerificationStats face_verification(const FaceEmbedder& face, const Dataset& data, int pairs, std::uint64_t seed);

struct RetrievalStats {
    double top1 = 0.0;
    double chance = 0.0;
    double matched_cosine = 0.0;
    double shuffled_cosine = 0.0;
};

/// Caption retrieval among the distinct captions of up to max_samples
/// held-out samples.
RetrievalStats caption_retrieval(const JointEncoder& joint, const Dataset& data, int max_samples);

struct CaptionMatchStats {
    double conditional = 0.0;
    double unconditional = 0.0;

    double gap() const { return conditional - unconditional; }
};

/// Joint-encoder caption match of conditional vs unconditional samples.
CaptionMatchStats base_caption_match(const BaseModel& base, const JointEncoder& joint, const NoiseSchedule& schedule,
                                     const std::vector<CaptionTokens>& prompts, int sampler_steps,
                                     std::uint64_t seed);

/// Stacks the identity crops of images [B, 32, 32, 3] -> [B, 16, 16, 3].
Tensor crops_of(const Tensor& images);

}  // namespace idalign
