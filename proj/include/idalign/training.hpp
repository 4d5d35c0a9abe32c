// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Staged adapter training, the alignment prompt pool and the back-propagation
// budget timing harness.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "idalign/adapter.hpp"
#include "idalign/losses.hpp"
#include "idalign/pretrain.hpp"

namespace idalign {

enum class Stage { stage1, naive, stage2, stage3 };

std::string stage_name(Stage stage);
std::optional<Stage> parse_stage(const std::string& text);

enum class PromptCategory { accessory, attribute, view, background, style, complex };
inline constexpr int kPromptCategories = 6;
std::string category_name(PromptCategory category);

struct PromptPool {
    std::vector<CaptionTokens> prompts;
    std::vector<PromptCategory> categories;  // parallel to prompts

    std::size_t size() const { return prompts.size(); }
};

/// Deterministic pool built from the scene vocabulary; each prompt departs
/// from the neutral scene along one category (or several for complex).
PromptPool make_prompt_pool();

struct StageConfig {
    Stage stage = Stage::stage1;
    int steps = 0;
    /// Diffusion-branch batch.
    int batch_size = 8;
    /// Identities per sampler-branch or contrastive-pair run.
    int id_batch = 2;
    double learning_rate = 1e-3;
    SamplerPlan plan{4, 1.0, 4, -1};
    LossWeights weights;
    double id_weight = 1.0;
    std::uint64_t seed = 0;
};

/// Stage defaults: lr 1e-3 for stage1 and 3e-4 afterwards, budgets 3000/1500/1500.
StageConfig default_stage_config(Stage stage);

struct StepLog {
    int step = 0;
    double l_diff = 0.0;
    double l_sem = 0.0;
    double l_layout = 0.0;
    double l_id = 0.0;
    double total = 0.0;
};

/// Frozen models, data and cached identity features shared across stages.
class TrainingContext {
public:
    TrainingContext(const Backbones& backbones, const Dataset& data);

    const Backbones& backbones() const { return backbones_; }
    const Dataset& data() const { return data_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    const PromptPool& prompt_pool() const { return pool_; }
    /// Features of every dataset sample's identity crop, row per sample.
    const IdFeatures& sample_features() const { return features_; }
    const std::vector<std::size_t>& train_indices() const { return train_; }

private:
    const Backbones& backbones_;
    const Dataset& data_;
    NoiseSchedule schedule_;
    PromptPool pool_;
    IdFeatures features_;
    std::vector<std::size_t> train_;
};

using StepCallback = std::function<void(const StepLog&)>;

/// Trains adapter in place. Throws FrozenParameterError if any backbone value
/// changes and NonFiniteError (with the step index) on a non-finite loss.
std::vector<StepLog> train_stage(const TrainingContext& ctx, IdAdapter& adapter, const StageConfig& config,
                                 const StepCallback& on_step = {});

/// Per-term gradient norms of one iteration, each term weighted as the stage
/// weights it.
struct TermGradients {
    double diff = 0.0;
    double align = 0.0;
    double id = 0.0;
};
TermGradients stage_term_gradients(const TrainingContext& ctx, const IdAdapter& adapter, const StageConfig& config);

struct TimingRow {
    bool accelerated = true;
    int sampler_steps = 4;
    int bp_last_k = 1;
    double seconds_per_iter = 0.0;
    std::size_t peak_bytes = 0;
};

/// Median seconds per sampler-branch identity-loss iteration (forward,
/// backward, update) for each bp_last_k. Accelerated: K=4, cfg 1.0;
/// otherwise K=30, cfg 1.2.
std::vector<TimingRow> timing_harness(const TrainingContext& ctx, const IdAdapter& adapter,
                                      const std::vector<int>& bp_grid, bool accelerated, int iters, int batch);

}  // namespace idalign
