// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a "key = value" text format, one entry per line, '#'
// starts a comment. Unknown keys and out-of-range values raise ConfigError
// naming the field. echo() writes every resolved field in a fixed order, so
// validate(echo(c)) == c.

#pragma once

#include <cstdint>
#include <string>

#include "idalign/eval.hpp"

namespace idalign {

struct RunConfig {
    std::uint64_t seed = 0;

    // dataset
    int n_ids = 40;
    int scenes_per_id = 24;
    std::uint64_t data_seed = 7;

    // backbones
    int base_steps = 1500;
    int base_batch = 16;
    double base_lr = 1e-3;
    int face_steps = 400;
    int face_width = 16;
    int eval_face_width = 12;
    int joint_steps = 600;
    int encoder_batch = 32;
    double encoder_lr = 2e-3;

    // adapter stages
    int stage1_steps = 400;
    int naive_steps = 800;
    int stage2_steps = 800;
    int stage3_steps = 400;
    int batch_size = 8;
    int id_batch = 2;
    double lr_stage1 = 1e-3;
    double lr_later = 3e-4;
    double lambda_sem = 0.6;
    double lambda_layout = 0.1;
    double lambda_id = 1.0;
    int train_steps_k = 4;
    double train_cfg = 1.0;
    int bp_last_k = 4;
    double id_weight = 1.0;

    // inference / evaluation
    int steps = 4;
    double cfg = 1.2;
    int eval_seeds = 4;
    int eval_ids = 0;  // 0: every held-out identity
    int ablation_seeds = 3;
    int eval_embedder = 1;

    bool operator==(const RunConfig&) const = default;

    LossWeights weights() const { return {lambda_sem, lambda_layout, lambda_id}; }
    StageConfig stage_config(Stage stage) const;
    EvalConfig eval_config() const;
    AblationConfig ablation_config() const;
};

RunConfig validate_config(const std::string& text);
RunConfig load_config(const std::string& path);
std::string echo_config(const RunConfig& config);
/// FNV-1a of the echoed text.
std::uint64_t config_hash(const RunConfig& config);
/// Applies one "key=value" override; throws ConfigError on bad input.
void set_config_field(RunConfig& config, const std::string& key, const std::string& value);

}  // namespace idalign
