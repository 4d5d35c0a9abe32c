// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Identity, prompt-following and image-preservation metrics, the held-out
// evaluator, the stage ablation runner and image grids.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idalign/training.hpp"

namespace idalign {

/// Cosine of identity embeddings of the two images' crops ([32, 32, 3] each).
double face_sim(const FaceEmbedder& face, const Tensor& reference, const Tensor& generated);
/// Image-caption cosine under the joint encoder.
double clip_t_analog(const JointEncoder& joint, const Tensor& image, const CaptionTokens& prompt);
/// Image-image cosine under the joint encoder.
double clip_i_analog(const JointEncoder& joint, const Tensor& a, const Tensor& b);

/// Ten evaluation captions spanning the prompt categories.
std::vector<CaptionTokens> eval_prompts();

struct EvalConfig {
    std::vector<int> ids;  // empty: every held-out identity
    std::vector<CaptionTokens> prompts = eval_prompts();
    std::vector<std::uint64_t> seeds{101, 202, 303, 404};
    SamplerPlan plan{4, 1.2, 1, -1};
    double id_weight = 1.0;
    /// Score identity with the independently trained embedder.
    bool use_eval_embedder = true;
};

struct MetricRecord {
    int id_index = 0;
    int prompt_index = 0;
    std::uint64_t seed = 0;
    double face_sim = 0.0;
    double clip_t = 0.0;
    double clip_i = 0.0;
};

struct MetricsReport {
    double face_sim = 0.0;
    double clip_t = 0.0;
    double clip_i = 0.0;
    int n_samples = 0;
    std::uint64_t config_hash = 0;
    std::vector<MetricRecord> records;

    nlohmann::json header() const;
    /// Aggregate header line followed by one line per record.
    void write_jsonl(const std::filesystem::path& path) const;
};

/// Reference image of an identity: the neutral scene render.
ImageSample reference_sample(const Dataset& data, int id_index);

/// Held-out evaluator. Images generated without ID depend only on (prompt,
/// seed) and are cached across checkpoints.
class Evaluator {
public:
    Evaluator(const TrainingContext& ctx, EvalConfig config);

    MetricsReport run(const IdAdapter& adapter, std::uint64_t config_hash = 0);
    /// Generates [n, 32, 32, 3]; adapter may be null for the plain path.
    Tensor generate(const IdAdapter* adapter, int id_index, const std::vector<CaptionTokens>& prompts,
                    const std::vector<std::uint64_t>& seeds) const;
    const EvalConfig& config() const { return config_; }
    const std::vector<int>& ids() const { return ids_; }

private:
    const TrainingContext& ctx_;
    EvalConfig config_;
    std::vector<int> ids_;
    std::map<std::pair<int, std::uint64_t>, Tensor> plain_cache_;
};

/// Per-sample initial noise, identical for every checkpoint.
Tensor eval_noise(std::uint64_t seed, int prompt_index);

struct AblationConfig {
    std::vector<std::uint64_t> seeds{1, 2, 3};
    StageConfig stage1 = default_stage_config(Stage::stage1);
    StageConfig naive = default_stage_config(Stage::naive);
    StageConfig stage2 = default_stage_config(Stage::stage2);
    StageConfig stage3 = default_stage_config(Stage::stage3);
    EvalConfig eval;
    /// Sampler step counts for the step-count ablation; K=4 reuses stage2.
    std::vector<int> step_grid{1, 8};
};

struct AblationRow {
    std::string name;
    double face_sim = 0.0;
    double clip_t = 0.0;
    double clip_i = 0.0;
};

struct Verdict {
    std::string claim;
    std::vector<bool> per_seed;
    bool majority = false;
    /// Not part of the pass/fail gate.
    bool informational = false;
};

struct AblationResult {
    std::vector<std::vector<AblationRow>> per_seed;
    std::vector<AblationRow> mean;
    std::vector<Verdict> verdicts;

    const Verdict* verdict(const std::string& claim) const;
    std::string markdown() const;
};

using ProgressCallback = std::function<void(const std::string&)>;

AblationResult run_ablation(const TrainingContext& ctx, const AblationConfig& config,
                            const ProgressCallback& progress = {});

struct GridRow {
    std::vector<Tensor> images;  // [32, 32, 3] each, values in [-1, 1]
    std::string caption;
};

inline constexpr int kGridMargin = 2;

/// Writes a PNG grid (2 px margins) and path + ".txt" with one caption per row.
void emit_grid(const std::vector<GridRow>& rows, const std::filesystem::path& path);
/// Pixel size (width, height) of the grid emit_grid would write.
std::pair<int, int> grid_size(const std::vector<GridRow>& rows);

}  // namespace idalign
