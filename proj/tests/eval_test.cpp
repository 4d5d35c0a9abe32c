// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "idalign/errors.hpp"
#include "idalign/eval.hpp"

namespace idalign {
namespace {

namespace fs = std::filesystem;

struct World {
    Backbones bb;
    Dataset data = generate_dataset(6, 4, 3);
    World() {
        bb.base = BaseModel(1);
        Rng rng(2);
        bb.face = FaceEmbedder(16, rng);
        bb.eval_face = FaceEmbedder(12, rng);
        bb.joint = JointEncoder(rng);
        bb.freeze();
    }
};

TEST(Eval, MetricsAreSelfConsistent) {
    World w;
    const Tensor a = w.data.samples[0].image;
    const Tensor b = w.data.samples[5].image;
    EXPECT_NEAR(face_sim(w.bb.face, a, a), 1.0, 1e-12);
    EXPECT_NEAR(clip_i_analog(w.bb.joint, a, a), 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(face_sim(w.bb.face, a, b), face_sim(w.bb.face, b, a));
    EXPECT_DOUBLE_EQ(clip_i_analog(w.bb.joint, a, b), clip_i_analog(w.bb.joint, b, a));
    const double ct = clip_t_analog(w.bb.joint, a, w.data.samples[0].caption);
    EXPECT_GE(ct, -1.0);
    EXPECT_LE(ct, 1.0);
}

TEST(Eval, PromptsParseAndAreDistinct) {
    const auto prompts = eval_prompts();
    EXPECT_EQ(prompts.size(), 10U);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        EXPECT_TRUE(parse_caption(prompts[i]).has_value());
        for (std::size_t j = i + 1; j < prompts.size(); ++j) {
            EXPECT_NE(caption_text(prompts[i]), caption_text(prompts[j]));
        }
    }
}

TEST(Eval, ReportCountsAndZeroWeightPreservesImages) {
    World w;
    const TrainingContext ctx(w.bb, w.data);
    EvalConfig cfg;
    cfg.prompts.resize(2);
    cfg.seeds = {101, 202};
    cfg.id_weight = 0.0;
    Evaluator ev(ctx, cfg);
    const IdAdapter adapter(w.bb.base.denoiser, 3);
    const MetricsReport r = ev.run(adapter, 42);
    EXPECT_EQ(r.n_samples, static_cast<int>(w.data.heldout_ids.size() * 2 * 2));
    EXPECT_EQ(r.config_hash, 42U);
    for (const auto& rec : r.records) {
        EXPECT_NEAR(rec.clip_i, 1.0, 1e-6);
    }
    const auto path = fs::temp_directory_path() / "idalign_eval_test.jsonl";
    r.write_jsonl(path);
    std::ifstream is(path);
    std::string line;
    int lines = 0;
    while (std::getline(is, line)) ++lines;
    EXPECT_EQ(lines, r.n_samples + 1);
    fs::remove(path);
}

TEST(Eval, TrainingIdentitiesAreRejected) {
    World w;
    const TrainingContext ctx(w.bb, w.data);
    EvalConfig cfg;
    cfg.ids = {w.data.train_ids.front()};
    EXPECT_THROW(Evaluator(ctx, cfg), ContractError);
}

TEST(Eval, EvalNoiseDependsOnlyOnSeedAndPrompt) {
    EXPECT_TRUE(bitwise_equal(eval_noise(101, 3), eval_noise(101, 3)));
    EXPECT_FALSE(bitwise_equal(eval_noise(101, 3), eval_noise(101, 4)));
    EXPECT_FALSE(bitwise_equal(eval_noise(101, 3), eval_noise(202, 3)));
}

TEST(Eval, GridGeometryAndSidecar) {
    std::vector<GridRow> rows(3);
    for (int r = 0; r < 3; ++r) {
        rows[static_cast<std::size_t>(r)].caption = "row " + std::to_string(r);
        for (int c = 0; c < 4; ++c) {
            rows[static_cast<std::size_t>(r)].images.push_back(Tensor({kImageSize, kImageSize, kChannels}, 0.1 * c));
        }
    }
    const auto [wpx, hpx] = grid_size(rows);
    EXPECT_EQ(wpx, 4 * kImageSize + 5 * kGridMargin);
    EXPECT_EQ(hpx, 3 * kImageSize + 4 * kGridMargin);
    const auto path = fs::temp_directory_path() / "idalign_grid_test.png";
    emit_grid(rows, path);
    ASSERT_TRUE(fs::exists(path));
    std::ifstream png(path, std::ios::binary);
    char sig[8];
    png.read(sig, 8);
    EXPECT_EQ(std::string(sig + 1, 3), "PNG");
    std::ifstream side(path.string() + ".txt");
    std::string line;
    int n = 0;
    while (std::getline(side, line)) {
        EXPECT_EQ(line, "row " + std::to_string(n));
        ++n;
    }
    EXPECT_EQ(n, 3);
    fs::remove(path);
    fs::remove(path.string() + ".txt");
}

TEST(Eval, MalformedGridsAreRejected) {
    EXPECT_THROW(grid_size({}), ContractError);
    std::vector<GridRow> ragged(2);
    ragged[0].images.push_back(Tensor({kImageSize, kImageSize, kChannels}));
    ragged[1].images.push_back(Tensor({kImageSize, kImageSize, kChannels}));
    ragged[1].images.push_back(Tensor({kImageSize, kImageSize, kChannels}));
    EXPECT_THROW(grid_size(ragged), ContractError);
    std::vector<GridRow> bad(1);
    bad[0].images.push_back(Tensor({4, 4, 3}));
    EXPECT_THROW(grid_size(bad), ContractError);
}

}  // namespace
}  // namespace idalign
