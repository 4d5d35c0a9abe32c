// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include <set>

#include <gtest/gtest.h>

#include "idalign/errors.hpp"
#include "idalign/training.hpp"

namespace idalign {
namespace {

Backbones tiny_backbones() {
    Backbones bb;
    bb.base = BaseModel(1);
    Rng rng(2);
    bb.face = FaceEmbedder(16, rng);
    bb.eval_face = FaceEmbedder(12, rng);
    bb.joint = JointEncoder(rng);
    bb.freeze();
    return bb;
}

struct World {
    Backbones bb = tiny_backbones();
    Dataset data = generate_dataset(6, 4, 3);
    TrainingContext ctx{bb, data};
};

StageConfig quick(Stage stage, int steps) {
    StageConfig c = default_stage_config(stage);
    c.steps = steps;
    c.batch_size = 2;
    c.id_batch = 1;
    c.seed = 17;
    return c;
}

TEST(Training, PromptPoolCoversEveryCategory) {
    const PromptPool pool = make_prompt_pool();
    ASSERT_GE(pool.size(), 12U);
    ASSERT_EQ(pool.categories.size(), pool.size());
    std::set<PromptCategory> cats(pool.categories.begin(), pool.categories.end());
    EXPECT_EQ(static_cast<int>(cats.size()), kPromptCategories);
    std::set<std::string> texts;
    for (const auto& p : pool.prompts) {
        EXPECT_TRUE(parse_caption(p).has_value()) << caption_text(p);
        texts.insert(caption_text(p));
    }
    EXPECT_EQ(texts.size(), pool.size());
}

TEST(Training, StageNamesRoundTrip) {
    for (Stage s : {Stage::stage1, Stage::naive, Stage::stage2, Stage::stage3}) {
        EXPECT_EQ(parse_stage(stage_name(s)), s);
    }
    EXPECT_FALSE(parse_stage("stage4").has_value());
}

TEST(Training, DefaultBudgets) {
    EXPECT_EQ(default_stage_config(Stage::stage1).steps, 3000);
    EXPECT_DOUBLE_EQ(default_stage_config(Stage::stage1).learning_rate, 1e-3);
    for (Stage s : {Stage::naive, Stage::stage2, Stage::stage3}) {
        EXPECT_EQ(default_stage_config(s).steps, 1500);
        EXPECT_DOUBLE_EQ(default_stage_config(s).learning_rate, 3e-4);
    }
    const StageConfig c = default_stage_config(Stage::stage3);
    EXPECT_EQ(c.plan.steps, 4);
    EXPECT_DOUBLE_EQ(c.weights.lambda_sem, 0.6);
    EXPECT_DOUBLE_EQ(c.weights.lambda_layout, 0.1);
    EXPECT_DOUBLE_EQ(c.weights.lambda_id, 1.0);
}

TEST(Training, ZeroStepsLeavesAdapterUntouched) {
    World w;
    IdAdapter a(w.bb.base.denoiser, 4);
    const auto before = fingerprint(a.parameters());
    EXPECT_TRUE(train_stage(w.ctx, a, quick(Stage::stage3, 0)).empty());
    EXPECT_EQ(fingerprint(a.parameters()), before);
}

TEST(Training, SameSeedGivesIdenticalTraces) {
    World w;
    IdAdapter a(w.bb.base.denoiser, 4);
    IdAdapter b(w.bb.base.denoiser, 4);
    const auto ta = train_stage(w.ctx, a, quick(Stage::stage2, 2));
    const auto tb = train_stage(w.ctx, b, quick(Stage::stage2, 2));
    ASSERT_EQ(ta.size(), 2U);
    for (std::size_t i = 0; i < ta.size(); ++i) {
        EXPECT_EQ(ta[i].total, tb[i].total);
        EXPECT_EQ(ta[i].l_id, tb[i].l_id);
    }
    EXPECT_EQ(fingerprint(a.parameters()), fingerprint(b.parameters()));
}

TEST(Training, LoggedTermsFollowTheStage) {
    World w;
    IdAdapter a(w.bb.base.denoiser, 4);
    const auto s1 = train_stage(w.ctx, a, quick(Stage::stage1, 1));
    EXPECT_GT(s1[0].l_diff, 0.0);
    EXPECT_EQ(s1[0].l_id, 0.0);
    EXPECT_EQ(s1[0].l_sem, 0.0);
    EXPECT_DOUBLE_EQ(s1[0].total, s1[0].l_diff);
    const auto naive = train_stage(w.ctx, a, quick(Stage::naive, 1));
    EXPECT_GT(naive[0].l_id, 0.0);
    EXPECT_EQ(naive[0].l_sem, 0.0);
    const auto s3 = train_stage(w.ctx, a, quick(Stage::stage3, 1));
    EXPECT_GT(s3[0].l_id, 0.0);
    EXPECT_GE(s3[0].l_sem, 0.0);
    EXPECT_GT(s3[0].l_layout, 0.0);
    EXPECT_NEAR(s3[0].total, s3[0].l_diff + 0.6 * s3[0].l_sem + 0.1 * s3[0].l_layout + s3[0].l_id, 1e-12);
}

TEST(Training, StageMasksTermGradients) {
    World w;
    const IdAdapter a(w.bb.base.denoiser, 4);
    const TermGradients g1 = stage_term_gradients(w.ctx, a, quick(Stage::stage1, 1));
    EXPECT_GT(g1.diff, 0.0);
    EXPECT_EQ(g1.align, 0.0);
    EXPECT_EQ(g1.id, 0.0);
    const TermGradients g2 = stage_term_gradients(w.ctx, a, quick(Stage::stage2, 1));
    EXPECT_GT(g2.id, 0.0);
    EXPECT_EQ(g2.align, 0.0);
    const TermGradients g3 = stage_term_gradients(w.ctx, a, quick(Stage::stage3, 1));
    EXPECT_GT(g3.diff, 0.0);
    EXPECT_GT(g3.align, 0.0);
    EXPECT_GT(g3.id, 0.0);
}

TEST(Training, BackboneStaysBitIdentical) {
    World w;
    const auto before = snapshot(w.bb.parameters());
    IdAdapter a(w.bb.base.denoiser, 4);
    train_stage(w.ctx, a, quick(Stage::stage3, 2));
    EXPECT_TRUE(matches_snapshot(w.bb.parameters(), before));
}

TEST(Training, UnfrozenBackboneIsRejected) {
    World w;
    ParamList face;
    w.bb.face.collect("face", face);
    set_trainable(face, true);
    IdAdapter a(w.bb.base.denoiser, 4);
    EXPECT_THROW(train_stage(w.ctx, a, quick(Stage::stage1, 1)), FrozenParameterError);
}

TEST(Training, InvalidWeightsAreRejected) {
    World w;
    IdAdapter a(w.bb.base.denoiser, 4);
    StageConfig c = quick(Stage::stage3, 1);
    c.weights.lambda_sem = -1.0;
    EXPECT_THROW(train_stage(w.ctx, a, c), ConfigError);
    c = quick(Stage::stage3, 1);
    c.plan.bp_last_k = 5;
    EXPECT_ANY_THROW(train_stage(w.ctx, a, c));
}

TEST(Training, TimingHarnessReportsEveryBudget) {
    World w;
    const IdAdapter a(w.bb.base.denoiser, 4);
    const auto before = fingerprint(a.parameters());
    const auto rows = timing_harness(w.ctx, a, {1, 4}, true, 1, 1);
    ASSERT_EQ(rows.size(), 2U);
    EXPECT_EQ(rows[0].bp_last_k, 1);
    EXPECT_EQ(rows[1].bp_last_k, 4);
    for (const auto& r : rows) {
        EXPECT_EQ(r.sampler_steps, 4);
        EXPECT_GT(r.seconds_per_iter, 0.0);
        EXPECT_GT(r.peak_bytes, 0U);
    }
    EXPECT_EQ(fingerprint(a.parameters()), before);
}

}  // namespace
}  // namespace idalign
