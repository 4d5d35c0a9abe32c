// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "idalign/errors.hpp"
#include "idalign/pretrain.hpp"
#include "idalign/synthid.hpp"

namespace idalign {
namespace {

std::vector<CaptionTokens> some_captions(int n) {
    std::vector<CaptionTokens> out;
    const auto scenes = all_scenes();
    for (int i = 0; i < n; ++i) {
        out.push_back(caption_of(scenes[static_cast<std::size_t>(i * 31) % scenes.size()]));
    }
    return out;
}

IdConditioning random_id(int batch, Rng& rng, double weight) {
    IdConditioning id;
    for (int l = 0; l < kCrossAttnLayers; ++l) {
        id.keys.push_back(constant(rng.normal_tensor({batch, 10, kAttnDim})));
        id.values.push_back(constant(rng.normal_tensor({batch, 10, kAttnDim})));
    }
    id.weight = weight;
    return id;
}

TEST(Backbones, EpsilonShapeMatchesInput) {
    const BaseModel m(3);
    Rng rng(1);
    const TextConditioning text = m.text(some_captions(2));
    const Var x = constant(rng.normal_tensor({2, kImageSize, kImageSize, kChannels}));
    const Var eps = m.denoiser.predict(x, {10, 900}, text, nullptr, nullptr);
    EXPECT_EQ(eps.shape(), x.shape());
    EXPECT_TRUE(eps.value().all_finite());
}

TEST(Backbones, ZeroIdWeightIsBitwiseIdentity) {
    const BaseModel m(4);
    Rng rng(2);
    const TextConditioning text = m.text(some_captions(2));
    const Var x = constant(rng.normal_tensor({2, kImageSize, kImageSize, kChannels}));
    const IdConditioning zero = random_id(2, rng, 0.0);
    const Tensor a = m.denoiser.predict(x, {500, 20}, text, nullptr, nullptr).value();
    const Tensor b = m.denoiser.predict(x, {500, 20}, text, &zero, nullptr).value();
    EXPECT_TRUE(bitwise_equal(a, b));
    const IdConditioning one = random_id(2, rng, 1.0);
    const Tensor c = m.denoiser.predict(x, {500, 20}, text, &one, nullptr).value();
    EXPECT_FALSE(bitwise_equal(a, c));
}

TEST(Backbones, ThreeTapsWithNormalizedRows) {
    const BaseModel m(5);
    Rng rng(3);
    const TextConditioning text = m.text(some_captions(2));
    const Var x = constant(rng.normal_tensor({2, kImageSize, kImageSize, kChannels}));
    TapSink sink;
    sink.step_index = 7;
    m.denoiser.predict(x, {300, 300}, text, nullptr, &sink);
    ASSERT_EQ(sink.records.size(), static_cast<std::size_t>(kCrossAttnLayers));
    for (int l = 0; l < kCrossAttnLayers; ++l) {
        const AttentionTap& tap = sink.records[static_cast<std::size_t>(l)];
        EXPECT_EQ(tap.layer_id, l);
        EXPECT_EQ(tap.step_index, 7);
        EXPECT_EQ(tap.queries.dim(1), Denoiser::kLayerPositions[static_cast<std::size_t>(l)]);
        EXPECT_EQ(tap.queries.dim(2), kAttnDim);
        EXPECT_EQ(tap.keys.dim(1), kCaptionLength);
        const Tensor& p = tap.attention;
        const int rows = p.dim(0) * p.dim(1);
        const int len = p.dim(2);
        for (int r = 0; r < rows; ++r) {
            double s = 0.0;
            for (int j = 0; j < len; ++j) {
                s += p[static_cast<std::size_t>(r) * len + j];
            }
            ASSERT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Backbones, PadKeysGetNoAttention) {
    const BaseModel m(6);
    Rng rng(4);
    const std::vector<CaptionTokens> caps{caption_of(neutral_scene())};
    const TextConditioning text = m.text(caps);
    TapSink sink;
    m.denoiser.predict(constant(rng.normal_tensor({1, kImageSize, kImageSize, kChannels})), {100}, text, nullptr,
                       &sink);
    const Tensor& p = sink.records.front().attention;
    for (int n = 0; n < p.dim(1); ++n) {
        for (int j = 4; j < kCaptionLength; ++j) {
            ASSERT_EQ(p[static_cast<std::size_t>(n) * kCaptionLength + j], 0.0);
        }
    }
}

TEST(Backbones, TextEncoderIgnoresPadContent) {
    Rng rng(7);
    const TextEncoder enc(rng);
    const CaptionTokens a = caption_of(neutral_scene());
    const TextConditioning t1 = enc({a});
    const TextConditioning t2 = enc({a});
    EXPECT_TRUE(bitwise_equal(t1.features.value(), t2.features.value()));
    EXPECT_EQ(t1.key_mask.numel(), static_cast<std::size_t>(kCaptionLength));
}

TEST(Backbones, EmbeddingsAreUnitNorm) {
    Rng rng(8);
    const FaceEmbedder face(8, rng);
    const JointEncoder joint(rng);
    const Dataset d = generate_dataset(4, 3, 1);
    std::vector<const Tensor*> ptrs;
    for (const auto& s : d.samples) {
        ptrs.push_back(&s.image);
    }
    const Tensor images = stack_images(ptrs);
    auto check_rows = [](const Tensor& e) {
        for (int i = 0; i < e.dim(0); ++i) {
            double n = 0.0;
            for (int j = 0; j < e.dim(1); ++j) {
                n += e[static_cast<std::size_t>(i) * e.dim(1) + j] * e[static_cast<std::size_t>(i) * e.dim(1) + j];
            }
            ASSERT_NEAR(std::sqrt(n), 1.0, 1e-6);
        }
    };
    check_rows(face.embed(constant(crops_of(images))).value());
    const Tensor img_emb = joint.embed_images(constant(images)).value();
    check_rows(img_emb);
    check_rows(joint.embed_text(some_captions(5)).value());
    const Tensor again = joint.embed_images(constant(images)).value();
    double self = 0.0;
    for (int j = 0; j < kEmbedDim; ++j) {
        self += img_emb[static_cast<std::size_t>(j)] * again[static_cast<std::size_t>(j)];
    }
    EXPECT_NEAR(self, 1.0, 1e-12);
}

TEST(Backbones, PretrainBaseZeroStepsIsInitialization) {
    const Dataset d = generate_dataset(4, 3, 2);
    PretrainConfig c;
    c.steps = 0;
    c.seed = 9;
    const BaseModel trained = pretrain_base(d, c);
    const BaseModel init(9);
    EXPECT_EQ(fingerprint(trained.parameters()), fingerprint(init.parameters()));
}

TEST(Backbones, PretrainBaseIsSeedDeterministic) {
    const Dataset d = generate_dataset(4, 3, 2);
    PretrainConfig c;
    c.steps = 3;
    c.batch_size = 2;
    c.seed = 10;
    std::vector<double> t1, t2;
    pretrain_base(d, c, &t1);
    pretrain_base(d, c, &t2);
    ASSERT_EQ(t1.size(), 3U);
    EXPECT_EQ(t1, t2);
}

TEST(Backbones, FaceEmbedderLearnsIdentities) {
    const Dataset d = generate_dataset(20, 12, 3);
    PretrainConfig c;
    c.steps = 150;
    c.batch_size = 32;
    c.learning_rate = 2e-3;
    c.seed = 4;
    std::vector<double> trace;
    const FaceEmbedder face = pretrain_face_embedder(d, 8, c, &trace);
    EXPECT_LT(trace.back(), trace.front());
    const VerificationStats trained = face_verification(face, d, 200, 1);
    Rng rng(4);
    const VerificationStats init = face_verification(FaceEmbedder(8, rng), d, 200, 1);
    EXPECT_GE(trained.gap(), 0.3);
    EXPECT_GT(trained.gap(), init.gap());
}

TEST(Backbones, JointEncoderBeatsChance) {
    const Dataset d = generate_dataset(20, 12, 5);
    PretrainConfig c;
    c.steps = 150;
    c.batch_size = 32;
    c.learning_rate = 2e-3;
    c.seed = 6;
    const JointEncoder joint = pretrain_joint_encoder(d, c);
    const RetrievalStats r = caption_retrieval(joint, d, 48);
    EXPECT_GE(r.top1, 4.0 * r.chance);
    EXPECT_GT(r.matched_cosine, r.shuffled_cosine);
}

TEST(Backbones, FrozenParametersRejectOptimizer) {
    Backbones bb;
    Rng rng(1);
    bb.face = FaceEmbedder(4, rng);
    bb.eval_face = FaceEmbedder(4, rng);
    bb.joint = JointEncoder(rng);
    bb.freeze();
    for (const auto& p : bb.parameters()) {
        ASSERT_FALSE(p.var.requires_grad()) << p.name;
    }
    EXPECT_THROW(Adam(bb.parameters(), AdamConfig{}), FrozenParameterError);
}

TEST(Backbones, InfoNceIsSymmetricCrossEntropy) {
    Rng rng(11);
    const Var a = l2_normalize_lastdim(constant(rng.normal_tensor({4, 6})));
    const Var b = l2_normalize_lastdim(constant(rng.normal_tensor({4, 6})));
    const double got = info_nce(a, b, 0.07).item();
    double want = 0.0;
    for (int dir = 0; dir < 2; ++dir) {
        const Tensor& x = dir == 0 ? a.value() : b.value();
        const Tensor& y = dir == 0 ? b.value() : a.value();
        for (int i = 0; i < 4; ++i) {
            double lse = 0.0;
            double diag = 0.0;
            for (int j = 0; j < 4; ++j) {
                double s = 0.0;
                for (int k = 0; k < 6; ++k) {
                    s += x[static_cast<std::size_t>(i * 6 + k)] * y[static_cast<std::size_t>(j * 6 + k)];
                }
                lse += std::exp(s / 0.07);
                if (i == j) {
                    diag = s / 0.07;
                }
            }
            want += (std::log(lse) - diag) / 8.0;
        }
    }
    EXPECT_NEAR(got, want, 1e-10);
}

}  // namespace
}  // namespace idalign
