// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "idalign/adapter.hpp"
#include "idalign/errors.hpp"
#include "idalign/losses.hpp"
#include "idalign/pretrain.hpp"
#include "oracles.hpp"

namespace idalign {
namespace {

oracle::Matrix random_matrix(Rng& rng, int rows, int cols) {
    oracle::Matrix m(static_cast<std::size_t>(rows), std::vector<double>(static_cast<std::size_t>(cols)));
    for (auto& r : m) {
        for (double& v : r) v = rng.normal();
    }
    return m;
}

Var to_var(const oracle::Matrix& m) {
    Tensor t({static_cast<int>(m.size()), static_cast<int>(m.front().size())});
    std::size_t k = 0;
    for (const auto& r : m) {
        for (double v : r) t[k++] = v;
    }
    return constant(t);
}

oracle::Matrix batch_row(const Tensor& t, int b) {
    const int n = t.dim(1);
    const int d = t.dim(2);
    oracle::Matrix m(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(d)));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) {
            m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                t[(static_cast<std::size_t>(b) * n + i) * d + j];
        }
    }
    return m;
}

struct Fixture {
    NoiseSchedule schedule = NoiseSchedule::linear();
    BaseModel model{21};
    IdAdapter adapter{model.denoiser, 22};
    Rng rng{23};
    IdFeatures features{rng.normal_tensor({1, 64}), rng.normal_tensor({1, 64}), rng.normal_tensor({1, 128})};
    TextConditioning prompt = model.text({caption_of(SceneSpec::make(3, Style::outline, Accessory::hat,
                                                                     Orientation::left))});
};

TEST(Losses, SemanticAlignmentOracle) {
    const oracle::Matrix k{{1, 0}, {0, 1}};
    const oracle::Matrix qt{{2, 0}, {0, 2}};
    const oracle::Matrix qid{{0, 2}, {2, 0}};
    EXPECT_NEAR(semantic_align_loss(to_var(k), to_var(qt), to_var(qid)).item(), oracle::semantic(k, qt, qid), 1e-12);
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const auto kk = random_matrix(rng, 8, 32);
        const auto a = random_matrix(rng, 64, 32);
        const auto b = random_matrix(rng, 64, 32);
        EXPECT_NEAR(semantic_align_loss(to_var(kk), to_var(a), to_var(b)).item(), oracle::semantic(kk, a, b), 1e-12);
    }
    EXPECT_EQ(semantic_align_loss(to_var(k), to_var(qt), to_var(qt)).item(), 0.0);
}

TEST(Losses, SemanticAlignmentIsPermutationInvariant) {
    Rng rng(2);
    const auto k = random_matrix(rng, 8, 32);
    auto a = random_matrix(rng, 16, 32);
    auto b = random_matrix(rng, 16, 32);
    const double before = semantic_align_loss(to_var(k), to_var(a), to_var(b)).item();
    std::vector<std::size_t> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    oracle::Matrix pa, pb;
    for (std::size_t i : perm) {
        pa.push_back(a[i]);
        pb.push_back(b[i]);
    }
    EXPECT_NEAR(semantic_align_loss(to_var(k), to_var(pa), to_var(pb)).item(), before, 1e-13);
}

TEST(Losses, LayoutAlignment) {
    Rng rng(3);
    const auto a = random_matrix(rng, 3, 4);
    auto b = a;
    EXPECT_EQ(layout_align_loss(to_var(a), to_var(b)).item(), 0.0);
    for (auto& r : b) {
        for (double& v : r) v += 0.5;
    }
    EXPECT_NEAR(layout_align_loss(to_var(a), to_var(b)).item(), 0.25, 1e-15);
    const auto c = random_matrix(rng, 3, 4);
    EXPECT_NEAR(layout_align_loss(to_var(a), to_var(c)).item(), oracle::layout(a, c), 1e-12);
    EXPECT_THROW(layout_align_loss(to_var(a), to_var(random_matrix(rng, 4, 3))), ContractError);
}

TEST(Losses, CombineAlignArithmetic) {
    const LossWeights w;
    EXPECT_NEAR(combine_align({1, 1, 1}, {2, 2, 2}, w), 0.8, 1e-15);
    const LossWeights w2{1.2, 0.2, 1.0};
    EXPECT_NEAR(combine_align({0.3, 0.7}, {1.5, 0.5}, w2), 2.0 * combine_align({0.3, 0.7}, {1.5, 0.5}, w), 1e-15);
}

TEST(Losses, ContrastivePairContract) {
    Fixture f;
    const SamplerPlan plan{4, 1.0, 4, -1};
    const IdConditioning id = f.adapter.condition(f.features);
    const ContrastivePair pair = run_contrastive_pair(f.model.denoiser, f.schedule, plan, f.prompt, nullptr, id, 1, 5);
    ASSERT_EQ(pair.taps_id.size(), 12U);
    ASSERT_EQ(pair.taps_no_id.size(), 12U);
    for (std::size_t i = 0; i < 12; ++i) {
        EXPECT_EQ(pair.taps_id[i].layer_id, pair.taps_no_id[i].layer_id);
        EXPECT_EQ(pair.taps_id[i].step_index, pair.taps_no_id[i].step_index);
    }
    Rng other(77);
    IdFeatures g{other.normal_tensor({1, 64}), other.normal_tensor({1, 64}), other.normal_tensor({1, 128})};
    const ContrastivePair pair2 =
        run_contrastive_pair(f.model.denoiser, f.schedule, plan, f.prompt, nullptr, f.adapter.condition(g), 1, 5);
    EXPECT_TRUE(bitwise_equal(pair.x0_no_id.value(), pair2.x0_no_id.value()));
    EXPECT_FALSE(bitwise_equal(pair.x0_id.value(), pair2.x0_id.value()));
}

TEST(Losses, DegeneratePairHasZeroAlignment) {
    Fixture f;
    const SamplerPlan plan{4, 1.0, 4, -1};
    const IdConditioning id = f.adapter.condition(f.features, 0.0);
    const ContrastivePair pair = run_contrastive_pair(f.model.denoiser, f.schedule, plan, f.prompt, nullptr, id, 1, 5);
    for (std::size_t i = 0; i < pair.taps_id.size(); ++i) {
        EXPECT_TRUE(bitwise_equal(pair.taps_id[i].queries.value(), pair.taps_no_id[i].queries.value()));
    }
    const AlignTerms terms = align_loss(pair, LossWeights{});
    EXPECT_EQ(terms.semantic.item(), 0.0);
    EXPECT_EQ(terms.layout.item(), 0.0);
    EXPECT_EQ(terms.total.item(), 0.0);
}

TEST(Losses, AlignLossMatchesPerTapOracle) {
    Fixture f;
    const SamplerPlan plan{4, 1.0, 4, -1};
    const IdConditioning id = f.adapter.condition(f.features, 3.0);
    const ContrastivePair pair = run_contrastive_pair(f.model.denoiser, f.schedule, plan, f.prompt, nullptr, id, 1, 5);
    const LossWeights w;
    const AlignTerms terms = align_loss(pair, w);
    double sem = 0.0, lay = 0.0;
    for (std::size_t i = 0; i < pair.taps_id.size(); ++i) {
        const auto k = batch_row(pair.taps_no_id[i].keys.value(), 0);
        const auto qt = batch_row(pair.taps_no_id[i].queries.value(), 0);
        const auto qid = batch_row(pair.taps_id[i].queries.value(), 0);
        const double s_full = oracle::semantic(k, qt, qid);
        sem += s_full;
        lay += oracle::layout(qt, qid);
        EXPECT_NEAR(terms.per_tap_semantic[i], s_full, 1e-10);
    }
    sem /= static_cast<double>(pair.taps_id.size());
    lay /= static_cast<double>(pair.taps_id.size());
    EXPECT_GT(lay, 0.0);
    EXPECT_NEAR(terms.total.item(), w.lambda_sem * sem + w.lambda_layout * lay, 1e-10);
    const AlignTerms doubled = align_loss(pair, LossWeights{1.2, 0.2, 1.0});
    EXPECT_NEAR(doubled.total.item(), 2.0 * terms.total.item(), 1e-12);
}

TEST(Losses, IdLossCosineCases) {
    Tensor e({1, 4}, {0.0, 1.0, 0.0, 0.0});
    Tensor neg({1, 4}, {0.0, -1.0, 0.0, 0.0});
    Tensor orth({1, 4}, {1.0, 0.0, 0.0, 0.0});
    EXPECT_NEAR(cosine_loss(constant(e), constant(e)).item(), 0.0, 1e-15);
    EXPECT_NEAR(cosine_loss(constant(e), constant(neg)).item(), 2.0, 1e-15);
    EXPECT_NEAR(cosine_loss(constant(e), constant(orth)).item(), 1.0, 1e-15);
}

TEST(Losses, AccurateIdLossOfTheReferenceIsZero) {
    Rng rng(4);
    const FaceEmbedder face(8, rng);
    const ImageSample s = render(random_identity(0, 1), neutral_scene());
    const Tensor img = s.image.reshaped({1, kImageSize, kImageSize, kChannels});
    const Tensor crop = identity_crop(s.image).reshaped({1, kCropSize, kCropSize, kChannels});
    const double l = id_loss_accurate(face, crop, constant(img)).item();
    EXPECT_NEAR(l, 0.0, 1e-12);
    const ImageSample other = render(random_identity(1, 1), neutral_scene());
    const double l2 = id_loss_accurate(face, crop, constant(other.image.reshaped(img.shape()))).item();
    EXPECT_GT(l2, 0.0);
    EXPECT_LE(l2, 2.0);
}

TEST(Losses, NaiveIdLossInvertsAtSmallT) {
    class Exact : public NoisePredictor {
    public:
        explicit Exact(Tensor eps) : eps_(std::move(eps)) {}
        Var predict(const Var&, const std::vector<int>&, const TextConditioning&, const IdConditioning*,
                    TapSink*) const override {
            return constant(eps_);
        }
        Tensor eps_;
    };
    const NoiseSchedule s = NoiseSchedule::linear();
    Rng rng(5);
    const FaceEmbedder face(8, rng);
    const ImageSample sample = render(random_identity(2, 3), neutral_scene());
    const Tensor x0 = sample.image.reshaped({1, kImageSize, kImageSize, kChannels});
    const Tensor crop = identity_crop(sample.image).reshaped({1, kCropSize, kCropSize, kChannels});
    DiffusionTerms terms;
    terms.eps = rng.normal_tensor(x0.shape());
    terms.t = {0};
    terms.x_t = q_sample(s, x0, terms.t, terms.eps);
    terms.eps_hat = constant(terms.eps);
    EXPECT_NEAR(id_loss_naive(face, s, terms, crop).item(), id_loss_accurate(face, crop, constant(x0)).item(), 1e-10);

    terms.t = {990};
    terms.x_t = q_sample(s, x0, terms.t, terms.eps);
    terms.eps_hat = constant(rng.normal_tensor(x0.shape()));
    const double l = id_loss_naive(face, s, terms, crop).item();
    EXPECT_TRUE(std::isfinite(l));
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 2.0);
}

TEST(Losses, FullObjectiveArithmetic) {
    const LossWeights w;
    auto s = [](double v) { return constant(Tensor({}, {v})); };
    EXPECT_NEAR(full_objective(s(1.0), s(0.5), s(0.2), w).item(), 1.7, 1e-15);
    EXPECT_EQ(full_objective(s(0.37), s(0.0), s(0.0), w).item(), 0.37);
    EXPECT_EQ(full_objective(s(0.37), Var(), Var(), w).item(), 0.37);
    const LossWeights no_id{0.6, 0.1, 0.0};
    EXPECT_NEAR(full_objective(s(1.0), s(0.5), s(123.0), no_id).item(), 1.5, 1e-15);
    EXPECT_THROW(full_objective(s(std::numeric_limits<double>::quiet_NaN()), s(0), s(0), w), NonFiniteError);
}

TEST(Losses, WeightsValidateNamesTheField) {
    LossWeights w;
    w.lambda_sem = -1.0;
    try {
        w.validate();
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.field(), "lambda_sem");
    }
    w = LossWeights{};
    w.lambda_id = std::numeric_limits<double>::infinity();
    EXPECT_THROW(w.validate(), ConfigError);
}

TEST(Losses, AlignGradientMatchesFiniteDifferences) {
    Fixture f;
    const ParamList params = f.adapter.parameters();
    set_trainable(params, true);
    const SamplerPlan plan{4, 1.0, 4, -1};
    const Var probe = params[1].var;
    const double err = testing::probe_grad_error(
        [&]() {
            const IdConditioning id = f.adapter.condition(f.features);
            const ContrastivePair pair =
                run_contrastive_pair(f.model.denoiser, f.schedule, plan, f.prompt, nullptr, id, 1, 8);
            return align_loss(pair, LossWeights{}).total;
        },
        probe, testing::spread_entries(probe.value().numel()));
    EXPECT_LE(err, 1e-4);
}

TEST(Losses, NaiveIdGradientMatchesFiniteDifferences) {
    Fixture f;
    Rng rng(9);
    const FaceEmbedder face(8, rng);
    const Dataset d = generate_dataset(2, 2, 4);
    std::vector<const Tensor*> ptrs{&d.samples[0].image, &d.samples[2].image};
    const Tensor x0 = stack_images(ptrs);
    const Tensor crops = crops_of(x0);
    IdFeatures feats{rng.normal_tensor({2, 64}), rng.normal_tensor({2, 64}), rng.normal_tensor({2, 128})};
    const TextConditioning text = f.model.text({d.samples[0].caption, d.samples[2].caption});
    const ParamList params = f.adapter.parameters();
    set_trainable(params, true);
    const Var probe = params.back().var;
    const double err = testing::probe_grad_error(
        [&]() {
            Rng r(31);
            const IdConditioning id = f.adapter.condition(feats);
            const DiffusionTerms terms = diffusion_loss(f.model.denoiser, f.schedule, text, &id, x0, r);
            return id_loss_naive(face, f.schedule, terms, crops);
        },
        probe, testing::spread_entries(probe.value().numel()));
    EXPECT_LE(err, 1e-4);
}

}  // namespace
}  // namespace idalign
