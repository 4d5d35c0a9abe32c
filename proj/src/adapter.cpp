// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/adapter.hpp"

#include "idalign/errors.hpp"

namespace idalign {

namespace {

Tensor gather_rows(const Tensor& t, const std::vector<int>& rows) {
    const int width = t.dim(1);
    Tensor out({static_cast<int>(rows.size()), width});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] >= 0 && rows[i] < t.dim(0), "select_features: row out of range");
        std::copy_n(t.data() + static_cast<std::size_t>(rows[i]) * width, width, out.data() + i * width);
    }
    return out;
}

}  // namespace

IdFeatures extract_id_features(const FaceEmbedder& face, const JointEncoder& joint, const Tensor& crops) {
    require(crops.rank() == 4 && crops.dim(1) == kCropSize && crops.dim(2) == kCropSize,
            "extract_id_features: expected [B, 16, 16, 3] crops");
    NoGradGuard guard;
    const int b = crops.dim(0);
    Var c = constant(crops);
    ImageTowerOutput tower = joint.image_tower(upsample2x(c));
    IdFeatures f;
    f.global = concat_lastdim(face.embed(c), tower.cls).value();
    f.local1 = adaptive_avg_pool(tower.fm1, 2).value().reshaped({b, 4 * tower.fm1.dim(3)});
    f.local2 = adaptive_avg_pool(tower.fm2, 2).value().reshaped({b, 4 * tower.fm2.dim(3)});
    return f;
}

IdFeatures select_features(const IdFeatures& f, const std::vector<int>& rows) {
    return {gather_rows(f.global, rows), gather_rows(f.local1, rows), gather_rows(f.local2, rows)};
}

IdAdapter::IdAdapter(const Denoiser& denoiser, std::uint64_t seed) {
    Rng rng(seed);
    global1_ = Linear(2 * kEmbedDim, kHidden, rng);
    global2_ = Linear(kHidden, kGlobalTokens * kTextDim, rng);
    local1a_ = Linear(64, kHidden, rng);
    local1b_ = Linear(kHidden, 2 * kTextDim, rng);
    local2a_ = Linear(128, kHidden, rng);
    local2b_ = Linear(kHidden, 3 * kTextDim, rng);
    for (int i = 0; i < kCrossAttnLayers; ++i) {
        const auto li = static_cast<std::size_t>(i);
        const CrossAttention& layer = denoiser.cross_attention(i);
        k_id_[li].weight = Var(layer.text_key_weight().value(), true);
        v_id_[li].weight = Var(layer.text_value_weight().value(), true);
    }
}

Var IdAdapter::tokens(const IdFeatures& f) const {
    const int b = f.batch();
    Var g = global2_(gelu(global1_(constant(f.global))));
    Var l1 = local1b_(gelu(local1a_(constant(f.local1))));
    Var l2 = local2b_(gelu(local2a_(constant(f.local2))));
    return reshape(concat_lastdim(concat_lastdim(g, l1), l2), {b, kIdTokens, kTextDim});
}

IdConditioning IdAdapter::condition(const Var& tokens, double weight) const {
    IdConditioning c;
    c.weight = weight;
    for (int i = 0; i < kCrossAttnLayers; ++i) {
        const auto li = static_cast<std::size_t>(i);
        c.keys.push_back(k_id_[li](tokens));
        c.values.push_back(v_id_[li](tokens));
    }
    return c;
}

ParamList IdAdapter::parameters() const {
    ParamList out;
    global1_.collect("adapter.global1", out);
    global2_.collect("adapter.global2", out);
    local1a_.collect("adapter.local1a", out);
    local1b_.collect("adapter.local1b", out);
    local2a_.collect("adapter.local2a", out);
    local2b_.collect("adapter.local2b", out);
    for (int i = 0; i < kCrossAttnLayers; ++i) {
        k_id_[static_cast<std::size_t>(i)].collect("adapter.k_id" + std::to_string(i), out);
    }
    for (int i = 0; i < kCrossAttnLayers; ++i) {
        v_id_[static_cast<std::size_t>(i)].collect("adapter.v_id" + std::to_string(i), out);
    }
    return out;
}

IdAdapter IdAdapter::clone() const {
    auto copy = [](const Linear& l) {
        Linear out;
        out.weight = Var(l.weight.value(), l.weight.requires_grad());
        if (l.bias.defined()) {
            out.bias = Var(l.bias.value(), l.bias.requires_grad());
        }
        return out;
    };
    IdAdapter c;
    c.global1_ = copy(global1_);
    c.global2_ = copy(global2_);
    c.local1a_ = copy(local1a_);
    c.local1b_ = copy(local1b_);
    c.local2a_ = copy(local2a_);
    c.local2b_ = copy(local2b_);
    for (std::size_t i = 0; i < k_id_.size(); ++i) {
        c.k_id_[i] = copy(k_id_[i]);
        c.v_id_[i] = copy(v_id_[i]);
    }
    return c;
}

Var encode_id(const IdAdapter& adapter, const FaceEmbedder& face, const JointEncoder& joint, const Tensor& crops) {
    return adapter.tokens(extract_id_features(face, joint, crops));
}

}  // namespace idalign
