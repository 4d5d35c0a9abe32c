// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Frozen substrate models: text encoder, conditional denoiser, face embedder
// and joint image-text encoder. All of them are trained once by the pretrain
// routines and then flagged frozen.

#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "idalign/nn.hpp"
#include "idalign/synthid.hpp"

namespace idalign {

inline constexpr int kTextDim = 32;
inline constexpr int kAttnDim = 32;
inline constexpr int kCrossAttnLayers = 3;
inline constexpr int kEmbedDim = 32;

/// Encoded captions plus the [B, L] key mask (1 = real token).
struct TextConditioning {
    Var features;  // [B, L, 32]
    Tensor key_mask;

    int batch() const { return features.dim(0); }
};

/// ID keys and values already projected for each cross-attention layer.
struct IdConditioning {
    std::vector<Var> keys;    // per layer, [B, n_tokens, 32]
    std::vector<Var> values;  // per layer, [B, n_tokens, 32]
    double weight = 1.0;

    bool active() const { return !keys.empty() && weight != 0.0; }
};

struct AttentionTap {
    int layer_id = 0;
    int step_index = 0;
    Var keys;     // text keys of this layer, [B, L, d]
    Var queries;  // projected image features, [B, N, d]
    Tensor attention;  // text attention probabilities, [B, N, L]
};

/// Collects taps for one forward or sampling call.
struct TapSink {
    int step_index = 0;
    std::vector<AttentionTap> records;
};

class TextEncoder {
public:
    TextEncoder() = default;
    explicit TextEncoder(Rng& rng);

    TextConditioning operator()(const std::vector<CaptionTokens>& captions) const;
    void collect(const std::string& prefix, ParamList& out) const;

private:
    Var token_table_;
    Var position_table_;
    LayerNorm ln_attn_;
    Linear wq_, wk_, wv_, wo_;
    LayerNorm ln_ff_;
    Linear ff1_, ff2_;
    LayerNorm ln_out_;
};

/// Any epsilon predictor; lets tests substitute closed-form stubs.
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    virtual Var predict(const Var& x_t, const std::vector<int>& t, const TextConditioning& text,
                        const IdConditioning* id, TapSink* taps) const = 0;
};

class CrossAttention {
public:
    CrossAttention() = default;
    CrossAttention(int layer_id, int channels, Rng& rng);

    /// x: [B, H, W, C]; returns x + W_O (Attn_txt + w * Attn_id).
    Var operator()(const Var& x, const TextConditioning& text, const IdConditioning* id, TapSink* taps) const;
    void collect(const std::string& prefix, ParamList& out) const;

    const Var& text_key_weight() const { return wk_.weight; }
    const Var& text_value_weight() const { return wv_.weight; }

private:
    int layer_id_ = 0;
    LayerNorm norm_;
    Linear wq_, wk_, wv_, wo_;
};

class ResBlock {
public:
    ResBlock() = default;
    ResBlock(int channels, int time_dim, Rng& rng);
    Var operator()(const Var& x, const Var& temb) const;
    void collect(const std::string& prefix, ParamList& out) const;

private:
    LayerNorm ln1_, ln2_;
    Conv2d conv1_, conv2_;
    Linear time_proj_;
};

class Denoiser : public NoisePredictor {
public:
    static constexpr int kTimeDim = 64;

    Denoiser() = default;
    explicit Denoiser(Rng& rng);

    Var predict(const Var& x_t, const std::vector<int>& t, const TextConditioning& text, const IdConditioning* id,
                TapSink* taps) const override;
    void collect(const std::string& prefix, ParamList& out) const;

    const CrossAttention& cross_attention(int layer) const { return xattn_.at(static_cast<std::size_t>(layer)); }
    /// Spatial positions seen by each cross-attention layer.
    static constexpr std::array<int, kCrossAttnLayers> kLayerPositions{256, 64, 256};

private:
    Linear time1_, time2_;
    Conv2d stem_;
    Conv2d down1_, down2_;
    ResBlock res1_, res2_, res_mid_, res3_;
    Conv2d up1_, up2_;
    LayerNorm out_norm_;
    Conv2d out_conv_;
    std::array<CrossAttention, kCrossAttnLayers> xattn_;
};

/// Sinusoidal timestep features [B, dim].
Tensor timestep_features(const std::vector<int>& t, int dim);

/// Conv net over identity crops [B, 16, 16, 3] -> unit vectors [B, 32].
class FaceEmbedder {
public:
    FaceEmbedder() = default;
    FaceEmbedder(int width, Rng& rng);

    Var embed(const Var& crops) const;
    /// Cosine classifier logits against a [n_classes, 32] prototype table.
    Var logits(const Var& embeddings, const Var& prototypes) const;
    void collect(const std::string& prefix, ParamList& out) const;
    int width() const { return width_; }

private:
    int width_ = 0;
    Conv2d c1_, c2_, c3_;
    Linear head_;
};

struct ImageTowerOutput {
    Var fm1;     // [B, 16, 16, 16]
    Var fm2;     // [B, 8, 8, 32]
    Var cls;     // [B, 32] pre-projection features
    Var embedding;  // [B, 32] unit
};

class JointEncoder {
public:
    static constexpr double kTemperature = 0.07;

    JointEncoder() = default;
    explicit JointEncoder(Rng& rng);

    /// images: [B, 32, 32, 3]
    ImageTowerOutput image_tower(const Var& images) const;
    Var embed_images(const Var& images) const { return image_tower(images).embedding; }
    Var embed_text(const std::vector<CaptionTokens>& captions) const;
    void collect(const std::string& prefix, ParamList& out) const;

private:
    Conv2d c1_, c2_, c3_;
    Linear cls_, img_proj_;
    TextEncoder text_;
    Linear txt_proj_;
};

/// Symmetric in-batch InfoNCE over unit embeddings [B, D].
Var info_nce(const Var& image_emb, const Var& text_emb, double temperature);

/// Frozen base bundle used by every later stage.
struct BaseModel {
    TextEncoder text;
    Denoiser denoiser;

    explicit BaseModel(std::uint64_t seed);
    ParamList parameters() const;
};

}  // namespace idalign
