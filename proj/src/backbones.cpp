// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/backbones.hpp"

#include <cmath>

#include "idalign/errors.hpp"

namespace idalign {

namespace {

constexpr double kAttnScale = 0.17677669529663687;  // 1 / sqrt(32)

Tensor caption_mask(const std::vector<CaptionTokens>& captions) {
    const int b = static_cast<int>(captions.size());
    Tensor mask({b, kCaptionLength});
    for (int i = 0; i < b; ++i) {
        for (int j = 0; j < kCaptionLength; ++j) {
            mask[static_cast<std::size_t>(i) * kCaptionLength + j] = captions[i][j] != kPadToken ? 1.0 : 0.0;
        }
    }
    return mask;
}

/// Attention of queries [B, N, d] over keys/values [B, L, d].
Var attend(const Var& q, const Var& k, const Var& v, const Tensor* mask, Tensor* probs_out) {
    Var probs = softmax_lastdim(scale(bmm(q, k, true), kAttnScale), mask);
    if (probs_out != nullptr) {
        *probs_out = probs.value();
    }
    return bmm(probs, v);
}

}  // namespace

// --- TextEncoder -------------------------------------------------------------------

TextEncoder::TextEncoder(Rng& rng)
    : token_table_(rng.normal_tensor({kVocabSize, kTextDim}, 0.5), true),
      position_table_(rng.normal_tensor({kCaptionLength, kTextDim}, 0.1), true),
      ln_attn_(kTextDim),
      wq_(kTextDim, kTextDim, rng, false),
      wk_(kTextDim, kTextDim, rng, false),
      wv_(kTextDim, kTextDim, rng, false),
      wo_(kTextDim, kTextDim, rng, true, 0.5),
      ln_ff_(kTextDim),
      ff1_(kTextDim, 2 * kTextDim, rng),
      ff2_(2 * kTextDim, kTextDim, rng, true, 0.5),
      ln_out_(kTextDim) {}

TextConditioning TextEncoder::operator()(const std::vector<CaptionTokens>& captions) const {
    require(!captions.empty(), "TextEncoder: empty caption batch");
    const int b = static_cast<int>(captions.size());
    std::vector<int> tokens;
    std::vector<int> positions;
    tokens.reserve(static_cast<std::size_t>(b) * kCaptionLength);
    for (const auto& c : captions) {
        for (int j = 0; j < kCaptionLength; ++j) {
            require(c[j] >= 0 && c[j] < kVocabSize, "TextEncoder: token out of range");
            tokens.push_back(c[j]);
            positions.push_back(j);
        }
    }
    TextConditioning out;
    out.key_mask = caption_mask(captions);
    Var h = add(embedding(token_table_, tokens, b, kCaptionLength),
                embedding(position_table_, positions, b, kCaptionLength));
    Var n = ln_attn_(h);
    h = add(h, wo_(attend(wq_(n), wk_(n), wv_(n), &out.key_mask, nullptr)));
    h = add(h, ff2_(gelu(ff1_(ln_ff_(h)))));
    out.features = ln_out_(h);
    return out;
}

void TextEncoder::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".token_table", token_table_});
    out.push_back({prefix + ".position_table", position_table_});
    ln_attn_.collect(prefix + ".ln_attn", out);
    wq_.collect(prefix + ".wq", out);
    wk_.collect(prefix + ".wk", out);
    wv_.collect(prefix + ".wv", out);
    wo_.collect(prefix + ".wo", out);
    ln_ff_.collect(prefix + ".ln_ff", out);
    ff1_.collect(prefix + ".ff1", out);
    ff2_.collect(prefix + ".ff2", out);
    ln_out_.collect(prefix + ".ln_out", out);
}

// --- CrossAttention ------------------------------------------------------------------

CrossAttention::CrossAttention(int layer_id, int channels, Rng& rng)
    : layer_id_(layer_id),
      norm_(channels),
      wq_(channels, kAttnDim, rng, false),
      wk_(kTextDim, kAttnDim, rng, false),
      wv_(kTextDim, kAttnDim, rng, false),
      wo_(kAttnDim, channels, rng, true, 0.5) {}

Var CrossAttention::operator()(const Var& x, const TextConditioning& text, const IdConditioning* id,
                               TapSink* taps) const {
    require(x.value().rank() == 4, "CrossAttention: expected [B, H, W, C]");
    const int b = x.dim(0);
    const int n = x.dim(1) * x.dim(2);
    const int c = x.dim(3);
    require(text.batch() == b, "CrossAttention: text batch " + std::to_string(text.batch()) +
                                   " does not match image batch " + std::to_string(b));
    Var q = wq_(reshape(norm_(x), {b, n, c}));
    Var k = wk_(text.features);
    Var v = wv_(text.features);
    Tensor probs;
    Var o = attend(q, k, v, &text.key_mask, taps ? &probs : nullptr);
    if (id != nullptr && id->active()) {
        const auto li = static_cast<std::size_t>(layer_id_);
        require(li < id->keys.size() && li < id->values.size(), "CrossAttention: missing ID projections");
        require(id->keys[li].dim(0) == b, "CrossAttention: ID batch mismatch");
        o = axpby(o, 1.0, attend(q, id->keys[li], id->values[li], nullptr, nullptr), id->weight);
    }
    if (taps != nullptr) {
        taps->records.push_back({layer_id_, taps->step_index, k, q, std::move(probs)});
    }
    return add(x, reshape(wo_(o), x.shape()));
}

void CrossAttention::collect(const std::string& prefix, ParamList& out) const {
    norm_.collect(prefix + ".norm", out);
    wq_.collect(prefix + ".wq", out);
    wk_.collect(prefix + ".wk", out);
    wv_.collect(prefix + ".wv", out);
    wo_.collect(prefix + ".wo", out);
}

// --- Denoiser -------------------------------------------------------------------------

ResBlock::ResBlock(int channels, int time_dim, Rng& rng)
    : ln1_(channels),
      ln2_(channels),
      conv1_(channels, channels, 3, 1, 1, rng),
      conv2_(channels, channels, 3, 1, 1, rng, 0.3),
      time_proj_(time_dim, channels, rng) {}

Var ResBlock::operator()(const Var& x, const Var& temb) const {
    Var h = conv1_(silu(ln1_(x)));
    h = add_per_sample(h, time_proj_(temb));
    h = conv2_(silu(ln2_(h)));
    return add(x, h);
}

void ResBlock::collect(const std::string& prefix, ParamList& out) const {
    ln1_.collect(prefix + ".ln1", out);
    ln2_.collect(prefix + ".ln2", out);
    conv1_.collect(prefix + ".conv1", out);
    conv2_.collect(prefix + ".conv2", out);
    time_proj_.collect(prefix + ".time_proj", out);
}

Tensor timestep_features(const std::vector<int>& t, int dim) {
    const int b = static_cast<int>(t.size());
    const int half = dim / 2;
    Tensor out({b, dim});
    for (int i = 0; i < b; ++i) {
        for (int j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * j / half);
            const double a = t[i] * freq;
            out[static_cast<std::size_t>(i) * dim + j] = std::sin(a);
            out[static_cast<std::size_t>(i) * dim + half + j] = std::cos(a);
        }
    }
    return out;
}

Denoiser::Denoiser(Rng& rng)
    : time1_(32, kTimeDim, rng),
      time2_(kTimeDim, kTimeDim, rng),
      stem_(kChannels, 32, 3, 1, 1, rng),
      down1_(32, 32, 3, 2, 1, rng),
      down2_(32, 64, 3, 2, 1, rng),
      res1_(32, kTimeDim, rng),
      res2_(64, kTimeDim, rng),
      res_mid_(64, kTimeDim, rng),
      res3_(32, kTimeDim, rng),
      up1_(96, 32, 3, 1, 1, rng),
      up2_(64, 32, 3, 1, 1, rng),
      out_norm_(32),
      out_conv_(32, kChannels, 3, 1, 1, rng, 0.1),
      xattn_{CrossAttention(0, 32, rng), CrossAttention(1, 64, rng), CrossAttention(2, 32, rng)} {}

Var Denoiser::predict(const Var& x_t, const std::vector<int>& t, const TextConditioning& text,
                      const IdConditioning* id, TapSink* taps) const {
    require(x_t.value().rank() == 4 && x_t.dim(1) == kImageSize && x_t.dim(2) == kImageSize &&
                x_t.dim(3) == kChannels,
            "Denoiser: expected [B, 32, 32, 3], got " + shape_str(x_t.shape()));
    require(static_cast<int>(t.size()) == x_t.dim(0), "Denoiser: timestep count does not match batch");
    Var temb = time2_(silu(time1_(constant(timestep_features(t, 32)))));
    Var h0 = stem_(x_t);                                   // 32x32x32
    Var h1 = xattn_[0](res1_(down1_(h0), temb), text, id, taps);  // 16x16x32
    Var h2 = xattn_[1](res2_(down2_(silu(h1)), temb), text, id, taps);  // 8x8x64
    h2 = res_mid_(h2, temb);
    Var u1 = up1_(concat_lastdim(upsample2x(h2), h1));    // 16x16x32
    u1 = xattn_[2](res3_(u1, temb), text, id, taps);
    Var u2 = up2_(concat_lastdim(upsample2x(u1), h0));    // 32x32x32
    return out_conv_(silu(out_norm_(u2)));
}

void Denoiser::collect(const std::string& prefix, ParamList& out) const {
    time1_.collect(prefix + ".time1", out);
    time2_.collect(prefix + ".time2", out);
    stem_.collect(prefix + ".stem", out);
    down1_.collect(prefix + ".down1", out);
    down2_.collect(prefix + ".down2", out);
    res1_.collect(prefix + ".res1", out);
    res2_.collect(prefix + ".res2", out);
    res_mid_.collect(prefix + ".res_mid", out);
    res3_.collect(prefix + ".res3", out);
    up1_.collect(prefix + ".up1", out);
    up2_.collect(prefix + ".up2", out);
    out_norm_.collect(prefix + ".out_norm", out);
    out_conv_.collect(prefix + ".out_conv", out);
    for (int i = 0; i < kCrossAttnLayers; ++i) {
        xattn_[static_cast<std::size_t>(i)].collect(prefix + ".xattn" + std::to_string(i), out);
    }
}

// --- FaceEmbedder ----------------------------------------------------------------------

FaceEmbedder::FaceEmbedder(int width, Rng& rng)
    : width_(width),
      c1_(kChannels, width, 3, 1, 1, rng),
      c2_(width, 2 * width, 3, 2, 1, rng),
      c3_(2 * width, 2 * width, 3, 2, 1, rng),
      head_(16 * 2 * width, kEmbedDim, rng) {
    require(width > 0, "FaceEmbedder: width must be positive");
}

Var FaceEmbedder::embed(const Var& crops) const {
    require(crops.value().rank() == 4 && crops.dim(1) == kCropSize && crops.dim(2) == kCropSize,
            "FaceEmbedder: expected [B, 16, 16, 3], got " + shape_str(crops.shape()));
    const int b = crops.dim(0);
    Var h = silu(c3_(silu(c2_(silu(c1_(crops))))));
    return l2_normalize_lastdim(head_(reshape(h, {b, 16 * 2 * width_})));
}

Var FaceEmbedder::logits(const Var& embeddings, const Var& prototypes) const {
    const int b = embeddings.dim(0);
    const int n = prototypes.dim(0);
    Var p = l2_normalize_lastdim(prototypes);
    Var s = bmm(reshape(embeddings, {1, b, kEmbedDim}), reshape(p, {1, n, kEmbedDim}), true);
    return scale(reshape(s, {b, n}), 10.0);
}

void FaceEmbedder::collect(const std::string& prefix, ParamList& out) const {
    c1_.collect(prefix + ".c1", out);
    c2_.collect(prefix + ".c2", out);
    c3_.collect(prefix + ".c3", out);
    head_.collect(prefix + ".head", out);
}

// --- JointEncoder ----------------------------------------------------------------------

JointEncoder::JointEncoder(Rng& rng)
    : c1_(kChannels, 16, 3, 2, 1, rng),
      c2_(16, 32, 3, 2, 1, rng),
      c3_(32, 32, 3, 2, 1, rng),
      cls_(512, kEmbedDim, rng),
      img_proj_(kEmbedDim, kEmbedDim, rng),
      text_(rng),
      txt_proj_(kTextDim, kEmbedDim, rng) {}

ImageTowerOutput JointEncoder::image_tower(const Var& images) const {
    require(images.value().rank() == 4 && images.dim(1) == kImageSize && images.dim(2) == kImageSize,
            "JointEncoder: expected [B, 32, 32, 3], got " + shape_str(images.shape()));
    const int b = images.dim(0);
    ImageTowerOutput out;
    out.fm1 = silu(c1_(images));
    out.fm2 = silu(c2_(out.fm1));
    Var h = silu(c3_(out.fm2));
    out.cls = cls_(reshape(h, {b, 512}));
    out.embedding = l2_normalize_lastdim(img_proj_(silu(out.cls)));
    return out;
}

Var JointEncoder::embed_text(const std::vector<CaptionTokens>& captions) const {
    TextConditioning t = text_(captions);
    const int b = t.batch();
    Tensor weights({b, 1, kCaptionLength});
    for (int i = 0; i < b; ++i) {
        double count = 0.0;
        for (int j = 0; j < kCaptionLength; ++j) {
            count += t.key_mask[static_cast<std::size_t>(i) * kCaptionLength + j];
        }
        for (int j = 0; j < kCaptionLength; ++j) {
            const double m = t.key_mask[static_cast<std::size_t>(i) * kCaptionLength + j];
            weights[static_cast<std::size_t>(i) * kCaptionLength + j] =
                count > 0.0 ? m / count : 1.0 / kCaptionLength;
        }
    }
    Var pooled = reshape(bmm(constant(std::move(weights)), t.features), {b, kTextDim});
    return l2_normalize_lastdim(txt_proj_(pooled));
}

void JointEncoder::collect(const std::string& prefix, ParamList& out) const {
    c1_.collect(prefix + ".c1", out);
    c2_.collect(prefix + ".c2", out);
    c3_.collect(prefix + ".c3", out);
    cls_.collect(prefix + ".cls", out);
    img_proj_.collect(prefix + ".img_proj", out);
    text_.collect(prefix + ".text", out);
    txt_proj_.collect(prefix + ".txt_proj", out);
}

Var info_nce(const Var& image_emb, const Var& text_emb, double temperature) {
    require(image_emb.shape() == text_emb.shape() && image_emb.value().rank() == 2,
            "info_nce: embeddings must be matching [B, D]");
    const int b = image_emb.dim(0);
    const int d = image_emb.dim(1);
    Var sim = scale(reshape(bmm(reshape(image_emb, {1, b, d}), reshape(text_emb, {1, b, d}), true), {b, b}),
                    1.0 / temperature);
    Var sim_t = scale(reshape(bmm(reshape(text_emb, {1, b, d}), reshape(image_emb, {1, b, d}), true), {b, b}),
                      1.0 / temperature);
    std::vector<int> labels(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
        labels[static_cast<std::size_t>(i)] = i;
    }
    return scale(add(cross_entropy(sim, labels), cross_entropy(sim_t, labels)), 0.5);
}

BaseModel::BaseModel(std::uint64_t seed) {
    Rng rng(seed);
    text = TextEncoder(rng);
    denoiser = Denoiser(rng);
}

ParamList BaseModel::parameters() const {
    ParamList out;
    text.collect("text", out);
    denoiser.collect("denoiser", out);
    return out;
}

}  // namespace idalign
