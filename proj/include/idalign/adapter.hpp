// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Trainable identity adapter: maps an identity crop to 10 conditioning tokens
// (5 global, 5 local) and owns the per-layer ID key/value projections.

#pragma once

#include <array>
#include <cstdint>

#include "idalign/backbones.hpp"

namespace idalign {

inline constexpr int kGlobalTokens = 5;
inline constexpr int kLocalTokens = 5;
inline constexpr int kIdTokens = kGlobalTokens + kLocalTokens;

/// Frozen backbone features of a batch of identity crops.
struct IdFeatures {
    Tensor global;  // [B, 64]: face embedding ++ joint cls features
    Tensor local1;  // [B, 64]: first tower map pooled to 2x2
    Tensor local2;  // [B, 128]: second tower map pooled to 2x2

    int batch() const { return global.dim(0); }
};

/// crops: [B, 16, 16, 3]. Computed without recording a graph.
IdFeatures extract_id_features(const FaceEmbedder& face, const JointEncoder& joint, const Tensor& crops);
/// Gathers rows of a feature batch.
IdFeatures select_features(const IdFeatures& f, const std::vector<int>& rows);

class IdAdapter {
public:
    static constexpr int kHidden = 64;

    IdAdapter() = default;
    /// K_id / V_id start as copies of the denoiser's text projections.
    IdAdapter(const Denoiser& denoiser, std::uint64_t seed);

    /// [B, 10, 32]; rows 0-4 global, 5-9 local.
    Var tokens(const IdFeatures& features) const;
    IdConditioning condition(const Var& tokens, double weight = 1.0) const;
    IdConditioning condition(const IdFeatures& features, double weight = 1.0) const {
        return condition(tokens(features), weight);
    }

    /// Census order: global head, local heads, k_id per layer, v_id per layer.
    ParamList parameters() const;
    /// Independent copy with its own parameter storage.
    IdAdapter clone() const;

private:
    Linear global1_, global2_;
    Linear local1a_, local1b_;
    Linear local2a_, local2b_;
    std::array<Linear, kCrossAttnLayers> k_id_;
    std::array<Linear, kCrossAttnLayers> v_id_;
};

/// Convenience: features + tokens for a batch of identity crops.
Var encode_id(const IdAdapter& adapter, const FaceEmbedder& face, const JointEncoder& joint, const Tensor& crops);

}  // namespace idalign
