// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Procedural identity-sprite world: faces drawn from an 8-parameter identity,
// placed in a scene (background, style, accessory, orientation) and captioned
// from a fixed word template.
//
// Image geometry: 32x32x3, values in [-1, 1]. The identity region is the
// central 16x16 crop (rows/cols 8..23); nothing scene-dependent is drawn there.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "idalign/tensor.hpp"

namespace idalign {

inline constexpr int kImageSize = 32;
inline constexpr int kChannels = 3;
inline constexpr int kCropSize = 16;
inline constexpr int kCropOrigin = 8;
inline constexpr int kVocabSize = 48;
inline constexpr int kCaptionLength = 8;
inline constexpr int kHueBins = 8;
inline constexpr int kPadToken = 0;
inline constexpr double kHeldOutFraction = 0.2;

enum class IdentityParam : int {
    face_hue = 0,
    face_radius,
    eye_spacing,
    eye_size,
    mouth_curvature,
    hair_hue,
    skin_tone,
    brow_angle,
};
inline constexpr int kIdentityParams = 8;

struct IdentitySpec {
    int id_index = 0;
    std::array<double, kIdentityParams> params{};

    double operator[](IdentityParam p) const { return params[static_cast<int>(p)]; }
    bool operator==(const IdentitySpec&) const = default;
};

enum class Style : int { flat = 0, outline, textured };
enum class Accessory : int { none = 0, glasses, hat };
enum class Orientation : int { front = 0, left, right };

struct SceneSpec {
    /// Always a bin center (k + 0.5) / 8 once constructed through make().
    double background_hue = 0.5 / kHueBins;
    Style style = Style::flat;
    Accessory accessory = Accessory::none;
    Orientation orientation = Orientation::front;

    static SceneSpec make(int hue_bin, Style style, Accessory accessory, Orientation orientation);
    int hue_bin() const;
    bool operator==(const SceneSpec&) const = default;
};

/// Every scene in the finite scene space, in a fixed order.
std::vector<SceneSpec> all_scenes();
/// flat / front / no accessory, hue bin 0: the caption used for identity losses and Face Sim.
SceneSpec neutral_scene();

enum class Attribute : int { smiling = 0, frowning, big_eyes, small_eyes };

using CaptionTokens = std::array<int, kCaptionLength>;

struct ImageSample {
    Tensor image;  // [32, 32, 3]
    IdentitySpec identity;
    SceneSpec scene;
    CaptionTokens caption{};
};

void validate(const IdentitySpec& identity);

/// Renders the sprite. Pure: equal inputs give bit-identical images.
ImageSample render(const IdentitySpec& identity, const SceneSpec& scene);

/// Coarse identity attributes that captions may mention.
std::vector<Attribute> attributes_of(const IdentitySpec& identity);

/// Template: style, background, accessory, orientation, then up to two
/// attribute words, PAD-filled to length 8.
CaptionTokens caption_of(const SceneSpec& scene, const std::vector<Attribute>& attributes = {});
CaptionTokens empty_caption();

struct ParsedCaption {
    SceneSpec scene;
    std::vector<Attribute> attributes;
};
/// Inverse of caption_of; nullopt if the tokens do not follow the template.
std::optional<ParsedCaption> parse_caption(const CaptionTokens& tokens);

std::string_view token_word(int token);
std::optional<int> token_from_word(std::string_view word);
std::string caption_text(const CaptionTokens& tokens);

/// Central identity crop of a single image [32,32,3] -> [16,16,3].
Tensor identity_crop(const Tensor& image);
/// Horizontal mirror of a [H, W, C] image.
Tensor mirror_image(const Tensor& image);

IdentitySpec random_identity(int id_index, std::uint64_t seed);

struct Dataset {
    std::vector<ImageSample> samples;
    std::vector<int> train_ids;
    std::vector<int> heldout_ids;
    std::uint64_t seed = 0;
    int scenes_per_identity = 0;

    bool is_heldout(int id_index) const;
    std::vector<std::size_t> indices_for(bool heldout) const;
    /// First sample of the given identity.
    const ImageSample& sample_of(int id_index) const;
};

/// Generates n_identities x scenes_per_identity samples; 20% of identities
/// (rounded) are held out. Images are stored at float32 precision.
Dataset generate_dataset(int n_identities, int scenes_per_identity, std::uint64_t seed);

/// Writes manifest.jsonl and images.f32 into dir (created if needed).
void write_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// Stacks images into a [B, 32, 32, 3] batch.
Tensor stack_images(const std::vector<const Tensor*>& images);

}  // namespace idalign
