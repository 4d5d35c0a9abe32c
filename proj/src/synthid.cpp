// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/synthid.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "idalign/errors.hpp"

namespace idalign {

namespace {

using Rgb = std::array<double, 3>;

constexpr int kStyleToken0 = 1;
constexpr int kHueToken0 = 4;
constexpr int kAccessoryToken0 = 12;
constexpr int kOrientationToken0 = 15;
constexpr int kAttributeToken0 = 18;
constexpr int kFirstReserved = 22;

constexpr std::array<std::string_view, kFirstReserved> kWords = {
    "<pad>",   "flat",     "outline",  "textured", "bg-red",   "bg-orange", "bg-yellow", "bg-green",
    "bg-teal", "bg-blue",  "bg-violet", "bg-pink", "bare",     "glasses",   "hat",       "front",
    "left",    "right",    "smiling",  "frowning", "big-eyes", "small-eyes",
};

Rgb hsv(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    Rgb rgb{};
    switch (static_cast<int>(hp) % 6) {
        case 0: rgb = {c, x, 0}; break;
        case 1: rgb = {x, c, 0}; break;
        case 2: rgb = {0, c, x}; break;
        case 3: rgb = {0, x, c}; break;
        case 4: rgb = {x, 0, c}; break;
        default: rgb = {c, 0, x}; break;
    }
    const double m = v - c;
    return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

class Canvas {
public:
    Canvas() : px_(kImageSize * kImageSize) {}
    Rgb& at(int y, int x) { return px_[static_cast<std::size_t>(y) * kImageSize + x]; }
    void blend(int y, int x, const Rgb& c, double alpha) {
        Rgb& p = at(y, x);
        for (int k = 0; k < 3; ++k) {
            p[k] = (1.0 - alpha) * p[k] + alpha * c[k];
        }
    }
    Tensor to_tensor() const {
        Tensor t({kImageSize, kImageSize, kChannels});
        for (std::size_t i = 0; i < px_.size(); ++i) {
            for (int k = 0; k < 3; ++k) {
                t[i * 3 + k] = std::clamp(2.0 * px_[i][k] - 1.0, -1.0, 1.0);
            }
        }
        return t;
    }

private:
    std::vector<Rgb> px_;
};

// Coverage of a crop pixel by a shape, estimated on a 4x4 subpixel grid.
template <class Inside>
double coverage(int py, int px, Inside&& inside) {
    int hits = 0;
    for (int sy = 0; sy < 4; ++sy) {
        for (int sx = 0; sx < 4; ++sx) {
            const double v = py + (sy + 0.5) / 4.0;
            const double u = px + (sx + 0.5) / 4.0;
            hits += inside(u, v) ? 1 : 0;
        }
    }
    return hits / 16.0;
}

// Draws the identity region for a front (shift = 0) or left-facing face.
void draw_identity(Canvas& canvas, const IdentitySpec& id, double shift) {
    const Rgb hair = hsv(id[IdentityParam::hair_hue], 0.75, 0.6);
    const Rgb brow = {hair[0] * 0.45, hair[1] * 0.45, hair[2] * 0.45};
    const Rgb face = hsv(0.02 + 0.12 * id[IdentityParam::face_hue], 0.35 + 0.25 * id[IdentityParam::face_hue],
                         0.35 + 0.6 * id[IdentityParam::skin_tone]);
    const Rgb eye = {0.06, 0.06, 0.1};
    const Rgb mouth = {0.55, 0.08, 0.12};

    const double cx = 8.0 + 0.4 * shift;
    const double cy = 8.5;
    const double r = 4.5 + 2.5 * id[IdentityParam::face_radius];
    const double fx = cx + shift;
    const double spacing = 1.6 + 1.6 * id[IdentityParam::eye_spacing];
    const double ey = cy - 1.2;
    const double er = 0.55 + 0.75 * id[IdentityParam::eye_size];
    const double slope = (id[IdentityParam::brow_angle] - 0.5) * 1.2;
    const double k = (id[IdentityParam::mouth_curvature] - 0.5) * 0.5;
    const double my = cy + 2.6;

    auto in_face = [&](double u, double v) { return (u - cx) * (u - cx) + (v - cy) * (v - cy) <= r * r; };
    auto in_eye = [&](double u, double v) {
        for (double side : {-1.0, 1.0}) {
            const double ex = fx + side * spacing;
            if ((u - ex) * (u - ex) + (v - ey) * (v - ey) <= er * er) {
                return true;
            }
        }
        return false;
    };
    auto in_brow = [&](double u, double v) {
        for (double side : {-1.0, 1.0}) {
            const double bx = fx + side * spacing;
            const double by = ey - er - 1.0;
            const double du = u - bx;
            if (std::abs(du) <= 1.3 && std::abs(v - (by + side * slope * du)) <= 0.45) {
                return true;
            }
        }
        return false;
    };
    auto in_mouth = [&](double u, double v) {
        const double du = u - fx;
        return std::abs(du) <= 2.2 && std::abs(v - (my - k * du * du)) <= 0.5;
    };

    for (int y = 0; y < kCropSize; ++y) {
        for (int x = 0; x < kCropSize; ++x) {
            const int iy = kCropOrigin + y;
            const int ix = kCropOrigin + x;
            canvas.at(iy, ix) = hair;
            canvas.blend(iy, ix, face, coverage(y, x, in_face));
            canvas.blend(iy, ix, brow, coverage(y, x, in_brow));
            canvas.blend(iy, ix, eye, coverage(y, x, in_eye));
            canvas.blend(iy, ix, mouth, coverage(y, x, in_mouth));
        }
    }
}

bool in_crop(int y, int x) {
    return y >= kCropOrigin && y < kCropOrigin + kCropSize && x >= kCropOrigin && x < kCropOrigin + kCropSize;
}

void draw_scene(Canvas& canvas, const SceneSpec& scene) {
    const Rgb bg = hsv(scene.background_hue, 0.5, 0.75);
    for (int y = 0; y < kImageSize; ++y) {
        for (int x = 0; x < kImageSize; ++x) {
            Rgb c = bg;
            if (scene.style == Style::textured) {
                const double f = ((x + y) / 3) % 2 == 0 ? 1.2 : 0.7;
                for (double& ch : c) {
                    ch = std::clamp(ch * f, 0.0, 1.0);
                }
            }
            canvas.at(y, x) = c;
        }
    }
    // Shoulders are identical for every identity and scene.
    for (int y = 25; y < kImageSize; ++y) {
        const int half = 6 + (y - 25);
        for (int x = 16 - half; x < 16 + half; ++x) {
            if (x >= 0 && x < kImageSize) {
                canvas.at(y, x) = {0.5, 0.5, 0.55};
            }
        }
    }
    if (scene.accessory == Accessory::hat) {
        for (int y = 2; y < 7; ++y) {
            for (int x = 10; x < 22; ++x) {
                canvas.at(y, x) = {0.15, 0.15, 0.45};
            }
        }
        for (int x = 6; x < 26; ++x) {
            canvas.at(7, x) = {0.1, 0.1, 0.3};
        }
    } else if (scene.accessory == Accessory::glasses) {
        for (int x = 1; x < 8; ++x) {
            canvas.at(14, x) = {0.05, 0.05, 0.05};
            canvas.at(14, kImageSize - 1 - x) = {0.05, 0.05, 0.05};
        }
        for (int y = 12; y < 17; ++y) {
            for (int x = 4; x < 7; ++x) {
                canvas.at(y, x) = {0.85, 0.9, 0.95};
                canvas.at(y, kImageSize - 1 - x) = {0.85, 0.9, 0.95};
            }
        }
    }
    if (scene.style == Style::outline) {
        for (int y = 0; y < kImageSize; ++y) {
            for (int x = 0; x < kImageSize; ++x) {
                const bool border = y < 2 || x < 2 || y >= kImageSize - 2 || x >= kImageSize - 2;
                const bool ring = !in_crop(y, x) && y >= kCropOrigin - 1 && y <= kCropOrigin + kCropSize &&
                                  x >= kCropOrigin - 1 && x <= kCropOrigin + kCropSize;
                if (border || ring) {
                    canvas.at(y, x) = {0.08, 0.08, 0.08};
                }
            }
        }
    }
}

float to_f32(double v) { return static_cast<float>(v); }

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    require(is.good(), "images.f32: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

constexpr char kArchiveMagic[8] = {'I', 'D', 'A', 'F', '3', '2', '\0', '\0'};
constexpr std::uint32_t kArchiveVersion = 1;
constexpr std::size_t kArchiveHeaderBytes = 32;

const char* style_name(Style s) {
    switch (s) {
        case Style::flat: return "flat";
        case Style::outline: return "outline";
        default: return "textured";
    }
}
const char* accessory_name(Accessory a) {
    switch (a) {
        case Accessory::none: return "none";
        case Accessory::glasses: return "glasses";
        default: return "hat";
    }
}
const char* orientation_name(Orientation o) {
    switch (o) {
        case Orientation::front: return "front";
        case Orientation::left: return "left";
        default: return "right";
    }
}

template <class E>
E enum_from(const std::string& s, std::initializer_list<std::pair<const char*, E>> table) {
    for (const auto& [name, value] : table) {
        if (s == name) {
            return value;
        }
    }
    throw VersionError("manifest: unknown enum value '" + s + "'");
}

}  // namespace

SceneSpec SceneSpec::make(int hue_bin, Style style, Accessory accessory, Orientation orientation) {
    require(hue_bin >= 0 && hue_bin < kHueBins, "hue bin out of range");
    return SceneSpec{(hue_bin + 0.5) / kHueBins, style, accessory, orientation};
}

int SceneSpec::hue_bin() const {
    return std::clamp(static_cast<int>(std::floor(background_hue * kHueBins)), 0, kHueBins - 1);
}

std::vector<SceneSpec> all_scenes() {
    std::vector<SceneSpec> out;
    for (int s = 0; s < 3; ++s) {
        for (int h = 0; h < kHueBins; ++h) {
            for (int a = 0; a < 3; ++a) {
                for (int o = 0; o < 3; ++o) {
                    out.push_back(SceneSpec::make(h, static_cast<Style>(s), static_cast<Accessory>(a),
                                                  static_cast<Orientation>(o)));
                }
            }
        }
    }
    return out;
}

SceneSpec neutral_scene() { return SceneSpec::make(0, Style::flat, Accessory::none, Orientation::front); }

void validate(const IdentitySpec& identity) {
    require(identity.id_index >= 0, "identity index must be >= 0");
    for (double p : identity.params) {
        require(p >= 0.0 && p <= 1.0, "identity parameter outside [0, 1]");
    }
}

ImageSample render(const IdentitySpec& identity, const SceneSpec& scene) {
    validate(identity);
    require(scene.background_hue >= 0.0 && scene.background_hue <= 1.0, "background hue outside [0, 1]");
    // Right-facing sprites are the mirror image of the left-facing render.
    SceneSpec base = SceneSpec::make(scene.hue_bin(), scene.style, scene.accessory,
                                     scene.orientation == Orientation::right ? Orientation::left : scene.orientation);
    Canvas canvas;
    draw_scene(canvas, base);
    draw_identity(canvas, identity, base.orientation == Orientation::left ? -1.5 : 0.0);
    Tensor image = canvas.to_tensor();
    if (scene.orientation == Orientation::right) {
        image = mirror_image(image);
    }
    ImageSample out;
    out.image = std::move(image);
    out.identity = identity;
    out.scene = SceneSpec::make(scene.hue_bin(), scene.style, scene.accessory, scene.orientation);
    out.caption = caption_of(out.scene, attributes_of(identity));
    return out;
}

std::vector<Attribute> attributes_of(const IdentitySpec& identity) {
    std::vector<Attribute> out;
    const double mouth = identity[IdentityParam::mouth_curvature];
    const double eyes = identity[IdentityParam::eye_size];
    if (mouth > 0.75) {
        out.push_back(Attribute::smiling);
    } else if (mouth < 0.25) {
        out.push_back(Attribute::frowning);
    }
    if (eyes > 0.75) {
        out.push_back(Attribute::big_eyes);
    } else if (eyes < 0.25) {
        out.push_back(Attribute::small_eyes);
    }
    return out;
}

CaptionTokens caption_of(const SceneSpec& scene, const std::vector<Attribute>& attributes) {
    require(attributes.size() <= 2, "at most two attribute words fit the caption");
    CaptionTokens t{};
    t.fill(kPadToken);
    t[0] = kStyleToken0 + static_cast<int>(scene.style);
    t[1] = kHueToken0 + scene.hue_bin();
    t[2] = kAccessoryToken0 + static_cast<int>(scene.accessory);
    t[3] = kOrientationToken0 + static_cast<int>(scene.orientation);
    for (std::size_t i = 0; i < attributes.size(); ++i) {
        t[4 + i] = kAttributeToken0 + static_cast<int>(attributes[i]);
    }
    return t;
}

CaptionTokens empty_caption() {
    CaptionTokens t{};
    t.fill(kPadToken);
    return t;
}

std::optional<ParsedCaption> parse_caption(const CaptionTokens& tokens) {
    auto in = [](int v, int lo, int n) { return v >= lo && v < lo + n; };
    if (!in(tokens[0], kStyleToken0, 3) || !in(tokens[1], kHueToken0, kHueBins) ||
        !in(tokens[2], kAccessoryToken0, 3) || !in(tokens[3], kOrientationToken0, 3)) {
        return std::nullopt;
    }
    ParsedCaption out;
    out.scene = SceneSpec::make(tokens[1] - kHueToken0, static_cast<Style>(tokens[0] - kStyleToken0),
                                static_cast<Accessory>(tokens[2] - kAccessoryToken0),
                                static_cast<Orientation>(tokens[3] - kOrientationToken0));
    bool padding = false;
    for (int i = 4; i < kCaptionLength; ++i) {
        if (tokens[i] == kPadToken) {
            padding = true;
            continue;
        }
        if (padding || i >= 6 || !in(tokens[i], kAttributeToken0, 4)) {
            return std::nullopt;
        }
        out.attributes.push_back(static_cast<Attribute>(tokens[i] - kAttributeToken0));
    }
    return out;
}

std::string_view token_word(int token) {
    require(token >= 0 && token < kVocabSize, "token out of vocabulary");
    return token < kFirstReserved ? kWords[static_cast<std::size_t>(token)] : std::string_view("<reserved>");
}

std::optional<int> token_from_word(std::string_view word) {
    for (int i = 0; i < kFirstReserved; ++i) {
        if (kWords[static_cast<std::size_t>(i)] == word) {
            return i;
        }
    }
    return std::nullopt;
}

std::string caption_text(const CaptionTokens& tokens) {
    std::string out;
    for (int t : tokens) {
        if (t == kPadToken) {
            continue;
        }
        if (!out.empty()) {
            out += ' ';
        }
        out += token_word(t);
    }
    return out;
}

Tensor identity_crop(const Tensor& image) {
    require(image.rank() == 3 && image.dim(0) == kImageSize && image.dim(1) == kImageSize,
            "identity_crop expects a [32, 32, 3] image");
    Tensor out({kCropSize, kCropSize, kChannels});
    for (int y = 0; y < kCropSize; ++y) {
        const double* s = image.data() + ((kCropOrigin + y) * kImageSize + kCropOrigin) * kChannels;
        std::copy(s, s + kCropSize * kChannels, out.data() + y * kCropSize * kChannels);
    }
    return out;
}

Tensor mirror_image(const Tensor& image) {
    require(image.rank() == 3, "mirror_image expects [H, W, C]");
    const int h = image.dim(0);
    const int w = image.dim(1);
    const int c = image.dim(2);
    Tensor out(image.shape());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int k = 0; k < c; ++k) {
                out[(static_cast<std::size_t>(y) * w + (w - 1 - x)) * c + k] =
                    image[(static_cast<std::size_t>(y) * w + x) * c + k];
            }
        }
    }
    return out;
}

IdentitySpec random_identity(int id_index, std::uint64_t seed) {
    std::mt19937_64 engine(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(id_index) + 1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    IdentitySpec id;
    id.id_index = id_index;
    for (double& p : id.params) {
        p = u(engine);
    }
    return id;
}

bool Dataset::is_heldout(int id_index) const {
    return std::find(heldout_ids.begin(), heldout_ids.end(), id_index) != heldout_ids.end();
}

std::vector<std::size_t> Dataset::indices_for(bool heldout) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (is_heldout(samples[i].identity.id_index) == heldout) {
            out.push_back(i);
        }
    }
    return out;
}

const ImageSample& Dataset::sample_of(int id_index) const {
    for (const auto& s : samples) {
        if (s.identity.id_index == id_index) {
            return s;
        }
    }
    throw ContractError("no sample for identity " + std::to_string(id_index));
}

Dataset generate_dataset(int n_identities, int scenes_per_identity, std::uint64_t seed) {
    if (n_identities < 2) {
        throw ContractError("generate_dataset: need at least 2 identities, got " + std::to_string(n_identities));
    }
    require(scenes_per_identity >= 1, "generate_dataset: scenes_per_identity must be >= 1");
    Dataset data;
    data.seed = seed;
    data.scenes_per_identity = scenes_per_identity;

    std::mt19937_64 engine(seed);
    std::vector<int> order(static_cast<std::size_t>(n_identities));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), engine);
    const int n_heldout = std::max(1, static_cast<int>(std::lround(kHeldOutFraction * n_identities)));
    data.heldout_ids.assign(order.begin(), order.begin() + n_heldout);
    data.train_ids.assign(order.begin() + n_heldout, order.end());
    std::sort(data.heldout_ids.begin(), data.heldout_ids.end());
    std::sort(data.train_ids.begin(), data.train_ids.end());

    const auto scenes = all_scenes();
    for (int id = 0; id < n_identities; ++id) {
        const IdentitySpec identity = random_identity(id, seed);
        for (int s = 0; s < scenes_per_identity; ++s) {
            const SceneSpec& scene = scenes[std::uniform_int_distribution<std::size_t>(0, scenes.size() - 1)(engine)];
            ImageSample sample = render(identity, scene);
            for (double& v : sample.image.values()) {
                v = static_cast<double>(to_f32(v));
            }
            data.samples.push_back(std::move(sample));
        }
    }
    return data;
}

void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream images(dir / "images.f32", std::ios::binary);
    std::ofstream manifest(dir / "manifest.jsonl");
    require(images.good() && manifest.good(), "cannot open dataset files in " + dir.string());

    images.write(kArchiveMagic, sizeof kArchiveMagic);
    write_u32(images, kArchiveVersion);
    write_u32(images, static_cast<std::uint32_t>(data.samples.size()));
    write_u32(images, kImageSize);
    write_u32(images, kImageSize);
    write_u32(images, kChannels);
    write_u32(images, 0);

    const std::size_t record_bytes = static_cast<std::size_t>(kImageSize) * kImageSize * kChannels * sizeof(float);
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        const ImageSample& s = data.samples[i];
        for (double v : s.image.values()) {
            write_u32(images, std::bit_cast<std::uint32_t>(to_f32(v)));
        }
        nlohmann::json rec;
        rec["id_index"] = s.identity.id_index;
        rec["split"] = data.is_heldout(s.identity.id_index) ? "heldout" : "train";
        rec["params"] = s.identity.params;
        rec["background_hue"] = s.scene.background_hue;
        rec["style"] = style_name(s.scene.style);
        rec["accessory"] = accessory_name(s.scene.accessory);
        rec["orientation"] = orientation_name(s.scene.orientation);
        rec["caption"] = s.caption;
        rec["offset"] = kArchiveHeaderBytes + i * record_bytes;
        if (i == 0) {
            rec["dataset_seed"] = data.seed;
            rec["scenes_per_identity"] = data.scenes_per_identity;
        }
        manifest << rec.dump() << '\n';
    }
}

Dataset read_dataset(const std::filesystem::path& dir) {
    std::ifstream images(dir / "images.f32", std::ios::binary);
    std::ifstream manifest(dir / "manifest.jsonl");
    if (!images || !manifest) {
        throw VersionError("dataset not found in " + dir.string());
    }
    char magic[8];
    images.read(magic, 8);
    if (!images || std::memcmp(magic, kArchiveMagic, 8) != 0) {
        throw VersionError("images.f32: bad magic");
    }
    if (read_u32(images) != kArchiveVersion) {
        throw VersionError("images.f32: unsupported version");
    }
    const std::uint32_t count = read_u32(images);
    if (read_u32(images) != kImageSize || read_u32(images) != kImageSize || read_u32(images) != kChannels) {
        throw VersionError("images.f32: unexpected image geometry");
    }
    read_u32(images);

    Dataset data;
    std::string line;
    const std::size_t floats = static_cast<std::size_t>(kImageSize) * kImageSize * kChannels;
    std::vector<int> heldout;
    std::vector<int> train;
    while (std::getline(manifest, line)) {
        if (line.empty()) {
            continue;
        }
        const auto rec = nlohmann::json::parse(line);
        if (rec.contains("dataset_seed")) {
            data.seed = rec["dataset_seed"].get<std::uint64_t>();
            data.scenes_per_identity = rec["scenes_per_identity"].get<int>();
        }
        ImageSample s;
        s.identity.id_index = rec["id_index"].get<int>();
        s.identity.params = rec["params"].get<std::array<double, kIdentityParams>>();
        s.scene.background_hue = rec["background_hue"].get<double>();
        s.scene.style = enum_from<Style>(rec["style"].get<std::string>(),
                                         {{"flat", Style::flat}, {"outline", Style::outline}, {"textured", Style::textured}});
        s.scene.accessory = enum_from<Accessory>(
            rec["accessory"].get<std::string>(),
            {{"none", Accessory::none}, {"glasses", Accessory::glasses}, {"hat", Accessory::hat}});
        s.scene.orientation = enum_from<Orientation>(
            rec["orientation"].get<std::string>(),
            {{"front", Orientation::front}, {"left", Orientation::left}, {"right", Orientation::right}});
        s.caption = rec["caption"].get<CaptionTokens>();
        const auto offset = rec["offset"].get<std::size_t>();
        images.seekg(static_cast<std::streamoff>(offset));
        s.image = Tensor({kImageSize, kImageSize, kChannels});
        for (std::size_t k = 0; k < floats; ++k) {
            s.image[k] = static_cast<double>(std::bit_cast<float>(read_u32(images)));
        }
        auto& bucket = rec["split"].get<std::string>() == "heldout" ? heldout : train;
        if (std::find(bucket.begin(), bucket.end(), s.identity.id_index) == bucket.end()) {
            bucket.push_back(s.identity.id_index);
        }
        data.samples.push_back(std::move(s));
    }
    if (data.samples.size() != count) {
        throw VersionError("manifest/archive record count mismatch");
    }
    std::sort(heldout.begin(), heldout.end());
    std::sort(train.begin(), train.end());
    data.heldout_ids = std::move(heldout);
    data.train_ids = std::move(train);
    return data;
}

Tensor stack_images(const std::vector<const Tensor*>& images) {
    require(!images.empty(), "stack_images: empty batch");
    const Shape& s = images.front()->shape();
    Shape shape{static_cast<int>(images.size())};
    shape.insert(shape.end(), s.begin(), s.end());
    Tensor out(shape);
    const std::size_t n = images.front()->numel();
    for (std::size_t i = 0; i < images.size(); ++i) {
        require(images[i]->shape() == s, "stack_images: ragged batch");
        std::copy(images[i]->data(), images[i]->data() + n, out.data() + i * n);
    }
    return out;
}

}  // namespace idalign
