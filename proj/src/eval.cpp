// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/eval.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "idalign/errors.hpp"

namespace idalign {

namespace {

double row_dot(const Tensor& a, const Tensor& b, int i, int j) {
    const int d = a.dim(-1);
    double s = 0.0;
    for (int k = 0; k < d; ++k) {
        s += a[static_cast<std::size_t>(i) * d + k] * b[static_cast<std::size_t>(j) * d + k];
    }
    return s;
}

Tensor as_batch(const Tensor& image) {
    if (image.rank() == 4) {
        return image;
    }
    require(image.rank() == 3, "expected an image [32, 32, 3]");
    return image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
}

Tensor row_of(const Tensor& batch, int i) {
    const std::size_t per = batch.numel() / static_cast<std::size_t>(batch.dim(0));
    Tensor out({batch.dim(1), batch.dim(2), batch.dim(3)});
    std::copy_n(batch.data() + per * static_cast<std::size_t>(i), per, out.data());
    return out;
}

std::vector<CaptionTokens> repeat(const CaptionTokens& c, std::size_t n) { return std::vector<CaptionTokens>(n, c); }

std::string fmt(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << v;
    return os.str();
}

}  // namespace

double face_sim(const FaceEmbedder& face, const Tensor& reference, const Tensor& generated) {
    NoGradGuard guard;
    const Tensor e1 = face.embed(constant(crops_of(as_batch(reference)))).value();
    const Tensor e2 = face.embed(constant(crops_of(as_batch(generated)))).value();
    return std::clamp(row_dot(e1, e2, 0, 0), -1.0, 1.0);
}

double clip_t_analog(const JointEncoder& joint, const Tensor& image, const CaptionTokens& prompt) {
    NoGradGuard guard;
    const Tensor a = joint.embed_images(constant(as_batch(image))).value();
    const Tensor b = joint.embed_text({prompt}).value();
    return std::clamp(row_dot(a, b, 0, 0), -1.0, 1.0);
}

double clip_i_analog(const JointEncoder& joint, const Tensor& a, const Tensor& b) {
    NoGradGuard guard;
    const Tensor ea = joint.embed_images(constant(as_batch(a))).value();
    const Tensor eb = joint.embed_images(constant(as_batch(b))).value();
    return std::clamp(row_dot(ea, eb, 0, 0), -1.0, 1.0);
}

std::vector<CaptionTokens> eval_prompts() {
    return {
        caption_of(SceneSpec::make(1, Style::flat, Accessory::none, Orientation::front)),
        caption_of(SceneSpec::make(3, Style::outline, Accessory::glasses, Orientation::front)),
        caption_of(SceneSpec::make(5, Style::textured, Accessory::hat, Orientation::front)),
        caption_of(SceneSpec::make(6, Style::flat, Accessory::none, Orientation::left)),
        caption_of(SceneSpec::make(2, Style::outline, Accessory::none, Orientation::right)),
        caption_of(SceneSpec::make(4, Style::flat, Accessory::hat, Orientation::front), {Attribute::smiling}),
        caption_of(SceneSpec::make(7, Style::textured, Accessory::glasses, Orientation::left)),
        caption_of(SceneSpec::make(0, Style::flat, Accessory::glasses, Orientation::front)),
        caption_of(SceneSpec::make(5, Style::outline, Accessory::hat, Orientation::right)),
        caption_of(SceneSpec::make(2, Style::textured, Accessory::none, Orientation::front), {Attribute::big_eyes}),
    };
}

nlohmann::json MetricsReport::header() const {
    return {{"face_sim", face_sim},   {"clip_t", clip_t},          {"clip_i", clip_i},
            {"n_samples", n_samples}, {"config_hash", config_hash}, {"clip_t_scale", "raw cosine"}};
}

void MetricsReport::write_jsonl(const std::filesystem::path& path) const {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream os(path);
    require(os.good(), "cannot write report " + path.string());
    os << nlohmann::json{{"aggregate", header()}}.dump() << '\n';
    for (const auto& r : records) {
        os << nlohmann::json{{"id_index", r.id_index}, {"prompt_index", r.prompt_index}, {"seed", r.seed},
                             {"face_sim", r.face_sim}, {"clip_t", r.clip_t},             {"clip_i", r.clip_i}}
                  .dump()
           << '\n';
    }
}

ImageSample reference_sample(const Dataset& data, int id_index) {
    return render(data.sample_of(id_index).identity, neutral_scene());
}

Tensor eval_noise(std::uint64_t seed, int prompt_index) {
    return initial_noise(1, seed * 1000003ULL + static_cast<std::uint64_t>(prompt_index + 1));
}

Evaluator::Evaluator(const TrainingContext& ctx, EvalConfig config) : ctx_(ctx), config_(std::move(config)) {
    ids_ = config_.ids.empty() ? ctx_.data().heldout_ids : config_.ids;
    require(!ids_.empty(), "Evaluator: no identities to evaluate");
    require(!config_.prompts.empty() && !config_.seeds.empty(), "Evaluator: prompts and seeds must be nonempty");
    for (int id : ids_) {
        if (!ctx_.data().is_heldout(id)) {
            throw ContractError("Evaluator: identity " + std::to_string(id) + " is not held out");
        }
    }
}

Tensor Evaluator::generate(const IdAdapter* adapter, int id_index, const std::vector<CaptionTokens>& prompts,
                           const std::vector<std::uint64_t>& seeds) const {
    require(prompts.size() == seeds.size() && !prompts.empty(), "generate: prompts and seeds must pair up");
    NoGradGuard guard;
    const Backbones& bb = ctx_.backbones();
    const int n = static_cast<int>(prompts.size());
    std::vector<Tensor> noises;
    std::vector<const Tensor*> ptrs;
    const auto all = config_.prompts;
    for (int i = 0; i < n; ++i) {
        const auto it = std::find(all.begin(), all.end(), prompts[static_cast<std::size_t>(i)]);
        const int pi = it == all.end() ? -1 : static_cast<int>(it - all.begin());
        noises.push_back(eval_noise(seeds[static_cast<std::size_t>(i)], pi).reshaped({kImageSize, kImageSize, kChannels}));
    }
    for (const auto& t : noises) {
        ptrs.push_back(&t);
    }
    const TextConditioning text = bb.base.text(prompts);
    const TextConditioning uncond = bb.base.text(repeat(empty_caption(), prompts.size()));
    IdConditioning id;
    if (adapter != nullptr) {
        const ImageSample ref = reference_sample(ctx_.data(), id_index);
        const IdFeatures f = extract_id_features(bb.face, bb.joint, crops_of(as_batch(ref.image)));
        id = adapter->condition(select_features(f, std::vector<int>(prompts.size(), 0)), config_.id_weight);
    }
    return sample_from(bb.base.denoiser, ctx_.schedule(), config_.plan, constant(stack_images(ptrs)), 0,
                       {&text, &uncond, adapter ? &id : nullptr})
        .value();
}

MetricsReport Evaluator::run(const IdAdapter& adapter, std::uint64_t config_hash) {
    const Backbones& bb = ctx_.backbones();
    const FaceEmbedder& scorer = config_.use_eval_embedder ? bb.eval_face : bb.face;
    const int np = static_cast<int>(config_.prompts.size());
    std::vector<CaptionTokens> prompts;
    std::vector<std::uint64_t> seeds;
    for (int p = 0; p < np; ++p) {
        for (std::uint64_t s : config_.seeds) {
            prompts.push_back(config_.prompts[static_cast<std::size_t>(p)]);
            seeds.push_back(s);
        }
    }
    if (plain_cache_.empty()) {
        const Tensor plain = generate(nullptr, ids_.front(), prompts, seeds);
        for (int p = 0, row = 0; p < np; ++p) {
            for (std::uint64_t s : config_.seeds) {
                plain_cache_.emplace(std::make_pair(p, s), row_of(plain, row++));
            }
        }
    }
    MetricsReport report;
    report.config_hash = config_hash;
    const CaptionTokens neutral = caption_of(neutral_scene());
    for (int id : ids_) {
        const ImageSample ref = reference_sample(ctx_.data(), id);
        const Tensor with_id = generate(&adapter, id, prompts, seeds);
        const Tensor portraits = generate(&adapter, id, repeat(neutral, config_.seeds.size()), config_.seeds);
        std::vector<double> fs;
        for (std::size_t s = 0; s < config_.seeds.size(); ++s) {
            fs.push_back(face_sim(scorer, ref.image, row_of(portraits, static_cast<int>(s))));
        }
        int row = 0;
        for (int p = 0; p < np; ++p) {
            for (std::size_t s = 0; s < config_.seeds.size(); ++s, ++row) {
                const Tensor img = row_of(with_id, row);
                MetricRecord r;
                r.id_index = id;
                r.prompt_index = p;
                r.seed = config_.seeds[s];
                r.face_sim = fs[s];
                r.clip_t = clip_t_analog(bb.joint, img, config_.prompts[static_cast<std::size_t>(p)]);
                r.clip_i = clip_i_analog(bb.joint, img, plain_cache_.at({p, config_.seeds[s]}));
                report.records.push_back(r);
            }
        }
    }
    report.n_samples = static_cast<int>(report.records.size());
    for (const auto& r : report.records) {
        report.face_sim += r.face_sim / report.n_samples;
        report.clip_t += r.clip_t / report.n_samples;
        report.clip_i += r.clip_i / report.n_samples;
    }
    return report;
}

const Verdict* AblationResult::verdict(const std::string& claim) const {
    for (const auto& v : verdicts) {
        if (v.claim == claim) {
            return &v;
        }
    }
    return nullptr;
}

std::string AblationResult::markdown() const {
    std::ostringstream os;
    os << "| Setting | Face Sim | CLIP-T | CLIP-I |\n|---|---|---|---|\n";
    for (const auto& r : mean) {
        os << "| " << r.name << " | " << fmt(r.face_sim) << " | " << fmt(r.clip_t) << " | " << fmt(r.clip_i)
           << " |\n";
    }
    os << "\n| Claim | Per seed | Majority |\n|---|---|---|\n";
    for (const auto& v : verdicts) {
        os << "| " << v.claim << (v.informational ? " (info)" : "") << " | ";
        for (bool b : v.per_seed) {
            os << (b ? 'T' : 'F');
        }
        os << " | " << (v.majority ? "true" : "false") << " |\n";
    }
    return os.str();
}

AblationResult run_ablation(const TrainingContext& ctx, const AblationConfig& config,
                            const ProgressCallback& progress) {
    require(!config.seeds.empty(), "run_ablation: no seeds");
    Evaluator evaluator(ctx, config.eval);
    AblationResult result;
    auto note = [&progress](const std::string& msg) {
        if (progress) {
            progress(msg);
        }
    };
    auto row = [](const std::string& name, const MetricsReport& r) {
        return AblationRow{name, r.face_sim, r.clip_t, r.clip_i};
    };
    for (std::uint64_t seed : config.seeds) {
        std::vector<AblationRow> rows;
        auto stage = [&](StageConfig c, IdAdapter& adapter, const std::string& name) {
            c.seed = c.seed * 7919ULL + seed;
            note("seed " + std::to_string(seed) + ": training " + name);
            train_stage(ctx, adapter, c);
            note("seed " + std::to_string(seed) + ": evaluating " + name);
            rows.push_back(row(name, evaluator.run(adapter)));
        };
        IdAdapter s1(ctx.backbones().base.denoiser, seed);
        stage(config.stage1, s1, "stage1");
        IdAdapter naive = s1.clone();
        stage(config.naive, naive, "naive_id");
        IdAdapter s2 = s1.clone();
        stage(config.stage2, s2, "stage2");
        IdAdapter s3 = s2.clone();
        stage(config.stage3, s3, "stage3");
        for (int k : config.step_grid) {
            IdAdapter sk = s1.clone();
            StageConfig c = config.stage2;
            c.plan.steps = k;
            c.plan.bp_last_k = std::min(c.plan.bp_last_k, k);
            stage(c, sk, "stage2_K" + std::to_string(k));
        }
        result.per_seed.push_back(std::move(rows));
    }
    const std::size_t n_rows = result.per_seed.front().size();
    for (std::size_t r = 0; r < n_rows; ++r) {
        AblationRow m{result.per_seed.front()[r].name};
        for (const auto& seed_rows : result.per_seed) {
            m.face_sim += seed_rows[r].face_sim / static_cast<double>(result.per_seed.size());
            m.clip_t += seed_rows[r].clip_t / static_cast<double>(result.per_seed.size());
            m.clip_i += seed_rows[r].clip_i / static_cast<double>(result.per_seed.size());
        }
        result.mean.push_back(m);
    }
    auto find = [](const std::vector<AblationRow>& rows, const std::string& name) -> const AblationRow* {
        for (const auto& r : rows) {
            if (r.name == name) {
                return &r;
            }
        }
        return nullptr;
    };
    auto claim = [&](const std::string& text, bool informational,
                     const std::function<bool(const std::vector<AblationRow>&)>& test) {
        Verdict v{text, {}, false, informational};
        int yes = 0;
        for (const auto& rows : result.per_seed) {
            const bool ok = test(rows);
            v.per_seed.push_back(ok);
            yes += ok ? 1 : 0;
        }
        v.majority = 2 * yes > static_cast<int>(result.per_seed.size());
        result.verdicts.push_back(v);
    };
    auto get = [&](const std::vector<AblationRow>& rows, const std::string& name) { return *find(rows, name); };
    claim("face_sim(stage2) >= face_sim(stage1) + 0.05", false,
          [&](const auto& r) { return get(r, "stage2").face_sim >= get(r, "stage1").face_sim + 0.05; });
    claim("face_sim(stage2) > face_sim(naive_id)", false,
          [&](const auto& r) { return get(r, "stage2").face_sim > get(r, "naive_id").face_sim; });
    claim("clip_i(stage2) < clip_i(stage1)", false,
          [&](const auto& r) { return get(r, "stage2").clip_i < get(r, "stage1").clip_i; });
    claim("clip_i(stage3) >= clip_i(stage2) + 0.05", false,
          [&](const auto& r) { return get(r, "stage3").clip_i >= get(r, "stage2").clip_i + 0.05; });
    claim("clip_t(stage3) > clip_t(stage2)", false,
          [&](const auto& r) { return get(r, "stage3").clip_t > get(r, "stage2").clip_t; });
    claim("face_sim(stage3) >= face_sim(stage1)", false,
          [&](const auto& r) { return get(r, "stage3").face_sim >= get(r, "stage1").face_sim; });
    if (find(result.per_seed.front(), "stage2_K1") != nullptr) {
        claim("face_sim(K=1) <= face_sim(K=4)", false,
              [&](const auto& r) { return get(r, "stage2_K1").face_sim <= get(r, "stage2").face_sim; });
    }
    if (find(result.per_seed.front(), "stage2_K8") != nullptr) {
        claim("face_sim(K=8) >= face_sim(K=4)", true,
              [&](const auto& r) { return get(r, "stage2_K8").face_sim >= get(r, "stage2").face_sim; });
    }
    return result;
}

std::pair<int, int> grid_size(const std::vector<GridRow>& rows) {
    if (rows.empty()) {
        throw ContractError("emit_grid: no rows");
    }
    const std::size_t cols = rows.front().images.size();
    if (cols == 0) {
        throw ContractError("emit_grid: empty row");
    }
    for (const auto& r : rows) {
        if (r.images.size() != cols) {
            throw ContractError("emit_grid: ragged rows");
        }
        for (const auto& img : r.images) {
            if (img.shape() != Shape{kImageSize, kImageSize, kChannels}) {
                throw ContractError("emit_grid: images must be [32, 32, 3], got " + shape_str(img.shape()));
            }
        }
    }
    const int c = static_cast<int>(cols);
    const int n = static_cast<int>(rows.size());
    return {c * kImageSize + (c + 1) * kGridMargin, n * kImageSize + (n + 1) * kGridMargin};
}

void emit_grid(const std::vector<GridRow>& rows, const std::filesystem::path& path) {
    const auto [width, height] = grid_size(rows);
    std::vector<unsigned char> pixels(static_cast<std::size_t>(width) * height * 3, 255);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < rows[r].images.size(); ++c) {
            const Tensor& img = rows[r].images[c];
            const int y0 = kGridMargin + static_cast<int>(r) * (kImageSize + kGridMargin);
            const int x0 = kGridMargin + static_cast<int>(c) * (kImageSize + kGridMargin);
            for (int y = 0; y < kImageSize; ++y) {
                for (int x = 0; x < kImageSize; ++x) {
                    for (int ch = 0; ch < kChannels; ++ch) {
                        const double v = img[(static_cast<std::size_t>(y) * kImageSize + x) * kChannels + ch];
                        const double u = std::clamp((v + 1.0) * 0.5, 0.0, 1.0);
                        pixels[((static_cast<std::size_t>(y0 + y)) * width + x0 + x) * 3 + ch] =
                            static_cast<unsigned char>(std::lround(u * 255.0));
                    }
                }
            }
        }
    }
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    require(fp != nullptr, "emit_grid: cannot open " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("emit_grid: libpng failure writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
        png_write_row(png, pixels.data() + static_cast<std::size_t>(y) * width * 3);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);

    std::ofstream side(path.string() + ".txt");
    require(side.good(), "emit_grid: cannot write caption sidecar");
    for (const auto& r : rows) {
        side << r.caption << '\n';
    }
}

}  // namespace idalign
