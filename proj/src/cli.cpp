// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "idalign/checkpoint.hpp"
#include "idalign/config.hpp"
#include "idalign/errors.hpp"
#include "idalign/eval.hpp"

namespace idalign {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Common {
    std::string run = "run";
    std::string config;
    std::vector<std::string> sets;
};

std::string hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

class Run {
public:
    Run(const Common& common, RunConfig config) : root_(common.run), config_(std::move(config)) {
        for (const char* sub : {"ckpt", "logs", "reports", "grids"}) {
            fs::create_directories(root_ / sub);
        }
        std::ofstream(root_ / "config.resolved") << echo_config(config_);
    }

    const fs::path& root() const { return root_; }
    fs::path ckpt(const std::string& name) const { return root_ / "ckpt" / (name + ".ckpt"); }
    fs::path logs(const std::string& name) const { return root_ / "logs" / name; }
    fs::path reports(const std::string& name) const { return root_ / "reports" / name; }
    fs::path grids(const std::string& name) const { return root_ / "grids" / name; }
    fs::path data() const { return root_ / "data"; }
    const RunConfig& config() const { return config_; }

    json meta(const std::string& kind) const {
        const json arch{{"image_size", kImageSize},     {"vocab_size", kVocabSize},
                        {"caption_length", kCaptionLength}, {"attn_dim", kAttnDim},
                        {"cross_attn_layers", kCrossAttnLayers}, {"id_tokens", kIdTokens}};
        return {{"kind", kind},         {"config_hash", hex(config_hash(config_))}, {"seed", config_.seed},
                {"arch", arch},         {"config", echo_config(config_)}};
    }

private:
    fs::path root_;
    RunConfig config_;
};

RunConfig resolve_config(const Common& common) {
    RunConfig c;
    const fs::path resolved = fs::path(common.run) / "config.resolved";
    if (!common.config.empty()) {
        c = load_config(common.config);
    } else if (fs::exists(resolved)) {
        c = load_config(resolved.string());
    }
    for (const auto& kv : common.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(kv, "--set expects key=value");
        }
        set_config_field(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return c;
}

template <typename T>
void override_field(RunConfig& c, const char* key, const std::optional<T>& v) {
    if (v) {
        std::ostringstream os;
        os.precision(17);
        os << *v;
        set_config_field(c, key, os.str());
    }
}

Dataset load_data(const Run& run) {
    if (!fs::exists(run.data() / "manifest.jsonl")) {
        throw ContractError("no dataset under " + run.data().string() + "; run gen-data first");
    }
    return read_dataset(run.data());
}

Checkpoint require_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) {
        throw ContractError("missing checkpoint " + path.string());
    }
    return load_checkpoint(path);
}

FaceEmbedder load_face(const fs::path& path, const std::string& prefix) {
    const Checkpoint ck = require_checkpoint(path);
    Rng rng(0);
    FaceEmbedder face(ck.meta.at("width").get<int>(), rng);
    ParamList params;
    face.collect(prefix, params);
    load_into(ck, params);
    return face;
}

Backbones load_backbones(const Run& run) {
    Backbones bb;
    load_into(require_checkpoint(run.ckpt("base")), bb.base.parameters());
    bb.face = load_face(run.ckpt("face"), "face");
    if (run.config().eval_embedder != 0) {
        bb.eval_face = load_face(run.ckpt("eval_face"), "eval_face");
    } else {
        bb.eval_face = bb.face;
    }
    Rng rng(0);
    bb.joint = JointEncoder(rng);
    ParamList jp;
    bb.joint.collect("joint", jp);
    load_into(require_checkpoint(run.ckpt("joint")), jp);
    bb.freeze();
    return bb;
}

IdAdapter load_adapter(const Backbones& bb, const fs::path& path) {
    IdAdapter adapter(bb.base.denoiser, 0);
    load_into(require_checkpoint(path), adapter.parameters());
    return adapter;
}

CaptionTokens parse_prompt(const std::string& text) {
    CaptionTokens tokens{};
    tokens.fill(kPadToken);
    std::string s = text;
    std::replace(s.begin(), s.end(), ',', ' ');
    std::istringstream is(s);
    std::string word;
    int n = 0;
    while (is >> word) {
        if (n == kCaptionLength) {
            throw ConfigError("prompt-tokens", "more than " + std::to_string(kCaptionLength) + " tokens");
        }
        int token = -1;
        if (std::all_of(word.begin(), word.end(), [](unsigned char ch) { return std::isdigit(ch); })) {
            token = std::stoi(word);
        } else if (const auto t = token_from_word(word)) {
            token = *t;
        }
        if (token < 0 || token >= kVocabSize) {
            throw ConfigError("prompt-tokens", "unknown token '" + word + "'");
        }
        tokens[static_cast<std::size_t>(n++)] = token;
    }
    if (!parse_caption(tokens)) {
        throw ConfigError("prompt-tokens", "not a well-formed caption: '" + text + "'");
    }
    return tokens;
}

Tensor image_at(const Tensor& batch, int i) {
    const std::size_t per = batch.numel() / static_cast<std::size_t>(batch.dim(0));
    Tensor out({kImageSize, kImageSize, kChannels});
    std::copy_n(batch.data() + per * static_cast<std::size_t>(i), per, out.data());
    return out;
}

std::vector<int> parse_int_list(const std::string& text, const char* field) {
    std::vector<int> out;
    std::string s = text;
    std::replace(s.begin(), s.end(), ',', ' ');
    std::istringstream is(s);
    int v = 0;
    while (is >> v) {
        out.push_back(v);
    }
    if (!is.eof() || out.empty()) {
        throw ConfigError(field, "expected a comma-separated integer list, got '" + text + "'");
    }
    return out;
}

PretrainConfig pretrain_config(int steps, int batch, double lr, std::uint64_t seed, std::ofstream& log,
                               std::ostream& out, const std::string& tag) {
    PretrainConfig pc;
    pc.steps = steps;
    pc.batch_size = batch;
    pc.learning_rate = lr;
    pc.seed = seed;
    pc.on_step = [&log, &out, tag, steps](int step, double loss) {
        log << json{{"step", step}, {"loss", loss}}.dump() << '\n';
        if (step % 100 == 0 || step == steps) {
            out << tag << " step " << step << " loss " << loss << '\n' << std::flush;
        }
    };
    return pc;
}

std::vector<CaptionTokens> gate_prompts(int n) {
    const auto scenes = all_scenes();
    std::vector<CaptionTokens> prompts;
    for (int i = 0; i < n; ++i) {
        prompts.push_back(caption_of(scenes[(static_cast<std::size_t>(i) * 37) % scenes.size()]));
    }
    return prompts;
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const Run& run, const std::string& out_dir, std::ostream& out) {
    const RunConfig& c = run.config();
    const fs::path dir = out_dir.empty() ? run.data() : fs::path(out_dir);
    const Dataset data = generate_dataset(c.n_ids, c.scenes_per_id, c.data_seed);
    write_dataset(data, dir);
    out << "wrote " << data.samples.size() << " samples (" << data.train_ids.size() << " train ids, "
        << data.heldout_ids.size() << " held-out ids) to " << dir.string() << '\n';
    return kExitOk;
}

int cmd_pretrain(const Run& run, const std::string& which, std::ostream& out) {
    const RunConfig& c = run.config();
    const Dataset data = load_data(run);
    std::ofstream log(run.logs("pretrain_" + which + ".jsonl"));
    json report{{"which", which}, {"config_hash", hex(config_hash(c))}};
    json meta = run.meta(which);
    ParamList params;
    const auto start = std::chrono::steady_clock::now();
    if (which == "face" || which == "eval-face") {
        const bool eval = which == "eval-face";
        const int width = eval ? c.eval_face_width : c.face_width;
        const std::string prefix = eval ? "eval_face" : "face";
        const FaceEmbedder face = pretrain_face_embedder(
            data, width,
            pretrain_config(c.face_steps, c.encoder_batch, c.encoder_lr, c.seed * 4 + (eval ? 2 : 1), log, out,
                            which));
        const VerificationStats v = face_verification(face, data, 200, c.seed + 5);
        report["same_mean"] = v.same_mean;
        report["cross_mean"] = v.cross_mean;
        report["gap"] = v.gap();
        meta["width"] = width;
        face.collect(prefix, params);
        save_checkpoint(run.ckpt(prefix), make_checkpoint(params, meta));
        out << which << " verification gap " << v.gap() << '\n';
    } else if (which == "joint") {
        const JointEncoder joint = pretrain_joint_encoder(
            data, pretrain_config(c.joint_steps, c.encoder_batch, c.encoder_lr, c.seed * 4 + 3, log, out, which));
        const RetrievalStats r = caption_retrieval(joint, data, 128);
        report["top1"] = r.top1;
        report["chance"] = r.chance;
        joint.collect("joint", params);
        save_checkpoint(run.ckpt("joint"), make_checkpoint(params, meta));
        out << "joint retrieval top1 " << r.top1 << " (chance " << r.chance << ")\n";
    } else {
        const BaseModel base =
            pretrain_base(data, pretrain_config(c.base_steps, c.base_batch, c.base_lr, c.seed * 4, log, out, which));
        save_checkpoint(run.ckpt("base"), make_checkpoint(base.parameters(), meta));
        if (fs::exists(run.ckpt("joint"))) {
            Rng rng(0);
            JointEncoder joint(rng);
            ParamList jp;
            joint.collect("joint", jp);
            load_into(load_checkpoint(run.ckpt("joint")), jp);
            const CaptionMatchStats m =
                base_caption_match(base, joint, NoiseSchedule::linear(), gate_prompts(16), 50, c.seed + 9);
            report["caption_match_conditional"] = m.conditional;
            report["caption_match_unconditional"] = m.unconditional;
            out << "base caption match " << m.conditional << " vs unconditional " << m.unconditional << '\n';
        }
    }
    report["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ofstream(run.reports("pretrain_" + which + ".json")) << report.dump(2) << '\n';
    return kExitOk;
}

int cmd_train(const Run& run, Stage stage, const std::string& resume, std::ostream& out) {
    const RunConfig& c = run.config();
    const Dataset data = load_data(run);
    const Backbones bb = load_backbones(run);
    const TrainingContext ctx(bb, data);
    std::string parent = resume;
    if (parent.empty() && stage != Stage::stage1) {
        parent = run.ckpt(stage == Stage::stage3 ? "stage2" : "stage1").string();
    }
    IdAdapter adapter = parent.empty() ? IdAdapter(bb.base.denoiser, c.seed) : load_adapter(bb, parent);
    const StageConfig sc = c.stage_config(stage);
    const std::string name = stage_name(stage);
    std::ofstream log(run.logs("train_" + name + ".jsonl"));
    const auto logs = train_stage(ctx, adapter, sc, [&](const StepLog& s) {
        log << json{{"step", s.step}, {"l_diff", s.l_diff}, {"l_sem", s.l_sem}, {"l_layout", s.l_layout},
                    {"l_id", s.l_id}, {"total", s.total}}
                   .dump()
            << '\n';
        if (s.step % 50 == 0 || s.step == sc.steps) {
            out << name << " step " << s.step << " total " << s.total << '\n' << std::flush;
        }
    });
    json meta = run.meta("adapter");
    meta["stage"] = name;
    meta["steps"] = sc.steps;
    meta["parent"] = parent;
    save_checkpoint(run.ckpt(name), make_checkpoint(adapter.parameters(), meta));
    out << "saved " << run.ckpt(name).string() << " after " << logs.size() << " steps\n";
    return kExitOk;
}

struct SampleArgs {
    std::string ckpt;
    std::string prompt = "flat bg-red bare front";
    int id = -1;
    int count = 4;
    std::string out;
};

int cmd_sample(const Run& run, const SampleArgs& a, std::ostream& out) {
    const RunConfig& c = run.config();
    const Dataset data = load_data(run);
    const Backbones bb = load_backbones(run);
    const TrainingContext ctx(bb, data);
    const CaptionTokens prompt = parse_prompt(a.prompt);
    const int id = a.id >= 0 ? a.id : data.heldout_ids.front();
    if (id >= static_cast<int>(data.train_ids.size() + data.heldout_ids.size())) {
        throw ConfigError("id-image", "identity " + std::to_string(id) + " not in dataset");
    }
    EvalConfig ec = c.eval_config();
    Evaluator ev(ctx, ec);
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < a.count; ++i) {
        seeds.push_back(c.seed + static_cast<std::uint64_t>(i));
    }
    const std::vector<CaptionTokens> prompts(seeds.size(), prompt);
    const Tensor ref = reference_sample(data, id).image;
    GridRow plain{{ref}, "no id: " + caption_text(prompt)};
    for (int i = 0; i < a.count; ++i) {
        plain.images.push_back(image_at(ev.generate(nullptr, id, {prompt}, {seeds[static_cast<std::size_t>(i)]}), 0));
    }
    std::vector<GridRow> rows{plain};
    if (!a.ckpt.empty()) {
        const IdAdapter adapter = load_adapter(bb, a.ckpt);
        const Tensor imgs = ev.generate(&adapter, id, prompts, seeds);
        GridRow with{{ref}, "id " + std::to_string(id) + ": " + caption_text(prompt)};
        for (int i = 0; i < a.count; ++i) {
            with.images.push_back(image_at(imgs, i));
        }
        rows.push_back(with);
    }
    const fs::path path = a.out.empty() ? run.grids("sample.png") : fs::path(a.out);
    emit_grid(rows, path);
    out << "wrote " << path.string() << '\n';
    return kExitOk;
}

int cmd_eval(const Run& run, const std::string& ckpt, const std::string& out_path, std::ostream& out) {
    const RunConfig& c = run.config();
    const Dataset data = load_data(run);
    const Backbones bb = load_backbones(run);
    const TrainingContext ctx(bb, data);
    const IdAdapter adapter = load_adapter(bb, ckpt);
    EvalConfig ec = c.eval_config();
    if (c.eval_ids > 0) {
        ec.ids.assign(data.heldout_ids.begin(),
                      data.heldout_ids.begin() + std::min<std::size_t>(data.heldout_ids.size(), c.eval_ids));
    }
    Evaluator ev(ctx, ec);
    const MetricsReport report = ev.run(adapter, config_hash(c));
    const fs::path path = out_path.empty() ? run.reports("eval_" + fs::path(ckpt).stem().string() + ".jsonl")
                                           : fs::path(out_path);
    report.write_jsonl(path);
    out << report.header().dump() << '\n';
    return kExitOk;
}

int cmd_ablate(const Run& run, const std::string& out_path, std::ostream& out) {
    const RunConfig& c = run.config();
    const Dataset data = load_data(run);
    const Backbones bb = load_backbones(run);
    const TrainingContext ctx(bb, data);
    AblationConfig ac = c.ablation_config();
    if (c.eval_ids > 0) {
        ac.eval.ids.assign(data.heldout_ids.begin(),
                           data.heldout_ids.begin() + std::min<std::size_t>(data.heldout_ids.size(), c.eval_ids));
    }
    const AblationResult result =
        run_ablation(ctx, ac, [&](const std::string& msg) { out << msg << '\n' << std::flush; });
    const fs::path path = out_path.empty() ? run.reports("ablation.md") : fs::path(out_path);
    std::ofstream(path) << result.markdown();
    json verdicts = json::array();
    for (const Verdict& v : result.verdicts) {
        verdicts.push_back(
            {{"claim", v.claim}, {"per_seed", v.per_seed}, {"majority", v.majority}, {"informational", v.informational}});
    }
    std::ofstream(run.reports("ablation_verdicts.json")) << json{{"config_hash", hex(config_hash(c))},
                                                                 {"verdicts", verdicts}}
                                                                .dump(2)
                                                         << '\n';
    out << result.markdown();
    return kExitOk;
}

struct TimingArgs {
    std::string ckpt;
    std::string bp = "1,2,3,4";
    int iters = 3;
    int batch = 2;
    std::string out;
};

int cmd_timing(const Run& run, const TimingArgs& a, std::ostream& out) {
    const RunConfig& c = run.config();
    const Dataset data = load_data(run);
    const Backbones bb = load_backbones(run);
    const TrainingContext ctx(bb, data);
    const IdAdapter adapter = a.ckpt.empty() ? IdAdapter(bb.base.denoiser, c.seed) : load_adapter(bb, a.ckpt);
    if (a.iters < 1 || a.batch < 1) {
        throw ConfigError(a.iters < 1 ? "iters" : "batch", "must be positive");
    }
    auto rows = timing_harness(ctx, adapter, parse_int_list(a.bp, "bp"), true, a.iters, a.batch);
    const auto slow = timing_harness(ctx, adapter, {4}, false, a.iters, a.batch);
    rows.insert(rows.end(), slow.begin(), slow.end());
    std::ostringstream md;
    md << "| Sampler | K | bp | s/iter | peak MiB |\n|---|---|---|---|---|\n";
    for (const TimingRow& r : rows) {
        md << "| " << (r.accelerated ? "accelerated" : "standard") << " | " << r.sampler_steps << " | "
           << r.bp_last_k << " | " << std::fixed << std::setprecision(4) << r.seconds_per_iter << " | "
           << std::setprecision(1) << static_cast<double>(r.peak_bytes) / (1024.0 * 1024.0) << " |\n";
    }
    const fs::path path = a.out.empty() ? run.reports("timing.md") : fs::path(a.out);
    std::ofstream(path) << md.str();
    out << md.str();
    return kExitOk;
}

int cmd_plot_grid(const Run& run, const std::string& ckpt, int n_ids, const std::string& out_path,
                  std::ostream& out) {
    const RunConfig& c = run.config();
    const Dataset data = load_data(run);
    const Backbones bb = load_backbones(run);
    const TrainingContext ctx(bb, data);
    const IdAdapter adapter = load_adapter(bb, ckpt);
    Evaluator ev(ctx, c.eval_config());
    const auto prompts = ev.config().prompts;
    const std::uint64_t seed = ev.config().seeds.front();
    std::vector<GridRow> rows;
    const int n = std::min<int>(n_ids, static_cast<int>(data.heldout_ids.size()));
    for (int i = 0; i < n; ++i) {
        const int id = data.heldout_ids[static_cast<std::size_t>(i)];
        const Tensor imgs = ev.generate(&adapter, id, prompts, std::vector<std::uint64_t>(prompts.size(), seed));
        GridRow row{{reference_sample(data, id).image}, "id " + std::to_string(id) + ": reference |"};
        for (std::size_t p = 0; p < prompts.size(); ++p) {
            row.images.push_back(image_at(imgs, static_cast<int>(p)));
            row.caption += (p ? " | " : " ") + caption_text(prompts[p]);
        }
        rows.push_back(std::move(row));
    }
    const fs::path path = out_path.empty() ? run.grids("heldout.png") : fs::path(out_path);
    emit_grid(rows, path);
    out << "wrote " << path.string() << '\n';
    return kExitOk;
}

void error_line(std::ostream& err, const std::string& kind, const std::string& message,
                const std::string& field = "") {
    json j{{"error", kind}, {"message", message}};
    if (!field.empty()) {
        j["field"] = field;
    }
    err << j.dump() << '\n';
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Identity-customization adapter training lab", "idalign"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--run", common.run, "Run directory")->capture_default_str();
    app.add_option("--config", common.config, "Config file (key = value lines)");
    app.add_option("--set", common.sets, "Config override key=value (repeatable)");

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic identity dataset");
    std::optional<int> n_ids, scenes;
    std::optional<std::uint64_t> data_seed;
    std::string data_out;
    gen->add_option("--n-ids", n_ids);
    gen->add_option("--scenes-per-id", scenes);
    gen->add_option("--seed", data_seed);
    gen->add_option("--out", data_out, "Dataset directory (default RUN/data)");

    auto* pre = app.add_subcommand("pretrain", "Pretrain a frozen backbone");
    std::string which;
    std::optional<int> pre_steps;
    std::optional<std::uint64_t> seed;
    pre->add_option("--which", which)->required()->check(CLI::IsMember({"base", "face", "eval-face", "joint"}));
    pre->add_option("--steps", pre_steps);
    pre->add_option("--seed", seed);

    auto* train = app.add_subcommand("train", "Train one adapter stage");
    std::string stage_text, resume;
    std::optional<int> train_steps;
    train->add_option("--stage", stage_text)->required()->check(CLI::IsMember({"1", "2", "3", "naive"}));
    train->add_option("--resume", resume, "Adapter checkpoint to continue from");
    train->add_option("--steps", train_steps);
    train->add_option("--seed", seed);
    train->add_option("--config", common.config);

    auto* sample = app.add_subcommand("sample", "Sample images with and without identity");
    SampleArgs sa;
    std::optional<int> k_steps;
    std::optional<double> cfg, id_weight;
    sample->add_option("--ckpt", sa.ckpt, "Adapter checkpoint");
    sample->add_option("--prompt-tokens", sa.prompt, "Caption words or token ids")->capture_default_str();
    sample->add_option("--id-image", sa.id, "Identity index of the reference image");
    sample->add_option("--steps", k_steps);
    sample->add_option("--cfg", cfg);
    sample->add_option("--id-weight", id_weight);
    sample->add_option("--seed", seed);
    sample->add_option("--count", sa.count)->check(CLI::Range(1, 64))->capture_default_str();
    sample->add_option("--out", sa.out);

    auto* eval = app.add_subcommand("eval", "Score an adapter on held-out identities");
    std::string eval_ckpt, eval_out, split = "held-out";
    std::optional<int> eval_seeds;
    eval->add_option("--ckpt", eval_ckpt)->required();
    eval->add_option("--split", split)->check(CLI::IsMember({"held-out"}))->capture_default_str();
    eval->add_option("--seeds", eval_seeds);
    eval->add_option("--out", eval_out);

    auto* ablate = app.add_subcommand("ablate", "Train every stage variant per seed and compare");
    std::string lineage, ablate_out;
    std::optional<int> ablate_seeds;
    ablate->add_option("--lineage", lineage, "Run directory holding data and backbones");
    ablate->add_option("--seeds", ablate_seeds);
    ablate->add_option("--out", ablate_out);

    auto* timing = app.add_subcommand("timing", "Time ID-loss iterations against backprop depth");
    TimingArgs ta;
    timing->add_option("--ckpt", ta.ckpt);
    timing->add_option("--bp", ta.bp, "Backprop depths, comma separated")->capture_default_str();
    timing->add_option("--iters", ta.iters)->capture_default_str();
    timing->add_option("--batch", ta.batch)->capture_default_str();
    timing->add_option("--out", ta.out);

    auto* grid = app.add_subcommand("plot-grid", "Grid of held-out identities across evaluation prompts");
    std::string grid_ckpt, grid_out;
    int grid_ids = 4;
    grid->add_option("--ckpt", grid_ckpt)->required();
    grid->add_option("--ids", grid_ids)->check(CLI::Range(1, 1000))->capture_default_str();
    grid->add_option("--out", grid_out);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e, out, err);
        }
        error_line(err, "usage", e.what());
        return kExitUsage;
    }

    try {
        if (!lineage.empty()) {
            common.run = lineage;
        }
        RunConfig c = resolve_config(common);
        override_field(c, "n_ids", n_ids);
        override_field(c, "scenes_per_id", scenes);
        override_field(c, "data_seed", data_seed);
        override_field(c, "seed", seed);
        override_field(c, "steps", k_steps);
        override_field(c, "cfg", cfg);
        override_field(c, "id_weight", id_weight);
        override_field(c, "eval_seeds", eval_seeds);
        override_field(c, "ablation_seeds", ablate_seeds);
        std::optional<Stage> stage;
        if (*train) {
            stage = parse_stage(stage_text);
            const char* key = *stage == Stage::stage1  ? "stage1_steps"
                              : *stage == Stage::naive ? "naive_steps"
                              : *stage == Stage::stage2 ? "stage2_steps"
                                                        : "stage3_steps";
            override_field(c, key, train_steps);
        }
        if (*pre) {
            const char* key = which == "base" ? "base_steps" : which == "joint" ? "joint_steps" : "face_steps";
            override_field(c, key, pre_steps);
        }
        c = validate_config(echo_config(c));
        const Run run(common, c);
        if (*gen) return cmd_gen_data(run, data_out, out);
        if (*pre) return cmd_pretrain(run, which, out);
        if (*train) return cmd_train(run, *stage, resume, out);
        if (*sample) return cmd_sample(run, sa, out);
        if (*eval) return cmd_eval(run, eval_ckpt, eval_out, out);
        if (*ablate) return cmd_ablate(run, ablate_out, out);
        if (*timing) return cmd_timing(run, ta, out);
        return cmd_plot_grid(run, grid_ckpt, grid_ids, grid_out, out);
    } catch (const ConfigError& e) {
        error_line(err, "config", e.what(), e.field());
        return kExitUsage;
    } catch (const ContractError& e) {
        error_line(err, "contract", e.what());
    } catch (const VersionError& e) {
        error_line(err, "version", e.what());
    } catch (const FrozenParameterError& e) {
        error_line(err, "frozen", e.what());
    } catch (const NonFiniteError& e) {
        error_line(err, "nonfinite", e.what());
    } catch (const std::exception& e) {
        error_line(err, "internal", e.what());
    }
    return kExitFailure;
}

int dispatch(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dispatch(args, std::cout, std::cerr);
}

}  // namespace idalign
