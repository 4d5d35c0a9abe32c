// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "idalign/checkpoint.hpp"
#include "idalign/cli.hpp"
#include "idalign/config.hpp"
#include "idalign/errors.hpp"

namespace idalign {
namespace {

namespace fs = std::filesystem;

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = dispatch(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    return p;
}

TEST(Config, EmptyTextGivesDefaults) {
    const RunConfig c = validate_config("");
    EXPECT_EQ(c, RunConfig{});
    EXPECT_DOUBLE_EQ(c.lambda_sem, 0.6);
    EXPECT_DOUBLE_EQ(c.lambda_layout, 0.1);
    EXPECT_DOUBLE_EQ(c.lambda_id, 1.0);
    EXPECT_EQ(c.steps, 4);
    EXPECT_DOUBLE_EQ(c.cfg, 1.2);
    EXPECT_EQ(c.bp_last_k, 4);
}

TEST(Config, EchoRoundTripIsIdempotent) {
    RunConfig c;
    c.lambda_sem = 0.25;
    c.stage3_steps = 17;
    c.seed = 9;
    const std::string text = echo_config(c);
    const RunConfig back = validate_config(text);
    EXPECT_EQ(back, c);
    EXPECT_EQ(echo_config(back), text);
    EXPECT_EQ(config_hash(back), config_hash(c));
    EXPECT_NE(config_hash(c), config_hash(RunConfig{}));
}

TEST(Config, BadFieldsAreNamed) {
    auto field_of = [](const std::string& text) {
        try {
            validate_config(text);
        } catch (const ConfigError& e) {
            return e.field();
        }
        return std::string("<none>");
    };
    EXPECT_EQ(field_of("lambda_sem = -1"), "lambda_sem");
    EXPECT_EQ(field_of("steps = 0"), "steps");
    EXPECT_EQ(field_of("no_such_field = 1"), "no_such_field");
    EXPECT_EQ(field_of("lambda_id = abc"), "lambda_id");
    EXPECT_EQ(field_of("train_steps_k = 2\nbp_last_k = 3"), "bp_last_k");
}

TEST(Config, StageAndEvalDerivation) {
    RunConfig c;
    c.stage2_steps = 33;
    c.lambda_sem = 0.5;
    const StageConfig s2 = c.stage_config(Stage::stage2);
    EXPECT_EQ(s2.steps, 33);
    EXPECT_DOUBLE_EQ(s2.learning_rate, c.lr_later);
    EXPECT_DOUBLE_EQ(s2.weights.lambda_sem, 0.5);
    EXPECT_DOUBLE_EQ(s2.plan.cfg_scale, c.train_cfg);
    EXPECT_NE(c.stage_config(Stage::stage1).seed, s2.seed);
    const EvalConfig e = c.eval_config();
    EXPECT_EQ(static_cast<int>(e.seeds.size()), c.eval_seeds);
    EXPECT_EQ(e.plan.steps, 4);
    EXPECT_DOUBLE_EQ(e.plan.cfg_scale, 1.2);
    EXPECT_EQ(static_cast<int>(c.ablation_config().seeds.size()), c.ablation_seeds);
}

TEST(Cli, HelpExitsZero) {
    EXPECT_EQ(run({"--help"}).code, kExitOk);
    EXPECT_EQ(run({"train", "--help"}).code, kExitOk);
}

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run({}).code, kExitUsage);
    EXPECT_EQ(run({"bogus"}).code, kExitUsage);
    EXPECT_EQ(run({"pretrain", "--which", "nothing"}).code, kExitUsage);
}

TEST(Cli, ConfigErrorNamesTheField) {
    const fs::path dir = fresh_dir("idalign_cli_cfg");
    const Result r = run({"--run", dir.string(), "--set", "lambda_sem=-1", "gen-data", "--n-ids", "4"});
    EXPECT_EQ(r.code, kExitUsage);
    const auto j = nlohmann::json::parse(r.err.substr(0, r.err.find('\n')));
    EXPECT_EQ(j.at("error"), "config");
    EXPECT_EQ(j.at("field"), "lambda_sem");
    fs::remove_all(dir);
}

TEST(Cli, MissingCheckpointExitsOne) {
    const fs::path dir = fresh_dir("idalign_cli_missing");
    const Result r = run({"--run", dir.string(), "eval", "--ckpt", (dir / "none.ckpt").string()});
    EXPECT_EQ(r.code, kExitFailure);
    EXPECT_FALSE(r.err.empty());
    fs::remove_all(dir);
}

TEST(Cli, TinyPipelineWritesTheRunLayout) {
    const fs::path dir = fresh_dir("idalign_cli_run");
    const std::string rd = dir.string();
    auto ok = [&](std::vector<std::string> args) {
        args.insert(args.begin(), {"--run", rd});
        const Result r = run(args);
        EXPECT_EQ(r.code, kExitOk) << r.err;
        return r;
    };
    ok({"--set", "eval_seeds=1", "--set", "batch_size=2", "--set", "id_batch=1", "gen-data", "--n-ids", "10",
        "--scenes-per-id", "3", "--seed", "4"});
    EXPECT_TRUE(fs::exists(dir / "config.resolved"));
    EXPECT_TRUE(fs::exists(dir / "data" / "manifest.jsonl"));
    for (const char* which : {"face", "eval-face", "joint", "base"}) {
        ok({"pretrain", "--which", which, "--steps", "1"});
    }
    ok({"train", "--stage", "1", "--steps", "1"});
    ok({"train", "--stage", "2", "--steps", "1"});
    for (const char* sub : {"ckpt", "logs", "reports", "grids"}) {
        EXPECT_TRUE(fs::is_directory(dir / sub)) << sub;
    }
    for (const char* f : {"base", "face", "eval_face", "joint", "stage1", "stage2"}) {
        EXPECT_TRUE(fs::exists(dir / "ckpt" / (std::string(f) + ".ckpt"))) << f;
    }
    const Checkpoint ck = load_checkpoint(dir / "ckpt" / "stage2.ckpt");
    EXPECT_EQ(ck.meta.at("seed"), 0);
    EXPECT_EQ(ck.meta.at("arch").at("id_tokens"), 10);
    EXPECT_EQ(validate_config(ck.meta.at("config").get<std::string>()).eval_seeds, 1);

    std::ifstream log(dir / "logs" / "train_stage2.jsonl");
    std::string line;
    ASSERT_TRUE(std::getline(log, line));
    const auto step = nlohmann::json::parse(line);
    EXPECT_TRUE(step.contains("l_id"));

    ok({"eval", "--ckpt", (dir / "ckpt" / "stage2.ckpt").string(), "--out", (dir / "reports" / "m.jsonl").string()});
    EXPECT_TRUE(fs::exists(dir / "reports" / "m.jsonl"));
    ok({"sample", "--ckpt", (dir / "ckpt" / "stage2.ckpt").string(), "--count", "2", "--out",
        (dir / "grids" / "s.png").string()});
    EXPECT_TRUE(fs::exists(dir / "grids" / "s.png"));
    EXPECT_TRUE(fs::exists(dir / "grids" / "s.png.txt"));
    fs::remove_all(dir);
}

}  // namespace
}  // namespace idalign
