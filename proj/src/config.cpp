// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <variant>
#include <vector>

#include "idalign/errors.hpp"

namespace idalign {

namespace {

using Member = std::variant<int RunConfig::*, double RunConfig::*, std::uint64_t RunConfig::*>;

struct Field {
    const char* name;
    Member member;
    double lo;
    double hi;
};

constexpr double kInf = 1e300;

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"seed", &RunConfig::seed, 0, kInf},
        {"n_ids", &RunConfig::n_ids, 2, 100000},
        {"scenes_per_id", &RunConfig::scenes_per_id, 1, 100000},
        {"data_seed", &RunConfig::data_seed, 0, kInf},
        {"base_steps", &RunConfig::base_steps, 0, 1e9},
        {"base_batch", &RunConfig::base_batch, 1, 4096},
        {"base_lr", &RunConfig::base_lr, 1e-12, 10},
        {"face_steps", &RunConfig::face_steps, 0, 1e9},
        {"face_width", &RunConfig::face_width, 1, 512},
        {"eval_face_width", &RunConfig::eval_face_width, 1, 512},
        {"joint_steps", &RunConfig::joint_steps, 0, 1e9},
        {"encoder_batch", &RunConfig::encoder_batch, 2, 4096},
        {"encoder_lr", &RunConfig::encoder_lr, 1e-12, 10},
        {"stage1_steps", &RunConfig::stage1_steps, 0, 1e9},
        {"naive_steps", &RunConfig::naive_steps, 0, 1e9},
        {"stage2_steps", &RunConfig::stage2_steps, 0, 1e9},
        {"stage3_steps", &RunConfig::stage3_steps, 0, 1e9},
        {"batch_size", &RunConfig::batch_size, 1, 4096},
        {"id_batch", &RunConfig::id_batch, 1, 4096},
        {"lr_stage1", &RunConfig::lr_stage1, 1e-12, 10},
        {"lr_later", &RunConfig::lr_later, 1e-12, 10},
        {"lambda_sem", &RunConfig::lambda_sem, 0, kInf},
        {"lambda_layout", &RunConfig::lambda_layout, 0, kInf},
        {"lambda_id", &RunConfig::lambda_id, 0, kInf},
        {"train_steps_k", &RunConfig::train_steps_k, 1, 1000},
        {"train_cfg", &RunConfig::train_cfg, 0, 100},
        {"bp_last_k", &RunConfig::bp_last_k, 1, 1000},
        {"id_weight", &RunConfig::id_weight, 0, 100},
        {"steps", &RunConfig::steps, 1, 1000},
        {"cfg", &RunConfig::cfg, 0, 100},
        {"eval_seeds", &RunConfig::eval_seeds, 1, 64},
        {"eval_ids", &RunConfig::eval_ids, 0, 100000},
        {"ablation_seeds", &RunConfig::ablation_seeds, 1, 64},
        {"eval_embedder", &RunConfig::eval_embedder, 0, 1},
    };
    return table;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

void check_cross_fields(const RunConfig& c) {
    if (c.bp_last_k > c.train_steps_k) {
        throw ConfigError("bp_last_k", "must not exceed train_steps_k (" + std::to_string(c.train_steps_k) + ")");
    }
}

}  // namespace

void set_config_field(RunConfig& config, const std::string& key, const std::string& value) {
    for (const Field& f : fields()) {
        if (key != f.name) {
            continue;
        }
        std::visit(
            [&](auto member) {
                using T = std::remove_reference_t<decltype(config.*member)>;
                T parsed{};
                if constexpr (std::is_same_v<T, double>) {
                    std::size_t used = 0;
                    try {
                        parsed = std::stod(value, &used);
                    } catch (const std::exception&) {
                        used = 0;
                    }
                    if (used == 0 || used != value.size() || !std::isfinite(parsed)) {
                        throw ConfigError(f.name, "expected a finite number, got '" + value + "'");
                    }
                } else {
                    const auto* end = value.data() + value.size();
                    const auto res = std::from_chars(value.data(), end, parsed);
                    if (value.empty() || res.ec != std::errc() || res.ptr != end) {
                        throw ConfigError(f.name, "expected an integer, got '" + value + "'");
                    }
                }
                const double as_double = static_cast<double>(parsed);
                if (as_double < f.lo || as_double > f.hi) {
                    throw ConfigError(f.name, "value " + value + " outside [" + format_double(f.lo) + ", " +
                                                  (f.hi >= kInf ? std::string("inf") : format_double(f.hi)) + "]");
                }
                config.*member = parsed;
            },
            f.member);
        return;
    }
    throw ConfigError(key, "unknown field");
}

RunConfig validate_config(const std::string& text) {
    RunConfig c;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.resize(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno), "expected 'key = value'");
        }
        set_config_field(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    check_cross_fields(c);
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw ConfigError("config", "cannot read " + path);
    }
    std::ostringstream os;
    os << is.rdbuf();
    return validate_config(os.str());
}

std::string echo_config(const RunConfig& config) {
    std::ostringstream os;
    for (const Field& f : fields()) {
        os << f.name << " = ";
        std::visit(
            [&](auto member) {
                const auto v = config.*member;
                if constexpr (std::is_same_v<std::remove_cv_t<decltype(v)>, double>) {
                    os << format_double(v);
                } else {
                    os << v;
                }
            },
            f.member);
        os << '\n';
    }
    return os.str();
}

std::uint64_t config_hash(const RunConfig& config) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : echo_config(config)) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

StageConfig RunConfig::stage_config(Stage stage) const {
    StageConfig c = default_stage_config(stage);
    c.batch_size = batch_size;
    c.id_batch = id_batch;
    c.weights = weights();
    c.id_weight = id_weight;
    c.plan = SamplerPlan{train_steps_k, train_cfg, bp_last_k, -1};
    c.seed = seed * 31ULL + static_cast<std::uint64_t>(stage) + 1;
    switch (stage) {
        case Stage::stage1:
            c.steps = stage1_steps;
            c.learning_rate = lr_stage1;
            break;
        case Stage::naive:
            c.steps = naive_steps;
            c.learning_rate = lr_later;
            break;
        case Stage::stage2:
            c.steps = stage2_steps;
            c.learning_rate = lr_later;
            break;
        case Stage::stage3:
            c.steps = stage3_steps;
            c.learning_rate = lr_later;
            break;
    }
    return c;
}

EvalConfig RunConfig::eval_config() const {
    EvalConfig e;
    e.seeds.clear();
    for (int i = 0; i < eval_seeds; ++i) {
        e.seeds.push_back(101ULL * static_cast<std::uint64_t>(i + 1));
    }
    e.plan = SamplerPlan{steps, cfg, 1, -1};
    e.id_weight = id_weight;
    e.use_eval_embedder = eval_embedder != 0;
    return e;
}

AblationConfig RunConfig::ablation_config() const {
    AblationConfig a;
    a.seeds.clear();
    for (int i = 0; i < ablation_seeds; ++i) {
        a.seeds.push_back(seed + static_cast<std::uint64_t>(i) + 1);
    }
    a.stage1 = stage_config(Stage::stage1);
    a.naive = stage_config(Stage::naive);
    a.stage2 = stage_config(Stage::stage2);
    a.stage3 = stage_config(Stage::stage3);
    a.eval = eval_config();
    return a;
}

}  // namespace idalign
