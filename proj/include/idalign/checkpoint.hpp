// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary container: magic, format version, a JSON metadata record,
// then named float64 arrays in census order.

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "idalign/nn.hpp"

namespace idalign {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> arrays;

    const Tensor* find(const std::string& name) const;
};

Checkpoint make_checkpoint(const ParamList& params, nlohmann::json meta);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies arrays into params. The checkpoint must carry exactly the same
/// census (names, order, shapes) restricted to prefix; VersionError otherwise.
void load_into(const Checkpoint& ckpt, const ParamList& params, const std::string& prefix = "");

/// Merges several parameter lists into one container.
Checkpoint merge_checkpoints(const std::vector<const Checkpoint*>& parts, nlohmann::json meta);

}  // namespace idalign
