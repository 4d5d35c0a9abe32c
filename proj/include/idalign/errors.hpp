// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace idalign {

/// Violated precondition: bad shapes, out-of-range timesteps, empty inputs.
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A loss or activation became NaN/Inf during training or evaluation.
class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(const std::string& what, long step)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

/// Checkpoint or archive does not match the expected layout/census.
class VersionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A parameter flagged frozen was about to change.
class FrozenParameterError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Invalid run configuration; names the offending field.
class ConfigError : public std::invalid_argument {
public:
    ConfigError(const std::string& field, const std::string& why)
        : std::invalid_argument("config field '" + field + "': " + why), field_(field) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw ContractError(msg);
    }
}

}  // namespace idalign
