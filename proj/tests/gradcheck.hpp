// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient checks shared by the unit tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "idalign/autograd.hpp"

namespace idalign::testing {

/// Norm-wise relative error ||a - n|| / max(||a||, ||n||, tiny).
inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
    double diff = 0.0;
    double na = 0.0;
    double nn = 0.0;
    for (std::size_t i = 0; i < analytic.numel(); ++i) {
        diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        na += analytic[i] * analytic[i];
        nn += numeric[i] * numeric[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-300});
}

/// Worst relative error across the inputs of a scalar-valued function.
inline double max_grad_error(const std::function<Var(const std::vector<Var>&)>& fn,
                             std::vector<Var> inputs, double h = 1e-5) {
    for (auto& v : inputs) {
        v.zero_grad();
    }
    Var out = fn(inputs);
    out.backward();
    double worst = 0.0;
    for (auto& v : inputs) {
        if (!v.requires_grad()) {
            continue;
        }
        Tensor analytic = v.has_grad() ? v.grad() : Tensor(v.shape(), 0.0);
        Tensor numeric(v.shape(), 0.0);
        NoGradGuard guard;
        for (std::size_t i = 0; i < numeric.numel(); ++i) {
            const double keep = v.mutable_value()[i];
            v.mutable_value()[i] = keep + h;
            const double up = fn(inputs).item();
            v.mutable_value()[i] = keep - h;
            const double down = fn(inputs).item();
            v.mutable_value()[i] = keep;
            numeric[i] = (up - down) / (2.0 * h);
        }
        worst = std::max(worst, relative_error(analytic, numeric));
    }
    return worst;
}

/// Relative error over a handful of entries of one parameter; other inputs may
/// also require grad.
inline double probe_grad_error(const std::function<Var()>& fn, Var param, const std::vector<std::size_t>& entries,
                               double h = 1e-5) {
    param.zero_grad();
    fn().backward();
    Tensor analytic({static_cast<int>(entries.size())});
    Tensor numeric({static_cast<int>(entries.size())});
    for (std::size_t k = 0; k < entries.size(); ++k) {
        analytic[k] = param.has_grad() ? param.grad()[entries[k]] : 0.0;
    }
    param.zero_grad();
    NoGradGuard guard;
    for (std::size_t k = 0; k < entries.size(); ++k) {
        double& v = param.mutable_value()[entries[k]];
        const double keep = v;
        v = keep + h;
        const double up = fn().item();
        v = keep - h;
        const double down = fn().item();
        v = keep;
        numeric[k] = (up - down) / (2.0 * h);
    }
    return relative_error(analytic, numeric);
}

/// Evenly spread entries of a parameter with n elements.
inline std::vector<std::size_t> spread_entries(std::size_t n, std::size_t count = 16) {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < count; ++k) {
        out.push_back((k * n) / count + (n / count) / 2);
    }
    return out;
}

}  // namespace idalign::testing
