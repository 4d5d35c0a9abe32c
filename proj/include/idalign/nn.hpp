// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Layer building blocks, parameter registries, and the Adam optimizer.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "idalign/autograd.hpp"

namespace idalign {

/// Seeded generator shared by initializers, data shuffling, and noise draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    /// Uniform integer in [0, n).
    int below(int n);
    std::uint64_t next_u64() { return engine_(); }
    Tensor normal_tensor(const Shape& shape, double stddev = 1.0);
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

struct NamedParam {
    std::string name;
    Var var;
};

using ParamList = std::vector<NamedParam>;

struct Linear {
    Var weight;  // [in, out]
    Var bias;    // [out], may be undefined

    Linear() = default;
    Linear(int in, int out, Rng& rng, bool with_bias = true, double gain = 1.0);
    Var operator()(const Var& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

struct Conv2d {
    Var weight;  // [k*k*in, out]
    Var bias;    // [out]
    int kernel = 3;
    int stride = 1;
    int pad = 1;

    Conv2d() = default;
    Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng, double gain = 1.0);
    Var operator()(const Var& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

/// Learned affine layer norm over the last dimension.
struct LayerNorm {
    Var gamma;
    Var beta;

    LayerNorm() = default;
    explicit LayerNorm(int dim);
    Var operator()(const Var& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

void set_trainable(const ParamList& params, bool trainable);
void zero_grads(const ParamList& params);
std::size_t count_scalars(const ParamList& params);

/// Deep copy of parameter values in census order.
std::vector<Tensor> snapshot(const ParamList& params);
/// True when every parameter is bit-identical to the snapshot.
bool matches_snapshot(const ParamList& params, const std::vector<Tensor>& snap);
/// 64-bit FNV-1a over names, shapes, and raw value bytes.
std::uint64_t fingerprint(const ParamList& params);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    /// Global gradient-norm clip; <= 0 disables.
    double clip_norm = 1.0;
};

class Adam {
public:
    /// Throws FrozenParameterError if any parameter does not require grad.
    Adam(ParamList params, AdamConfig config);
    /// Applies one update from the accumulated gradients, then zeroes them.
    void step();
    void zero_grad();
    long steps() const noexcept { return t_; }
    const ParamList& params() const noexcept { return params_; }
    void set_learning_rate(double lr) { config_.learning_rate = lr; }

private:
    ParamList params_;
    AdamConfig config_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    long t_ = 0;
};

}  // namespace idalign
