// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/nn.hpp"

#include <cmath>
#include <cstring>

#include "idalign/errors.hpp"

namespace idalign {

int Rng::below(int n) {
    require(n > 0, "Rng::below requires n > 0");
    return static_cast<int>(std::uniform_int_distribution<int>(0, n - 1)(engine_));
}

Tensor Rng::normal_tensor(const Shape& shape, double stddev) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) {
        t[i] = stddev * normal();
    }
    return t;
}

Linear::Linear(int in, int out, Rng& rng, bool with_bias, double gain)
    : weight(rng.normal_tensor({in, out}, gain / std::sqrt(static_cast<double>(in))), true) {
    if (with_bias) {
        bias = Var(Tensor({out}, 0.0), true);
    }
}

Var Linear::operator()(const Var& x) const {
    Var y = matmul(x, weight);
    return bias.defined() ? add_bias(y, bias) : y;
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) {
        out.push_back({prefix + ".bias", bias});
    }
}

Conv2d::Conv2d(int in, int out, int k, int s, int p, Rng& rng, double gain)
    : weight(rng.normal_tensor({k * k * in, out}, gain * std::sqrt(2.0 / (k * k * in))), true),
      bias(Tensor({out}, 0.0), true),
      kernel(k),
      stride(s),
      pad(p) {}

Var Conv2d::operator()(const Var& x) const { return conv2d(x, weight, bias, kernel, stride, pad); }

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(int dim) : gamma(Tensor({dim}, 1.0), true), beta(Tensor({dim}, 0.0), true) {}

Var LayerNorm::operator()(const Var& x) const { return layer_norm(x, gamma, beta); }

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

void set_trainable(const ParamList& params, bool trainable) {
    for (const auto& p : params) {
        Var v = p.var;
        v.set_requires_grad(trainable);
    }
}

void zero_grads(const ParamList& params) {
    for (const auto& p : params) {
        Var v = p.var;
        v.zero_grad();
    }
}

std::size_t count_scalars(const ParamList& params) {
    std::size_t n = 0;
    for (const auto& p : params) {
        n += p.var.value().numel();
    }
    return n;
}

std::vector<Tensor> snapshot(const ParamList& params) {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& p : params) {
        out.push_back(p.var.value());
    }
    return out;
}

bool matches_snapshot(const ParamList& params, const std::vector<Tensor>& snap) {
    if (params.size() != snap.size()) {
        return false;
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!bitwise_equal(params[i].var.value(), snap[i])) {
            return false;
        }
    }
    return true;
}

std::uint64_t fingerprint(const ParamList& params) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& p : params) {
        mix(p.name.data(), p.name.size());
        for (int d : p.var.shape()) {
            mix(&d, sizeof d);
        }
        mix(p.var.value().data(), p.var.value().numel() * sizeof(double));
    }
    return h;
}

Adam::Adam(ParamList params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
        if (!p.var.requires_grad()) {
            throw FrozenParameterError("optimizer refuses frozen parameter '" + p.name + "'");
        }
        m_.emplace_back(p.var.shape(), 0.0);
        v_.emplace_back(p.var.shape(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    double scale_factor = 1.0;
    if (config_.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& p : params_) {
            if (p.var.has_grad()) {
                for (double g : p.var.grad().values()) {
                    sq += g * g;
                }
            }
        }
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) {
            throw NonFiniteError("non-finite gradient norm", t_);
        }
        if (norm > config_.clip_norm) {
            scale_factor = config_.clip_norm / norm;
        }
    }
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Var v = params_[i].var;
        if (!v.requires_grad()) {
            throw FrozenParameterError("parameter '" + params_[i].name + "' was frozen after optimizer creation");
        }
        if (!v.has_grad()) {
            continue;
        }
        Tensor& w = v.mutable_value();
        const Tensor& g = v.grad();
        for (std::size_t j = 0; j < w.numel(); ++j) {
            const double gj = g[j] * scale_factor;
            m_[i][j] = b1 * m_[i][j] + (1.0 - b1) * gj;
            v_[i][j] = b2 * v_[i][j] + (1.0 - b2) * gj * gj;
            w[j] -= config_.learning_rate * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + config_.epsilon);
        }
    }
    zero_grad();
}

void Adam::zero_grad() { zero_grads(params_); }

}  // namespace idalign
