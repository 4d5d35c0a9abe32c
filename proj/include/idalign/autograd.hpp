// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over Tensor values.
//
// Every op returns a Var. A result records its inputs and a backward closure
// only when gradient recording is enabled and at least one input requires a
// gradient, so frozen sub-graphs cost nothing beyond the forward pass.
//
// Layout conventions:
//   feature maps      [B, H, W, C]   (channel-last, so H*W rows feed GEMMs)
//   token sequences   [B, L, D]
//   linear weights    [in, out]      (y = x W + b)
//   conv weights      [kh*kw*Cin, Cout], rows ordered (ky, kx, cin)

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "idalign/tensor.hpp"

namespace idalign {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    /// Gradient buffer, zero-initialized on first use.
    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const noexcept { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    /// Direct access for optimizers and loaders; bypasses the graph.
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool has_grad() const { return defined() && !node_->grad.empty(); }
    void zero_grad();
    bool requires_grad() const { return defined() && node_->requires_grad; }
    void set_requires_grad(bool flag);
    const Shape& shape() const { return node_->value.shape(); }
    int dim(int i) const { return node_->value.dim(i); }
    double item() const { return node_->value.item(); }
    const std::shared_ptr<Node>& node() const { return node_; }

    /// Back-propagates from this scalar, accumulating into leaf gradients.
    /// Interior gradients are released afterwards, so a graph may be reused.
    void backward() const;

private:
    std::shared_ptr<Node> node_;
};

bool grad_enabled() noexcept;

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

Var constant(Tensor value);
Var detach(const Var& x);

// --- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// a * sa + b * sb
Var axpby(const Var& a, double sa, const Var& b, double sb);
Var add_scalar(const Var& a, double s);
/// Multiplies sample b of x[B, ...] by s[b].
Var scale_per_sample(const Var& x, const std::vector<double>& s);
Var square(const Var& a);
Var silu(const Var& a);
Var gelu(const Var& a);
Var clamp(const Var& a, double lo, double hi);

// --- broadcasting ----------------------------------------------------------
/// x[..., C] + bias[C]
Var add_bias(const Var& x, const Var& bias);
/// x[B, ..., C] + v[B, C]
Var add_per_sample(const Var& x, const Var& v);

// --- linear algebra --------------------------------------------------------
/// x[..., K] * w[K, N] -> [..., N]
Var matmul(const Var& x, const Var& w);
/// Batched product of [B, M, K] with [B, K, N] (or [B, N, K] when transpose_b).
Var bmm(const Var& a, const Var& b, bool transpose_b = false);

// --- normalization / attention ----------------------------------------------
/// Softmax over the last dimension. key_mask, when given, is [B, L] of 0/1 for
/// a [B, M, L] input; masked keys get zero weight unless a whole row is masked.
Var softmax_lastdim(const Var& x, const Tensor* key_mask = nullptr);
/// Normalizes over the last dimension; gamma/beta may be undefined.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_normalize_lastdim(const Var& x, double eps = 1e-12);

// --- shape -----------------------------------------------------------------
Var reshape(const Var& x, Shape shape);
Var concat_lastdim(const Var& a, const Var& b);
Var concat_dim0(const std::vector<Var>& parts);
Var slice_dim0(const Var& x, int begin, int count);
/// Gathers rows of table[V, D] by token id -> [B, L, D].
Var embedding(const Var& table, const std::vector<int>& tokens, int batch, int length);

// --- spatial (feature maps [B, H, W, C]) -------------------------------------
Var conv2d(const Var& x, const Var& w, const Var& bias, int kernel, int stride, int pad);
Var upsample2x(const Var& x);
Var crop(const Var& x, int y0, int x0, int h, int w);
Var flip_horizontal(const Var& x);
/// Average-pools to a grid x grid map.
Var adaptive_avg_pool(const Var& x, int grid);

// --- reductions / losses -----------------------------------------------------
Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var mse(const Var& a, const Var& b);
/// Row-wise dot product over the last dimension -> [rows].
Var dot_lastdim(const Var& a, const Var& b);
/// Mean softmax cross-entropy of logits[B, C] against integer labels.
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

}  // namespace idalign
