// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

#include "idalign/errors.hpp"

namespace idalign {

namespace {

thread_local bool g_grad_enabled = true;

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

CMapR cmat(const Tensor& t, Eigen::Index rows, Eigen::Index cols, std::size_t offset = 0) {
    return CMapR(t.data() + offset, rows, cols);
}
MapR mat(Tensor& t, Eigen::Index rows, Eigen::Index cols, std::size_t offset = 0) {
    return MapR(t.data() + offset, rows, cols);
}
CVecMap cvec(const Tensor& t) { return CVecMap(t.data(), static_cast<Eigen::Index>(t.numel())); }
VecMap vec(Tensor& t) { return VecMap(t.data(), static_cast<Eigen::Index>(t.numel())); }

using BackwardFn = std::function<void(Node&)>;

Var make_op(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        bool any = false;
        for (const Var& v : inputs) {
            any = any || v.requires_grad();
        }
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(inputs.size());
            for (const Var& v : inputs) {
                node->parents.push_back(v.node());
            }
            node->backward = std::move(backward);
        }
    }
    return Var(std::move(node));
}

Var make_op_vec(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            for (const Var& v : inputs) {
                node->parents.push_back(v.node());
            }
            node->backward = std::move(backward);
        }
    }
    return Var(std::move(node));
}

bool wants(const Node& out, std::size_t i) {
    return out.parents[i] && out.parents[i]->requires_grad;
}

Tensor& gbuf(Node& out, std::size_t i) { return out.parents[i]->grad_buffer(); }
const Tensor& pval(const Node& out, std::size_t i) { return out.parents[i]->value; }

void check_same_shape(const Var& a, const Var& b, const char* op) {
    require(a.defined() && b.defined(), std::string(op) + ": undefined operand");
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class F>
Var unary(const Var& a, F&& f, BackwardFn backward) {
    Tensor out(a.shape());
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < x.numel(); ++i) {
        out[i] = f(x[i]);
    }
    return make_op(std::move(out), {a}, std::move(backward));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

// --- Node / Var ----------------------------------------------------------------

Tensor& Node::grad_buffer() {
    if (grad.empty() && value.numel() > 0) {
        grad = Tensor(value.shape(), 0.0);
    }
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
    if (node_ && !node_->grad.empty()) {
        node_->grad.fill(0.0);
    }
}

void Var::set_requires_grad(bool flag) {
    require(node_ && !node_->backward, "set_requires_grad only applies to leaves");
    node_->requires_grad = flag;
}

void Var::backward() const {
    require(defined(), "backward on undefined Var");
    require(value().numel() == 1, "backward requires a scalar, got " + shape_str(shape()));
    if (!node_->requires_grad) {
        return;
    }
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p && p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) {
            n->backward(*n);
            n->grad = Tensor();
        }
    }
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Tensor value) { return Var(std::move(value), false); }

Var detach(const Var& x) { return Var(x.value(), false); }

// --- elementwise -----------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    vec(out) = cvec(a.value()) + cvec(b.value());
    return make_op(std::move(out), {a, b}, [](Node& o) {
        for (std::size_t i = 0; i < 2; ++i) {
            if (wants(o, i)) {
                vec(gbuf(o, i)) += cvec(o.grad);
            }
        }
    });
}

Var sub(const Var& a, const Var& b) { return axpby(a, 1.0, b, -1.0); }

Var axpby(const Var& a, double sa, const Var& b, double sb) {
    check_same_shape(a, b, "axpby");
    Tensor out(a.shape());
    vec(out) = sa * cvec(a.value()) + sb * cvec(b.value());
    return make_op(std::move(out), {a, b}, [sa, sb](Node& o) {
        if (wants(o, 0)) {
            vec(gbuf(o, 0)) += sa * cvec(o.grad);
        }
        if (wants(o, 1)) {
            vec(gbuf(o, 1)) += sb * cvec(o.grad);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    vec(out) = cvec(a.value()).cwiseProduct(cvec(b.value()));
    return make_op(std::move(out), {a, b}, [](Node& o) {
        if (wants(o, 0)) {
            vec(gbuf(o, 0)) += cvec(o.grad).cwiseProduct(cvec(pval(o, 1)));
        }
        if (wants(o, 1)) {
            vec(gbuf(o, 1)) += cvec(o.grad).cwiseProduct(cvec(pval(o, 0)));
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out(a.shape());
    vec(out) = s * cvec(a.value());
    return make_op(std::move(out), {a}, [s](Node& o) { vec(gbuf(o, 0)) += s * cvec(o.grad); });
}

Var add_scalar(const Var& a, double s) {
    Tensor out(a.shape());
    vec(out) = cvec(a.value()).array() + s;
    return make_op(std::move(out), {a}, [](Node& o) { vec(gbuf(o, 0)) += cvec(o.grad); });
}

Var scale_per_sample(const Var& x, const std::vector<double>& s) {
    require(x.value().rank() >= 1 && static_cast<int>(s.size()) == x.dim(0), "scale_per_sample: one factor per sample");
    const std::size_t stride = x.value().numel() / s.size();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = x.value()[i] * s[i / stride];
    }
    return make_op(std::move(out), {x}, [s, stride](Node& o) {
        Tensor& g = gbuf(o, 0);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            g[i] += o.grad[i] * s[i / stride];
        }
    });
}

Var square(const Var& a) {
    return unary(a, [](double x) { return x * x; }, [](Node& o) {
        vec(gbuf(o, 0)) += 2.0 * cvec(o.grad).cwiseProduct(cvec(pval(o, 0)));
    });
}

Var silu(const Var& a) {
    return unary(a, [](double x) { return x * sigmoid(x); }, [](Node& o) {
        const Tensor& x = pval(o, 0);
        Tensor& g = gbuf(o, 0);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double s = sigmoid(x[i]);
            g[i] += o.grad[i] * (s + x[i] * s * (1.0 - s));
        }
    });
}

Var gelu(const Var& a) {
    return unary(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
        [](Node& o) {
            const Tensor& x = pval(o, 0);
            Tensor& g = gbuf(o, 0);
            for (std::size_t i = 0; i < x.numel(); ++i) {
                const double v = x[i];
                const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
                const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
                g[i] += o.grad[i] * d;
            }
        });
}

Var clamp(const Var& a, double lo, double hi) {
    require(lo <= hi, "clamp: lo > hi");
    return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); }, [lo, hi](Node& o) {
        const Tensor& x = pval(o, 0);
        Tensor& g = gbuf(o, 0);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            if (x[i] > lo && x[i] < hi) {
                g[i] += o.grad[i];
            }
        }
    });
}

// --- broadcasting ---------------------------------------------------------------

Var add_bias(const Var& x, const Var& bias) {
    const int c = x.dim(-1);
    require(bias.value().numel() == static_cast<std::size_t>(c),
            "add_bias: bias size does not match channels of " + shape_str(x.shape()));
    const auto rows = static_cast<Eigen::Index>(x.value().numel() / c);
    Tensor out(x.shape());
    mat(out, rows, c) = cmat(x.value(), rows, c).rowwise() + cmat(bias.value(), 1, c).row(0);
    return make_op(std::move(out), {x, bias}, [rows, c](Node& o) {
        if (wants(o, 0)) {
            vec(gbuf(o, 0)) += cvec(o.grad);
        }
        if (wants(o, 1)) {
            mat(gbuf(o, 1), 1, c) += cmat(o.grad, rows, c).colwise().sum();
        }
    });
}

Var add_per_sample(const Var& x, const Var& v) {
    require(v.value().rank() == 2, "add_per_sample: v must be [B, C]");
    const int b = x.dim(0);
    const int c = x.dim(-1);
    require(v.dim(0) == b && v.dim(1) == c, "add_per_sample: shape mismatch");
    const auto rows = static_cast<Eigen::Index>(x.value().numel() / (static_cast<std::size_t>(b) * c));
    Tensor out(x.shape());
    for (int i = 0; i < b; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * rows * c;
        mat(out, rows, c, off) = cmat(x.value(), rows, c, off).rowwise() + cmat(v.value(), 1, c, static_cast<std::size_t>(i) * c).row(0);
    }
    return make_op(std::move(out), {x, v}, [b, rows, c](Node& o) {
        if (wants(o, 0)) {
            vec(gbuf(o, 0)) += cvec(o.grad);
        }
        if (wants(o, 1)) {
            Tensor& g = gbuf(o, 1);
            for (int i = 0; i < b; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * rows * c;
                mat(g, 1, c, static_cast<std::size_t>(i) * c) += cmat(o.grad, rows, c, off).colwise().sum();
            }
        }
    });
}

// --- linear algebra ----------------------------------------------------------------

Var matmul(const Var& x, const Var& w) {
    require(w.value().rank() == 2, "matmul: weight must be 2-D");
    const int k = w.dim(0);
    const int n = w.dim(1);
    require(x.dim(-1) == k, "matmul: inner dimension mismatch " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    const auto m = static_cast<Eigen::Index>(x.value().numel() / k);
    Shape shape = x.shape();
    shape.back() = n;
    Tensor out(shape);
    mat(out, m, n).noalias() = cmat(x.value(), m, k) * cmat(w.value(), k, n);
    return make_op(std::move(out), {x, w}, [m, k, n](Node& o) {
        if (wants(o, 0)) {
            mat(gbuf(o, 0), m, k).noalias() += cmat(o.grad, m, n) * cmat(pval(o, 1), k, n).transpose();
        }
        if (wants(o, 1)) {
            mat(gbuf(o, 1), k, n).noalias() += cmat(pval(o, 0), m, k).transpose() * cmat(o.grad, m, n);
        }
    });
}

Var bmm(const Var& a, const Var& b, bool transpose_b) {
    require(a.value().rank() == 3 && b.value().rank() == 3, "bmm: operands must be 3-D");
    const int bs = a.dim(0);
    const int m = a.dim(1);
    const int k = a.dim(2);
    require(b.dim(0) == bs, "bmm: batch mismatch");
    const int n = transpose_b ? b.dim(1) : b.dim(2);
    require((transpose_b ? b.dim(2) : b.dim(1)) == k,
            "bmm: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out({bs, m, n});
    const std::size_t sa = static_cast<std::size_t>(m) * k;
    const std::size_t sb = static_cast<std::size_t>(k) * n;
    const std::size_t so = static_cast<std::size_t>(m) * n;
    for (int i = 0; i < bs; ++i) {
        auto am = cmat(a.value(), m, k, i * sa);
        if (transpose_b) {
            mat(out, m, n, i * so).noalias() = am * cmat(b.value(), n, k, i * sb).transpose();
        } else {
            mat(out, m, n, i * so).noalias() = am * cmat(b.value(), k, n, i * sb);
        }
    }
    return make_op(std::move(out), {a, b}, [=](Node& o) {
        for (int i = 0; i < bs; ++i) {
            auto g = cmat(o.grad, m, n, i * so);
            if (wants(o, 0)) {
                if (transpose_b) {
                    mat(gbuf(o, 0), m, k, i * sa).noalias() += g * cmat(pval(o, 1), n, k, i * sb);
                } else {
                    mat(gbuf(o, 0), m, k, i * sa).noalias() += g * cmat(pval(o, 1), k, n, i * sb).transpose();
                }
            }
            if (wants(o, 1)) {
                auto am = cmat(pval(o, 0), m, k, i * sa);
                if (transpose_b) {
                    mat(gbuf(o, 1), n, k, i * sb).noalias() += g.transpose() * am;
                } else {
                    mat(gbuf(o, 1), k, n, i * sb).noalias() += am.transpose() * g;
                }
            }
        }
    });
}

// --- normalization / attention ------------------------------------------------------

Var softmax_lastdim(const Var& x, const Tensor* key_mask) {
    const int l = x.dim(-1);
    const std::size_t rows = x.value().numel() / l;
    std::size_t rows_per_batch = rows;
    if (key_mask != nullptr) {
        require(x.value().rank() == 3, "softmax_lastdim: masked input must be [B, M, L]");
        require(key_mask->rank() == 2 && key_mask->dim(0) == x.dim(0) && key_mask->dim(1) == l,
                "softmax_lastdim: mask must be [B, L]");
        rows_per_batch = static_cast<std::size_t>(x.dim(1));
    }
    Tensor out(x.shape());
    const Tensor& in = x.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = in.data() + r * l;
        double* dst = out.data() + r * l;
        const double* mask = key_mask ? key_mask->data() + (r / rows_per_batch) * l : nullptr;
        bool any_open = mask == nullptr;
        if (mask) {
            for (int j = 0; j < l; ++j) {
                any_open = any_open || mask[j] != 0.0;
            }
        }
        const bool use_mask = mask && any_open;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < l; ++j) {
            if (!use_mask || mask[j] != 0.0) {
                mx = std::max(mx, src[j]);
            }
        }
        double total = 0.0;
        for (int j = 0; j < l; ++j) {
            const double e = (!use_mask || mask[j] != 0.0) ? std::exp(src[j] - mx) : 0.0;
            dst[j] = e;
            total += e;
        }
        for (int j = 0; j < l; ++j) {
            dst[j] /= total;
        }
    }
    return make_op(std::move(out), {x}, [rows, l](Node& o) {
        Tensor& g = gbuf(o, 0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = o.value.data() + r * l;
            const double* gy = o.grad.data() + r * l;
            double dot = 0.0;
            for (int j = 0; j < l; ++j) {
                dot += gy[j] * y[j];
            }
            double* gx = g.data() + r * l;
            for (int j = 0; j < l; ++j) {
                gx[j] += y[j] * (gy[j] - dot);
            }
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const int d = x.dim(-1);
    const std::size_t rows = x.value().numel() / d;
    if (gamma.defined()) {
        require(gamma.value().numel() == static_cast<std::size_t>(d), "layer_norm: gamma size mismatch");
    }
    if (beta.defined()) {
        require(beta.value().numel() == static_cast<std::size_t>(d), "layer_norm: beta size mismatch");
    }
    auto xhat = std::make_shared<Tensor>(x.shape());
    auto inv_sigma = std::make_shared<std::vector<double>>(rows);
    Tensor out(x.shape());
    const Tensor& in = x.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = in.data() + r * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) {
            mean += src[j];
        }
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            var += (src[j] - mean) * (src[j] - mean);
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[r] = is;
        for (int j = 0; j < d; ++j) {
            const double h = (src[j] - mean) * is;
            (*xhat)[r * d + j] = h;
            double y = h;
            if (gamma.defined()) {
                y *= gamma.value()[j];
            }
            if (beta.defined()) {
                y += beta.value()[j];
            }
            out[r * d + j] = y;
        }
    }
    Var g = gamma.defined() ? gamma : Var();
    Var b = beta.defined() ? beta : Var();
    return make_op(std::move(out), {x, g, b}, [xhat, inv_sigma, rows, d](Node& o) {
        const bool has_gamma = o.parents[1] != nullptr;
        Buffer dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gy = o.grad.data() + r * d;
            const double* h = xhat->data() + r * d;
            double mean_dh = 0.0;
            double mean_dh_h = 0.0;
            for (int j = 0; j < d; ++j) {
                dh[j] = gy[j] * (has_gamma ? o.parents[1]->value[j] : 1.0);
                mean_dh += dh[j];
                mean_dh_h += dh[j] * h[j];
            }
            mean_dh /= d;
            mean_dh_h /= d;
            if (wants(o, 0)) {
                double* gx = gbuf(o, 0).data() + r * d;
                for (int j = 0; j < d; ++j) {
                    gx[j] += (*inv_sigma)[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                }
            }
            if (wants(o, 1)) {
                double* gg = gbuf(o, 1).data();
                for (int j = 0; j < d; ++j) {
                    gg[j] += gy[j] * h[j];
                }
            }
            if (wants(o, 2)) {
                double* gb = gbuf(o, 2).data();
                for (int j = 0; j < d; ++j) {
                    gb[j] += gy[j];
                }
            }
        }
    });
}

Var l2_normalize_lastdim(const Var& x, double eps) {
    const int d = x.dim(-1);
    const std::size_t rows = x.value().numel() / d;
    auto norms = std::make_shared<std::vector<double>>(rows);
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = x.value().data() + r * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            s += src[j] * src[j];
        }
        const double n = std::sqrt(s + eps * eps);
        (*norms)[r] = n;
        for (int j = 0; j < d; ++j) {
            out[r * d + j] = src[j] / n;
        }
    }
    return make_op(std::move(out), {x}, [norms, rows, d](Node& o) {
        Tensor& g = gbuf(o, 0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = o.value.data() + r * d;
            const double* gy = o.grad.data() + r * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) {
                dot += gy[j] * y[j];
            }
            for (int j = 0; j < d; ++j) {
                g[r * d + j] += (gy[j] - y[j] * dot) / (*norms)[r];
            }
        }
    });
}

// --- shape -------------------------------------------------------------------------

Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return make_op(std::move(out), {x}, [](Node& o) { vec(gbuf(o, 0)) += cvec(o.grad); });
}

Var concat_lastdim(const Var& a, const Var& b) {
    const int ca = a.dim(-1);
    const int cb = b.dim(-1);
    const std::size_t rows = a.value().numel() / ca;
    require(b.value().numel() / cb == rows, "concat_lastdim: row count mismatch");
    Shape shape = a.shape();
    shape.back() = ca + cb;
    Tensor out(shape);
    const int c = ca + cb;
    mat(out, rows, c).leftCols(ca) = cmat(a.value(), rows, ca);
    mat(out, rows, c).rightCols(cb) = cmat(b.value(), rows, cb);
    return make_op(std::move(out), {a, b}, [rows, ca, cb](Node& o) {
        const int c = ca + cb;
        if (wants(o, 0)) {
            mat(gbuf(o, 0), rows, ca) += cmat(o.grad, rows, c).leftCols(ca);
        }
        if (wants(o, 1)) {
            mat(gbuf(o, 1), rows, cb) += cmat(o.grad, rows, c).rightCols(cb);
        }
    });
}

Var concat_dim0(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_dim0: no inputs");
    Shape shape = parts[0].shape();
    require(!shape.empty(), "concat_dim0: scalars cannot be concatenated");
    int total = 0;
    for (const Var& p : parts) {
        Shape s = p.shape();
        require(s.size() == shape.size(), "concat_dim0: rank mismatch");
        total += s[0];
        s[0] = shape[0];
        require(s == shape, "concat_dim0: trailing shape mismatch");
    }
    shape[0] = total;
    Tensor out(shape);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const Var& p : parts) {
        offsets.push_back(off);
        std::copy(p.value().data(), p.value().data() + p.value().numel(), out.data() + off);
        off += p.value().numel();
    }
    return make_op_vec(std::move(out), parts, [offsets](Node& o) {
        for (std::size_t i = 0; i < o.parents.size(); ++i) {
            if (wants(o, i)) {
                Tensor& g = gbuf(o, i);
                for (std::size_t j = 0; j < g.numel(); ++j) {
                    g[j] += o.grad[offsets[i] + j];
                }
            }
        }
    });
}

Var slice_dim0(const Var& x, int begin, int count) {
    require(x.value().rank() >= 1, "slice_dim0: scalar input");
    require(begin >= 0 && count >= 0 && begin + count <= x.dim(0), "slice_dim0: range out of bounds");
    Shape shape = x.shape();
    const std::size_t stride = x.value().numel() / shape[0];
    shape[0] = count;
    Tensor out(shape);
    const std::size_t off = static_cast<std::size_t>(begin) * stride;
    std::copy(x.value().data() + off, x.value().data() + off + out.numel(), out.data());
    return make_op(std::move(out), {x}, [off](Node& o) {
        Tensor& g = gbuf(o, 0);
        for (std::size_t j = 0; j < o.grad.numel(); ++j) {
            g[off + j] += o.grad[j];
        }
    });
}

Var embedding(const Var& table, const std::vector<int>& tokens, int batch, int length) {
    require(table.value().rank() == 2, "embedding: table must be [V, D]");
    require(tokens.size() == static_cast<std::size_t>(batch) * length, "embedding: token count mismatch");
    const int v = table.dim(0);
    const int d = table.dim(1);
    Tensor out({batch, length, d});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        require(tokens[i] >= 0 && tokens[i] < v, "embedding: token id out of range");
        std::copy(table.value().data() + static_cast<std::size_t>(tokens[i]) * d,
                  table.value().data() + static_cast<std::size_t>(tokens[i] + 1) * d, out.data() + i * d);
    }
    return make_op(std::move(out), {table}, [tokens, d](Node& o) {
        Tensor& g = gbuf(o, 0);
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            for (int j = 0; j < d; ++j) {
                g[static_cast<std::size_t>(tokens[i]) * d + j] += o.grad[i * d + j];
            }
        }
    });
}

// --- spatial --------------------------------------------------------------------------

namespace {

struct ConvGeom {
    int b, h, w, c, kernel, stride, pad, ho, wo, kc;
};

// Fills rows [r0, r0 + n) of the im2col matrix into dst.
void im2col_rows(const ConvGeom& g, const double* src, std::size_t r0, std::size_t n, double* dst) {
    const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
    for (std::size_t r = r0; r < r0 + n; ++r) {
        const int img = static_cast<int>(r / plane);
        const int rem = static_cast<int>(r % plane);
        const int oy = rem / g.wo;
        const int ox = rem % g.wo;
        for (int ky = 0; ky < g.kernel; ++ky) {
            const int iy = oy * g.stride - g.pad + ky;
            for (int kx = 0; kx < g.kernel; ++kx) {
                const int ix = ox * g.stride - g.pad + kx;
                if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) {
                    std::memcpy(dst, src + ((static_cast<std::size_t>(img) * g.h + iy) * g.w + ix) * g.c,
                                sizeof(double) * g.c);
                } else {
                    std::memset(dst, 0, sizeof(double) * g.c);
                }
                dst += g.c;
            }
        }
    }
}

void col2im_rows(const ConvGeom& g, const double* dc, std::size_t r0, std::size_t n, double* gx) {
    const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
    for (std::size_t r = r0; r < r0 + n; ++r) {
        const int img = static_cast<int>(r / plane);
        const int rem = static_cast<int>(r % plane);
        const int oy = rem / g.wo;
        const int ox = rem % g.wo;
        for (int ky = 0; ky < g.kernel; ++ky) {
            const int iy = oy * g.stride - g.pad + ky;
            for (int kx = 0; kx < g.kernel; ++kx) {
                const int ix = ox * g.stride - g.pad + kx;
                if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) {
                    double* t = gx + ((static_cast<std::size_t>(img) * g.h + iy) * g.w + ix) * g.c;
                    for (int ch = 0; ch < g.c; ++ch) {
                        t[ch] += dc[ch];
                    }
                }
                dc += g.c;
            }
        }
    }
}

// Rows per im2col tile, sized to stay cache resident.
std::size_t conv_tile_rows(int kc) { return std::max<std::size_t>(32, 24576 / static_cast<std::size_t>(kc)); }

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, int kernel, int stride, int pad) {
    require(x.value().rank() == 4, "conv2d: input must be [B, H, W, C], got " + shape_str(x.shape()));
    ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel, stride, pad, 0, 0, 0};
    g.kc = kernel * kernel * g.c;
    require(w.value().rank() == 2 && w.dim(0) == g.kc,
            "conv2d: weight " + shape_str(w.shape()) + " does not match input channels " + std::to_string(g.c));
    const int oc = w.dim(1);
    g.ho = (g.h + 2 * pad - kernel) / stride + 1;
    g.wo = (g.w + 2 * pad - kernel) / stride + 1;
    require(g.ho > 0 && g.wo > 0, "conv2d: empty output");
    const std::size_t rows = static_cast<std::size_t>(g.b) * g.ho * g.wo;
    const std::size_t tile = conv_tile_rows(g.kc);
    const bool pointwise = kernel == 1 && stride == 1 && pad == 0;

    Tensor out({g.b, g.ho, g.wo, oc});
    if (pointwise) {
        mat(out, static_cast<Eigen::Index>(rows), oc).noalias() =
            cmat(x.value(), static_cast<Eigen::Index>(rows), g.c) * cmat(w.value(), g.kc, oc);
    } else {
        Buffer cols(tile * g.kc);
        for (std::size_t r0 = 0; r0 < rows; r0 += tile) {
            const std::size_t n = std::min(tile, rows - r0);
            im2col_rows(g, x.value().data(), r0, n, cols.data());
            mat(out, static_cast<Eigen::Index>(n), oc, r0 * oc).noalias() =
                CMapR(cols.data(), static_cast<Eigen::Index>(n), g.kc) * cmat(w.value(), g.kc, oc);
        }
    }
    if (bias.defined()) {
        require(bias.value().numel() == static_cast<std::size_t>(oc), "conv2d: bias size mismatch");
        mat(out, static_cast<Eigen::Index>(rows), oc).rowwise() += cmat(bias.value(), 1, oc).row(0);
    }
    Var bvar = bias.defined() ? bias : Var();
    return make_op(std::move(out), {x, w, bvar}, [=](Node& o) {
        const auto r = static_cast<Eigen::Index>(rows);
        const bool want_x = wants(o, 0);
        const bool want_w = wants(o, 1);
        if (wants(o, 2)) {
            mat(gbuf(o, 2), 1, oc) += cmat(o.grad, r, oc).colwise().sum();
        }
        if (pointwise) {
            if (want_w) {
                mat(gbuf(o, 1), g.kc, oc).noalias() += cmat(pval(o, 0), r, g.c).transpose() * cmat(o.grad, r, oc);
            }
            if (want_x) {
                mat(gbuf(o, 0), r, g.c).noalias() += cmat(o.grad, r, oc) * cmat(pval(o, 1), g.kc, oc).transpose();
            }
            return;
        }
        if (!want_x && !want_w) {
            return;
        }
        Buffer cols(tile * g.kc);
        double* gw = want_w ? gbuf(o, 1).data() : nullptr;
        double* gx = want_x ? gbuf(o, 0).data() : nullptr;
        for (std::size_t r0 = 0; r0 < rows; r0 += tile) {
            const std::size_t n = std::min(tile, rows - r0);
            const auto ni = static_cast<Eigen::Index>(n);
            auto gy = cmat(o.grad, ni, oc, r0 * oc);
            if (want_w) {
                im2col_rows(g, pval(o, 0).data(), r0, n, cols.data());
                MapR(gw, g.kc, oc).noalias() += CMapR(cols.data(), ni, g.kc).transpose() * gy;
            }
            if (want_x) {
                MapR(cols.data(), ni, g.kc).noalias() = gy * cmat(pval(o, 1), g.kc, oc).transpose();
                col2im_rows(g, cols.data(), r0, n, gx);
            }
        }
    });
}

Var upsample2x(const Var& x) {
    require(x.value().rank() == 4, "upsample2x: input must be [B, H, W, C]");
    const int b = x.dim(0);
    const int h = x.dim(1);
    const int w = x.dim(2);
    const int c = x.dim(3);
    Tensor out({b, 2 * h, 2 * w, c});
    for (int n = 0; n < b; ++n) {
        for (int y = 0; y < 2 * h; ++y) {
            for (int xx = 0; xx < 2 * w; ++xx) {
                const double* s = x.value().data() + ((static_cast<std::size_t>(n) * h + y / 2) * w + xx / 2) * c;
                std::copy(s, s + c, out.data() + ((static_cast<std::size_t>(n) * 2 * h + y) * 2 * w + xx) * c);
            }
        }
    }
    return make_op(std::move(out), {x}, [b, h, w, c](Node& o) {
        Tensor& g = gbuf(o, 0);
        for (int n = 0; n < b; ++n) {
            for (int y = 0; y < 2 * h; ++y) {
                for (int xx = 0; xx < 2 * w; ++xx) {
                    const double* s = o.grad.data() + ((static_cast<std::size_t>(n) * 2 * h + y) * 2 * w + xx) * c;
                    double* t = g.data() + ((static_cast<std::size_t>(n) * h + y / 2) * w + xx / 2) * c;
                    for (int ch = 0; ch < c; ++ch) {
                        t[ch] += s[ch];
                    }
                }
            }
        }
    });
}

Var crop(const Var& x, int y0, int x0, int ch, int cw) {
    require(x.value().rank() == 4, "crop: input must be [B, H, W, C]");
    const int b = x.dim(0);
    const int h = x.dim(1);
    const int w = x.dim(2);
    const int c = x.dim(3);
    require(y0 >= 0 && x0 >= 0 && y0 + ch <= h && x0 + cw <= w, "crop: window out of bounds");
    Tensor out({b, ch, cw, c});
    for (int n = 0; n < b; ++n) {
        for (int y = 0; y < ch; ++y) {
            const double* s = x.value().data() + ((static_cast<std::size_t>(n) * h + y0 + y) * w + x0) * c;
            std::copy(s, s + static_cast<std::size_t>(cw) * c,
                      out.data() + ((static_cast<std::size_t>(n) * ch + y) * cw) * c);
        }
    }
    return make_op(std::move(out), {x}, [=](Node& o) {
        Tensor& g = gbuf(o, 0);
        for (int n = 0; n < b; ++n) {
            for (int y = 0; y < ch; ++y) {
                const double* s = o.grad.data() + ((static_cast<std::size_t>(n) * ch + y) * cw) * c;
                double* t = g.data() + ((static_cast<std::size_t>(n) * h + y0 + y) * w + x0) * c;
                for (std::size_t j = 0; j < static_cast<std::size_t>(cw) * c; ++j) {
                    t[j] += s[j];
                }
            }
        }
    });
}

Var flip_horizontal(const Var& x) {
    require(x.value().rank() == 4, "flip_horizontal: input must be [B, H, W, C]");
    const int b = x.dim(0);
    const int h = x.dim(1);
    const int w = x.dim(2);
    const int c = x.dim(3);
    Tensor out(x.shape());
    for (int n = 0; n < b; ++n) {
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                const std::size_t row = (static_cast<std::size_t>(n) * h + y) * w;
                std::copy(x.value().data() + (row + xx) * c, x.value().data() + (row + xx + 1) * c,
                          out.data() + (row + (w - 1 - xx)) * c);
            }
        }
    }
    return make_op(std::move(out), {x}, [b, h, w, c](Node& o) {
        Tensor& g = gbuf(o, 0);
        for (int n = 0; n < b; ++n) {
            for (int y = 0; y < h; ++y) {
                for (int xx = 0; xx < w; ++xx) {
                    const std::size_t row = (static_cast<std::size_t>(n) * h + y) * w;
                    for (int ch = 0; ch < c; ++ch) {
                        g[(row + xx) * c + ch] += o.grad[(row + (w - 1 - xx)) * c + ch];
                    }
                }
            }
        }
    });
}

Var adaptive_avg_pool(const Var& x, int grid) {
    require(x.value().rank() == 4, "adaptive_avg_pool: input must be [B, H, W, C]");
    const int b = x.dim(0);
    const int h = x.dim(1);
    const int w = x.dim(2);
    const int c = x.dim(3);
    require(grid > 0 && h % grid == 0 && w % grid == 0, "adaptive_avg_pool: grid must divide spatial size");
    const int ph = h / grid;
    const int pw = w / grid;
    const double inv = 1.0 / (ph * pw);
    Tensor out({b, grid, grid, c});
    for (int n = 0; n < b; ++n) {
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                const double* s = x.value().data() + ((static_cast<std::size_t>(n) * h + y) * w + xx) * c;
                double* t = out.data() + ((static_cast<std::size_t>(n) * grid + y / ph) * grid + xx / pw) * c;
                for (int ch = 0; ch < c; ++ch) {
                    t[ch] += s[ch] * inv;
                }
            }
        }
    }
    return make_op(std::move(out), {x}, [=](Node& o) {
        Tensor& g = gbuf(o, 0);
        for (int n = 0; n < b; ++n) {
            for (int y = 0; y < h; ++y) {
                for (int xx = 0; xx < w; ++xx) {
                    double* t = g.data() + ((static_cast<std::size_t>(n) * h + y) * w + xx) * c;
                    const double* s = o.grad.data() + ((static_cast<std::size_t>(n) * grid + y / ph) * grid + xx / pw) * c;
                    for (int ch = 0; ch < c; ++ch) {
                        t[ch] += s[ch] * inv;
                    }
                }
            }
        }
    });
}

// --- reductions / losses -----------------------------------------------------------

Var sum_all(const Var& x) {
    Tensor out(Shape{}, cvec(x.value()).sum());
    return make_op(std::move(out), {x}, [](Node& o) { vec(gbuf(o, 0)).array() += o.grad[0]; });
}

Var mean_all(const Var& x) {
    const double n = static_cast<double>(x.value().numel());
    require(n > 0, "mean_all: empty tensor");
    Tensor out(Shape{}, cvec(x.value()).sum() / n);
    return make_op(std::move(out), {x}, [n](Node& o) { vec(gbuf(o, 0)).array() += o.grad[0] / n; });
}

Var mse(const Var& a, const Var& b) {
    check_same_shape(a, b, "mse");
    const double n = static_cast<double>(a.value().numel());
    require(n > 0, "mse: empty tensor");
    Tensor out(Shape{}, (cvec(a.value()) - cvec(b.value())).squaredNorm() / n);
    return make_op(std::move(out), {a, b}, [n](Node& o) {
        const double s = 2.0 * o.grad[0] / n;
        if (wants(o, 0)) {
            vec(gbuf(o, 0)) += s * (cvec(pval(o, 0)) - cvec(pval(o, 1)));
        }
        if (wants(o, 1)) {
            vec(gbuf(o, 1)) -= s * (cvec(pval(o, 0)) - cvec(pval(o, 1)));
        }
    });
}

Var dot_lastdim(const Var& a, const Var& b) {
    check_same_shape(a, b, "dot_lastdim");
    const int d = a.dim(-1);
    const auto rows = static_cast<Eigen::Index>(a.value().numel() / d);
    Shape shape = a.shape();
    shape.pop_back();
    Tensor out(shape);
    vec(out) = cmat(a.value(), rows, d).cwiseProduct(cmat(b.value(), rows, d)).rowwise().sum();
    return make_op(std::move(out), {a, b}, [rows, d](Node& o) {
        auto g = cvec(o.grad);
        if (wants(o, 0)) {
            mat(gbuf(o, 0), rows, d) += g.asDiagonal() * cmat(pval(o, 1), rows, d);
        }
        if (wants(o, 1)) {
            mat(gbuf(o, 1), rows, d) += g.asDiagonal() * cmat(pval(o, 0), rows, d);
        }
    });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    require(logits.value().rank() == 2, "cross_entropy: logits must be [B, C]");
    const int b = logits.dim(0);
    const int c = logits.dim(1);
    require(labels.size() == static_cast<std::size_t>(b), "cross_entropy: label count mismatch");
    auto probs = std::make_shared<Tensor>(logits.shape());
    double loss = 0.0;
    for (int i = 0; i < b; ++i) {
        require(labels[i] >= 0 && labels[i] < c, "cross_entropy: label out of range");
        const double* z = logits.value().data() + static_cast<std::size_t>(i) * c;
        const double mx = *std::max_element(z, z + c);
        double total = 0.0;
        for (int j = 0; j < c; ++j) {
            total += std::exp(z[j] - mx);
        }
        for (int j = 0; j < c; ++j) {
            (*probs)[static_cast<std::size_t>(i) * c + j] = std::exp(z[j] - mx) / total;
        }
        loss += -(z[labels[i]] - mx - std::log(total));
    }
    Tensor out(Shape{}, loss / b);
    return make_op(std::move(out), {logits}, [probs, labels, b, c](Node& o) {
        Tensor& g = gbuf(o, 0);
        const double s = o.grad[0] / b;
        for (int i = 0; i < b; ++i) {
            for (int j = 0; j < c; ++j) {
                const std::size_t k = static_cast<std::size_t>(i) * c + j;
                g[k] += s * ((*probs)[k] - (j == labels[i] ? 1.0 : 0.0));
            }
        }
    });
}

}  // namespace idalign
