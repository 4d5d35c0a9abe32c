// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "idalign/errors.hpp"

namespace idalign {

namespace {
std::atomic<std::size_t> g_live{0};
std::atomic<std::size_t> g_peak{0};
}  // namespace

void MemoryStats::on_alloc(std::size_t bytes) noexcept {
    const std::size_t now = g_live.fetch_add(bytes) + bytes;
    std::size_t peak = g_peak.load();
    while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
    }
}

void MemoryStats::on_free(std::size_t bytes) noexcept { g_live.fetch_sub(bytes); }
std::size_t MemoryStats::live_bytes() noexcept { return g_live.load(); }
std::size_t MemoryStats::peak_bytes() noexcept { return g_peak.load(); }
void MemoryStats::reset_peak() noexcept { g_peak.store(g_live.load()); }

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        require(d >= 0, "negative dimension in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? ", " : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::initializer_list<double> values)
    : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    require(data_.size() == shape_numel(shape_), "initializer size does not match shape " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, std::span<const double> values)
    : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    require(data_.size() == shape_numel(shape_), "value count does not match shape " + shape_str(shape_));
}

int Tensor::dim(int i) const {
    const int r = rank();
    if (i < 0) {
        i += r;
    }
    require(i >= 0 && i < r, "dimension index out of range for shape " + shape_str(shape_));
    return shape_[static_cast<std::size_t>(i)];
}

Tensor Tensor::reshaped(Shape shape) const {
    require(shape_numel(shape) == numel(),
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::item() const {
    require(numel() == 1, "item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

bool bitwise_equal(const Tensor& a, const Tensor& b) noexcept {
    return a.shape_ == b.shape_ && a.data_.size() == b.data_.size() &&
           (a.data_.empty() || std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(double)) == 0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "max_abs_diff shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

}  // namespace idalign
