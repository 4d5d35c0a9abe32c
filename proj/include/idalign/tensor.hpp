// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors of doubles with a tracked allocator so the timing
// harness can report peak working-set memory.

#pragma once

#include <atomic>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace idalign {

class MemoryStats {
public:
    static void on_alloc(std::size_t bytes) noexcept;
    static void on_free(std::size_t bytes) noexcept;
    static std::size_t live_bytes() noexcept;
    static std::size_t peak_bytes() noexcept;
    /// Sets the peak watermark to the current live size.
    static void reset_peak() noexcept;
};

/// Fixed alignment keeps vectorized reductions independent of heap layout.
inline constexpr std::size_t kBufferAlignment = 64;

template <class T>
struct CountingAllocator {
    using value_type = T;
    CountingAllocator() noexcept = default;
    template <class U>
    CountingAllocator(const CountingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        MemoryStats::on_alloc(n * sizeof(T));
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kBufferAlignment}));
    }
    void deallocate(T* p, std::size_t n) noexcept {
        MemoryStats::on_free(n * sizeof(T));
        ::operator delete(p, std::align_val_t{kBufferAlignment});
    }
    template <class U>
    bool operator==(const CountingAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, CountingAllocator<double>>;
using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::initializer_list<double> values);
    Tensor(Shape shape, std::span<const double> values);

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    /// Size of dimension i; negative i counts from the back.
    int dim(int i) const;
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return {data_.data(), data_.size()}; }
    std::span<const double> values() const noexcept { return {data_.data(), data_.size()}; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Same data under a new shape with equal element count.
    Tensor reshaped(Shape shape) const;
    void fill(double v);
    bool all_finite() const noexcept;
    double item() const;

    friend bool bitwise_equal(const Tensor& a, const Tensor& b) noexcept;

private:
    Shape shape_;
    Buffer data_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b) noexcept;
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace idalign
