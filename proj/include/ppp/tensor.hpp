#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ppp/error.hpp"

namespace ppp {

/// Dense NCHW tensor. Rank-2 data (batch x features) uses h = w = 1.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    Tensor(int n, int c, int h, int w, T fill = T(0))
        : n_(n), c_(c), h_(h), w_(w), data_(static_cast<std::size_t>(n) * c * h * w, fill) {
        expects(n >= 0 && c >= 0 && h >= 0 && w >= 0, "Tensor: negative dimension");
    }

    int n() const { return n_; }
    int c() const { return c_; }
    int h() const { return h_; }
    int w() const { return w_; }
    int plane() const { return h_ * w_; }
    std::size_t size() const { return data_.size(); }
    bool same_shape(const Tensor& o) const {
        return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
    }
    std::string shape_str() const {
        return "[" + std::to_string(n_) + "," + std::to_string(c_) + "," + std::to_string(h_) +
               "," + std::to_string(w_) + "]";
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
    const T& at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

    T* sample(int n) { return data_.data() + static_cast<std::size_t>(n) * c_ * plane(); }
    const T* sample(int n) const { return data_.data() + static_cast<std::size_t>(n) * c_ * plane(); }
    T* channel(int n, int c) { return sample(n) + static_cast<std::size_t>(c) * plane(); }
    const T* channel(int n, int c) const { return sample(n) + static_cast<std::size_t>(c) * plane(); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    /// Copy of samples [first, first + count).
    Tensor slice_batch(int first, int count) const {
        expects(first >= 0 && count >= 0 && first + count <= n_, "Tensor::slice_batch out of range");
        Tensor out(count, c_, h_, w_);
        std::copy(sample(first), sample(first) + static_cast<std::size_t>(count) * c_ * plane(),
                  out.data());
        return out;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(n_, c_, h_, w_);
        std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
        return out;
    }

private:
    std::size_t index(int n, int c, int y, int x) const {
        return ((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x;
    }

    int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
    std::vector<T> data_;
};

using Rng = std::mt19937_64;

template <typename T>
void fill_normal(std::span<T> out, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> dist(mean, stddev);
    for (auto& v : out) v = static_cast<T>(dist(rng));
}

/// Standard Gumbel(0, 1) draw.
inline double sample_gumbel(Rng& rng) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    double u = uni(rng);
    u = std::clamp(u, 1e-12, 1.0 - 1e-12);
    return -std::log(-std::log(u));
}

template <typename T>
T max_abs_diff(std::span<const T> a, std::span<const T> b) {
    expects(a.size() == b.size(), "max_abs_diff: size mismatch");
    T m = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
    return m;
}

} // namespace ppp
