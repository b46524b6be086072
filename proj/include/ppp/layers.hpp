#pragma once

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <vector>

#include "ppp/tensor.hpp"

namespace ppp {

enum class ParamGroup { network, gate };

template <typename T>
struct Param {
    std::string name;
    std::vector<T> value;
    std::vector<T> grad;
    std::vector<T> velocity;
    ParamGroup group = ParamGroup::network;
    bool decay = true;

    Param() = default;
    Param(std::string n, std::size_t size, ParamGroup g, bool wd)
        : name(std::move(n)), value(size, T(0)), grad(size, T(0)), velocity(size, T(0)), group(g),
          decay(wd) {}

    std::size_t size() const { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

// ---------------------------------------------------------------------------
// Convolution (no bias; every conv in the network feeds a normalization layer)
// ---------------------------------------------------------------------------

template <typename T>
struct ConvCache {
    std::vector<T> cols; // per sample: (in * k * k) x (out_h * out_w)
    int in_n = 0, in_c = 0, in_h = 0, in_w = 0;
};

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int pad,
           ParamGroup group = ParamGroup::network)
        : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(pad),
          weight(std::move(name) + ".weight",
                 static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel, group, true) {
        expects(in_channels >= 1 && out_channels >= 1, "Conv2d: channel counts must be positive");
    }

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }
    int kernel() const { return k_; }
    int stride() const { return stride_; }
    int pad() const { return pad_; }
    int out_size(int in_size) const { return (in_size + 2 * pad_ - k_) / stride_ + 1; }
    int patch() const { return in_ * k_ * k_; }

    void init_he(Rng& rng) {
        const double std = std::sqrt(2.0 / static_cast<double>(out_ * k_ * k_));
        fill_normal<T>(weight.value, rng, 0.0, std);
    }

    Tensor<T> forward(const Tensor<T>& x, ConvCache<T>* cache = nullptr) const {
        expects(x.c() == in_, "Conv2d " + weight.name + ": expected " + std::to_string(in_) +
                                  " input channels, got " + std::to_string(x.c()));
        const int oh = out_size(x.h()), ow = out_size(x.w());
        const int positions = oh * ow;
        Tensor<T> y(x.n(), out_, oh, ow);
        std::vector<T> local;
        std::vector<T>* cols = &local;
        if (cache) {
            cache->in_n = x.n();
            cache->in_c = x.c();
            cache->in_h = x.h();
            cache->in_w = x.w();
            cols = &cache->cols;
        }
        const std::size_t per_sample = static_cast<std::size_t>(patch()) * positions;
        cols->assign(cache ? per_sample * x.n() : per_sample, T(0));
        ConstMatMap<T> W(weight.value.data(), out_, patch());
        for (int n = 0; n < x.n(); ++n) {
            T* c = cols->data() + (cache ? per_sample * n : 0);
            im2col(x.sample(n), x.h(), x.w(), oh, ow, c);
            ConstMatMap<T> C(c, patch(), positions);
            MatMap<T> Y(y.sample(n), out_, positions);
            Y.noalias() = W * C;
        }
        return y;
    }

    /// Inference path. Products are accumulated in double before rounding, so
    /// the result does not depend on GEMM blocking or on how many all-zero
    /// input channels are present. Pruned and masked models rely on this to
    /// agree to the last bit.
    Tensor<T> forward_inference(const Tensor<T>& x) const {
        expects(x.c() == in_, "Conv2d " + weight.name + ": expected " + std::to_string(in_) +
                                  " input channels, got " + std::to_string(x.c()));
        const int oh = out_size(x.h()), ow = out_size(x.w());
        const int positions = oh * ow;
        Tensor<T> y(x.n(), out_, oh, ow);
        std::vector<T> cols(static_cast<std::size_t>(patch()) * positions);
        const RowMatrix<double> W = ConstMatMap<T>(weight.value.data(), out_, patch()).template cast<double>();
        RowMatrix<double> Yd(out_, positions);
        for (int n = 0; n < x.n(); ++n) {
            im2col(x.sample(n), x.h(), x.w(), oh, ow, cols.data());
            Yd.noalias() = W * ConstMatMap<T>(cols.data(), patch(), positions).template cast<double>();
            MatMap<T>(y.sample(n), out_, positions) = Yd.template cast<T>();
        }
        return y;
    }

    /// Accumulates weight gradients; writes the input gradient when dx is non-null.
    void backward(const Tensor<T>& dy, const ConvCache<T>& cache, Tensor<T>* dx) {
        const int oh = dy.h(), ow = dy.w();
        const int positions = oh * ow;
        const std::size_t per_sample = static_cast<std::size_t>(patch()) * positions;
        expects(dy.c() == out_ && dy.n() == cache.in_n, "Conv2d::backward: shape mismatch");
        MatMap<T> dW(weight.grad.data(), out_, patch());
        ConstMatMap<T> W(weight.value.data(), out_, patch());
        if (dx) *dx = Tensor<T>(cache.in_n, cache.in_c, cache.in_h, cache.in_w);
        RowMatrix<T> dcols(patch(), positions);
        for (int n = 0; n < dy.n(); ++n) {
            ConstMatMap<T> C(cache.cols.data() + per_sample * n, patch(), positions);
            ConstMatMap<T> dY(dy.sample(n), out_, positions);
            dW.noalias() += dY * C.transpose();
            if (dx) {
                dcols.noalias() = W.transpose() * dY;
                col2im(dcols.data(), cache.in_h, cache.in_w, oh, ow, dx->sample(n));
            }
        }
    }

    Param<T> weight;

private:
    void im2col(const T* img, int h, int w, int oh, int ow, T* cols) const {
        const int positions = oh * ow;
        for (int c = 0; c < in_; ++c)
            for (int ky = 0; ky < k_; ++ky)
                for (int kx = 0; kx < k_; ++kx) {
                    T* row = cols + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * positions;
                    const T* src = img + static_cast<std::size_t>(c) * h * w;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride_ - pad_ + ky;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride_ - pad_ + kx;
                            row[oy * ow + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                                    ? src[iy * w + ix]
                                                    : T(0);
                        }
                    }
                }
    }

    void col2im(const T* cols, int h, int w, int oh, int ow, T* img) const {
        const int positions = oh * ow;
        for (int c = 0; c < in_; ++c)
            for (int ky = 0; ky < k_; ++ky)
                for (int kx = 0; kx < k_; ++kx) {
                    const T* row = cols + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * positions;
                    T* dst = img + static_cast<std::size_t>(c) * h * w;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride_ - pad_ + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride_ - pad_ + kx;
                            if (ix >= 0 && ix < w) dst[iy * w + ix] += row[oy * ow + ox];
                        }
                    }
                }
    }

    int in_ = 0, out_ = 0, k_ = 3, stride_ = 1, pad_ = 1;
};

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel. Rank-2 inputs (h = w = 1)
// give the usual feature-wise batch norm.
// ---------------------------------------------------------------------------

template <typename T>
struct NormCache {
    std::vector<T> xhat;
    std::vector<T> inv_std;
    int n = 0, c = 0, plane = 0;
};

template <typename T>
class BatchNorm {
public:
    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;

    BatchNorm() = default;
    BatchNorm(const std::string& name, int channels, ParamGroup group = ParamGroup::network)
        : gamma(name + ".gamma", channels, group, false), beta(name + ".beta", channels, group, false),
          running_mean(channels, T(0)), running_var(channels, T(1)), channels_(channels) {
        std::fill(gamma.value.begin(), gamma.value.end(), T(1));
    }

    int channels() const { return channels_; }

    /// Batch statistics; updates the running estimates.
    Tensor<T> forward_train(const Tensor<T>& x, NormCache<T>* cache) {
        expects(x.c() == channels_, "BatchNorm " + gamma.name + ": channel mismatch");
        const int plane = x.plane();
        const double count = static_cast<double>(x.n()) * plane;
        expects(count > 1, "BatchNorm: training needs more than one value per channel");
        Tensor<T> y(x.n(), x.c(), x.h(), x.w());
        cache->n = x.n();
        cache->c = x.c();
        cache->plane = plane;
        cache->xhat.assign(x.size(), T(0));
        cache->inv_std.assign(channels_, T(0));
        for (int c = 0; c < channels_; ++c) {
            double sum = 0.0;
            for (int n = 0; n < x.n(); ++n) {
                const T* p = x.channel(n, c);
                for (int i = 0; i < plane; ++i) sum += p[i];
            }
            const double mean = sum / count;
            double sq = 0.0;
            for (int n = 0; n < x.n(); ++n) {
                const T* p = x.channel(n, c);
                for (int i = 0; i < plane; ++i) {
                    const double d = p[i] - mean;
                    sq += d * d;
                }
            }
            const double var = sq / count;
            const double inv = 1.0 / std::sqrt(var + kEps);
            cache->inv_std[c] = static_cast<T>(inv);
            for (int n = 0; n < x.n(); ++n) {
                const T* p = x.channel(n, c);
                T* q = y.channel(n, c);
                T* xh = cache->xhat.data() + (static_cast<std::size_t>(n) * channels_ + c) * plane;
                for (int i = 0; i < plane; ++i) {
                    xh[i] = static_cast<T>((p[i] - mean) * inv);
                    q[i] = gamma.value[c] * xh[i] + beta.value[c];
                }
            }
            running_mean[c] = static_cast<T>((1 - kMomentum) * running_mean[c] + kMomentum * mean);
            const double unbiased = count > 1 ? var * count / (count - 1) : var;
            running_var[c] = static_cast<T>((1 - kMomentum) * running_var[c] + kMomentum * unbiased);
        }
        return y;
    }

    Tensor<T> forward_eval(const Tensor<T>& x) const {
        expects(x.c() == channels_, "BatchNorm " + gamma.name + ": channel mismatch");
        Tensor<T> y(x.n(), x.c(), x.h(), x.w());
        const int plane = x.plane();
        for (int c = 0; c < channels_; ++c) {
            const T scale = static_cast<T>(gamma.value[c] / std::sqrt(double(running_var[c]) + kEps));
            const T shift = beta.value[c] - scale * running_mean[c];
            for (int n = 0; n < x.n(); ++n) {
                const T* p = x.channel(n, c);
                T* q = y.channel(n, c);
                for (int i = 0; i < plane; ++i) q[i] = scale * p[i] + shift;
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy, const NormCache<T>& cache) {
        Tensor<T> dx(dy.n(), dy.c(), dy.h(), dy.w());
        const int plane = cache.plane;
        const double count = static_cast<double>(cache.n) * plane;
        for (int c = 0; c < channels_; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int n = 0; n < cache.n; ++n) {
                const T* g = dy.channel(n, c);
                const T* xh = cache.xhat.data() + (static_cast<std::size_t>(n) * channels_ + c) * plane;
                for (int i = 0; i < plane; ++i) {
                    sum_dy += g[i];
                    sum_dy_xhat += double(g[i]) * xh[i];
                }
            }
            gamma.grad[c] += static_cast<T>(sum_dy_xhat);
            beta.grad[c] += static_cast<T>(sum_dy);
            const double k = double(gamma.value[c]) * cache.inv_std[c];
            const double mean_dy = sum_dy / count, mean_dy_xhat = sum_dy_xhat / count;
            for (int n = 0; n < cache.n; ++n) {
                const T* g = dy.channel(n, c);
                const T* xh = cache.xhat.data() + (static_cast<std::size_t>(n) * channels_ + c) * plane;
                T* d = dx.channel(n, c);
                for (int i = 0; i < plane; ++i)
                    d[i] = static_cast<T>(k * (g[i] - mean_dy - xh[i] * mean_dy_xhat));
            }
        }
        return dx;
    }

    Param<T> gamma;
    Param<T> beta;
    std::vector<T> running_mean;
    std::vector<T> running_var;

private:
    int channels_ = 0;
};

// ---------------------------------------------------------------------------
// Fully connected layer on (batch x features) tensors stored as [n, c, 1, 1].
// ---------------------------------------------------------------------------

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(const std::string& name, int in, int out, ParamGroup group = ParamGroup::network)
        : weight(name + ".weight", static_cast<std::size_t>(in) * out, group, true),
          bias(name + ".bias", out, group, false), in_(in), out_(out) {}

    int in_features() const { return in_; }
    int out_features() const { return out_; }

    void init_uniform(Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : weight.value) v = static_cast<T>(dist(rng));
        for (auto& v : bias.value) v = static_cast<T>(dist(rng));
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        expects(x.c() * x.plane() == in_, "Linear " + weight.name + ": feature mismatch");
        Tensor<T> y(x.n(), out_, 1, 1);
        ConstMatMap<T> X(x.data(), x.n(), in_);
        ConstMatMap<T> W(weight.value.data(), out_, in_);
        MatMap<T> Y(y.data(), x.n(), out_);
        Y.noalias() = X * W.transpose();
        for (int n = 0; n < x.n(); ++n)
            for (int o = 0; o < out_; ++o) Y(n, o) += bias.value[o];
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy, const Tensor<T>& x) {
        ConstMatMap<T> X(x.data(), x.n(), in_);
        ConstMatMap<T> dY(dy.data(), dy.n(), out_);
        ConstMatMap<T> W(weight.value.data(), out_, in_);
        MatMap<T> dW(weight.grad.data(), out_, in_);
        dW.noalias() += dY.transpose() * X;
        for (int n = 0; n < dy.n(); ++n)
            for (int o = 0; o < out_; ++o) bias.grad[o] += dY(n, o);
        Tensor<T> dx(x.n(), x.c(), x.h(), x.w());
        MatMap<T> dX(dx.data(), x.n(), in_);
        dX.noalias() = dY * W;
        return dx;
    }

    Param<T> weight;
    Param<T> bias;

private:
    int in_ = 0, out_ = 0;
};

// ---------------------------------------------------------------------------
// Stateless ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y = x;
    for (auto& v : y.vec()) v = v > T(0) ? v : T(0);
    return y;
}

/// dy masked by (y > 0), where y is the relu output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& dy, const Tensor<T>& y) {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i)
        if (!(y[i] > T(0))) dx[i] = T(0);
    return dx;
}

/// Spatial global average pool: [n, c, h, w] -> [n, c, 1, 1].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    Tensor<T> y(x.n(), x.c(), 1, 1);
    const int plane = x.plane();
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < x.c(); ++c) {
            const T* p = x.channel(n, c);
            double s = 0.0;
            for (int i = 0; i < plane; ++i) s += p[i];
            y.at(n, c, 0, 0) = static_cast<T>(s / plane);
        }
    return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, int h, int w) {
    Tensor<T> dx(dy.n(), dy.c(), h, w);
    const T inv = static_cast<T>(1.0 / (h * w));
    for (int n = 0; n < dy.n(); ++n)
        for (int c = 0; c < dy.c(); ++c) {
            const T g = dy.at(n, c, 0, 0) * inv;
            T* p = dx.channel(n, c);
            for (int i = 0; i < h * w; ++i) p[i] = g;
        }
    return dx;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    expects(a.same_shape(b), "add_inplace: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

} // namespace ppp
