#pragma once

// Per-channel gate modules. A gate reads the same activation as the conv it
// controls, pools it spatially and emits a keep/drop decision for every
// output channel of that conv. Training draws hard decisions with the
// Gumbel-max trick and routes gradients through the Gumbel-softmax
// relaxation (straight-through); evaluation thresholds the keep probability.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ppp/layers.hpp"

namespace ppp {

struct LayerSpec {
    int layer_id = 0;
    int in_channels = 1;  // n
    int out_channels = 1; // m
    int width = 1;        // spatial size of the incoming activation
    int height = 1;
    bool gated = true;
};

/// Hard keep/drop pattern of one sample at one gated layer, with the keep
/// probability it was derived from.
struct GateDecision {
    int layer_id = 0;
    std::vector<int> hard;
    std::vector<double> soft;

    int size() const { return static_cast<int>(hard.size()); }
};

enum class GateMode { train, eval };

struct GateConfig {
    int hidden_width = 16; // 0 selects a purely linear gate (pool -> head)
    double temperature = 1.0;
    double init_keep_logit = 2.0; // initial (on - off) logit gap of the head bias

    void validate() const {
        if (!(temperature > 0.0) || !std::isfinite(temperature))
            throw ConfigurationError("gate temperature must be positive, got " +
                                     std::to_string(temperature));
        if (hidden_width < 0) throw ConfigurationError("gate hidden width must be non-negative");
    }
};

/// Decisions for a whole batch at one layer, row-major [sample][channel].
template <typename T>
struct GateBatch {
    int layer_id = 0;
    int batch = 0;
    int channels = 0;
    std::vector<int> hard;
    std::vector<double> soft;
    std::vector<T> relaxed;     // Gumbel-softmax keep value (train mode only)
    std::vector<double> noise;  // Gumbel draws, [sample][channel][on, off]

    int index(int n, int c) const { return n * channels + c; }

    GateDecision decision(int n) const {
        GateDecision d;
        d.layer_id = layer_id;
        d.hard.assign(hard.begin() + index(n, 0), hard.begin() + index(n, 0) + channels);
        d.soft.assign(soft.begin() + index(n, 0), soft.begin() + index(n, 0) + channels);
        return d;
    }
};

template <typename T>
struct GateCache {
    Tensor<T> pooled;
    Tensor<T> hidden_pre; // projection output, before normalization
    NormCache<T> norm;
    Tensor<T> hidden;     // after rectifier
    Tensor<T> logits;     // [n, 2m]: (on, off) per channel
    std::vector<T> relaxed;
    int in_h = 0, in_w = 0;
};

template <typename T>
class GateModule {
public:
    GateModule() = default;
    GateModule(const std::string& name, int in_channels, int out_channels, GateConfig cfg)
        : cfg_(cfg), in_(in_channels), out_(out_channels) {
        cfg_.validate();
        expects(in_channels >= 1 && out_channels >= 1, "GateModule: channel counts must be positive");
        if (cfg_.hidden_width > 0) {
            proj_ = Linear<T>(name + ".proj", in_channels, cfg_.hidden_width, ParamGroup::gate);
            norm_ = BatchNorm<T>(name + ".norm", cfg_.hidden_width, ParamGroup::gate);
            head_ = Linear<T>(name + ".head", cfg_.hidden_width, 2 * out_channels, ParamGroup::gate);
        } else {
            head_ = Linear<T>(name + ".head", in_channels, 2 * out_channels, ParamGroup::gate);
        }
    }

    void init(Rng& rng) {
        if (proj_) proj_->init_uniform(rng);
        head_.init_uniform(rng);
        for (int c = 0; c < out_; ++c) {
            head_.bias.value[2 * c] = static_cast<T>(0.5 * cfg_.init_keep_logit);
            head_.bias.value[2 * c + 1] = static_cast<T>(-0.5 * cfg_.init_keep_logit);
        }
    }

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }
    const GateConfig& config() const { return cfg_; }
    void set_temperature(double t) {
        GateConfig c = cfg_;
        c.temperature = t;
        c.validate();
        cfg_ = c;
    }

    Linear<T>& head() { return head_; }
    const Linear<T>& head() const { return head_; }
    std::optional<Linear<T>>& proj() { return proj_; }
    const std::optional<Linear<T>>& proj() const { return proj_; }
    std::optional<BatchNorm<T>>& norm() { return norm_; }
    const std::optional<BatchNorm<T>>& norm() const { return norm_; }

    template <typename F>
    void for_each_param(F&& f) {
        if (proj_) {
            f(proj_->weight);
            f(proj_->bias);
            f(norm_->gamma);
            f(norm_->beta);
        }
        f(head_.weight);
        f(head_.bias);
    }

    /// Logits [n, 2m] for an activation [n, in, h, w]. Train mode uses batch
    /// statistics in the hidden normalization and fills the cache.
    Tensor<T> logits(const Tensor<T>& activation, GateMode mode, GateCache<T>* cache) {
        expects(activation.c() == in_, "gate: activation has " + std::to_string(activation.c()) +
                                           " channels, gate expects " + std::to_string(in_));
        Tensor<T> pooled = global_avg_pool(activation);
        Tensor<T> out;
        if (proj_) {
            Tensor<T> pre = proj_->forward(pooled);
            Tensor<T> normed;
            if (mode == GateMode::train) {
                NormCache<T> local;
                normed = norm_->forward_train(pre, cache ? &cache->norm : &local);
            } else {
                normed = norm_->forward_eval(pre);
            }
            Tensor<T> hidden = relu(normed);
            out = head_.forward(hidden);
            if (cache) {
                cache->hidden_pre = std::move(pre);
                cache->hidden = std::move(hidden);
            }
        } else {
            out = head_.forward(pooled);
        }
        if (cache) {
            cache->pooled = std::move(pooled);
            cache->logits = out;
            cache->in_h = activation.h();
            cache->in_w = activation.w();
        }
        return out;
    }

    /// Eval-mode logits without touching module state.
    Tensor<T> logits_eval(const Tensor<T>& activation) const {
        expects(activation.c() == in_, "gate: activation channel mismatch");
        Tensor<T> pooled = global_avg_pool(activation);
        if (proj_) return head_.forward(relu(norm_->forward_eval(proj_->forward(pooled))));
        return head_.forward(pooled);
    }

    /// Backpropagates dL/dz (relaxed keep value, [n][m]) through the
    /// relaxation and the gate network. Returns dL/d(activation).
    Tensor<T> backward(const std::vector<T>& dz, const GateCache<T>& cache) {
        const int n = cache.logits.n();
        expects(static_cast<int>(dz.size()) == n * out_, "gate backward: gradient size mismatch");
        Tensor<T> dlogits(n, 2 * out_, 1, 1);
        const double inv_t = 1.0 / cfg_.temperature;
        for (int s = 0; s < n; ++s)
            for (int c = 0; c < out_; ++c) {
                const double y = cache.relaxed[s * out_ + c];
                const double g = double(dz[s * out_ + c]) * y * (1.0 - y) * inv_t;
                dlogits.at(s, 2 * c, 0, 0) = static_cast<T>(g);
                dlogits.at(s, 2 * c + 1, 0, 0) = static_cast<T>(-g);
            }
        Tensor<T> dpooled;
        if (proj_) {
            Tensor<T> dhidden = head_.backward(dlogits, cache.hidden);
            Tensor<T> dnormed = relu_backward(dhidden, cache.hidden);
            Tensor<T> dpre = norm_->backward(dnormed, cache.norm);
            dpooled = proj_->backward(dpre, cache.pooled);
        } else {
            dpooled = head_.backward(dlogits, cache.pooled);
        }
        return global_avg_pool_backward(dpooled, cache.in_h, cache.in_w);
    }

private:
    GateConfig cfg_;
    int in_ = 0, out_ = 0;
    std::optional<Linear<T>> proj_;
    std::optional<BatchNorm<T>> norm_;
    Linear<T> head_;
};

inline double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Turns head logits into decisions. In train mode the Gumbel draws come from
/// `frozen_noise` when given (size n * m * 2), otherwise from `rng`.
template <typename T>
GateBatch<T> decide(const Tensor<T>& logits, int layer_id, GateMode mode, double temperature,
                    Rng* rng, const std::vector<double>* frozen_noise = nullptr) {
    if (!(temperature > 0.0)) throw ConfigurationError("gate temperature must be positive");
    const int n = logits.n();
    const int m = logits.c() / 2;
    GateBatch<T> out;
    out.layer_id = layer_id;
    out.batch = n;
    out.channels = m;
    out.hard.assign(static_cast<std::size_t>(n) * m, 0);
    out.soft.assign(static_cast<std::size_t>(n) * m, 0.0);
    if (mode == GateMode::train) {
        out.relaxed.assign(static_cast<std::size_t>(n) * m, T(0));
        if (frozen_noise) {
            expects(frozen_noise->size() == static_cast<std::size_t>(n) * m * 2,
                    "gate: frozen noise size mismatch");
            out.noise = *frozen_noise;
        } else {
            expects(rng != nullptr, "gate: train mode needs a random generator or frozen noise");
            out.noise.resize(static_cast<std::size_t>(n) * m * 2);
            for (auto& g : out.noise) g = sample_gumbel(*rng);
        }
    }
    for (int s = 0; s < n; ++s)
        for (int c = 0; c < m; ++c) {
            const double on = logits.at(s, 2 * c, 0, 0);
            const double off = logits.at(s, 2 * c + 1, 0, 0);
            const int i = s * m + c;
            out.soft[i] = sigmoid(on - off);
            if (mode == GateMode::train) {
                const double pon = on + out.noise[2 * i];
                const double poff = off + out.noise[2 * i + 1];
                out.hard[i] = pon >= poff ? 1 : 0;
                out.relaxed[i] = static_cast<T>(sigmoid((pon - poff) / temperature));
            } else {
                out.hard[i] = out.soft[i] >= 0.5 ? 1 : 0;
            }
        }
    return out;
}

/// gate_forward: pooled activation -> per-channel decisions.
template <typename T>
GateBatch<T> gate_forward(const Tensor<T>& activation, GateModule<T>& gate, GateMode mode,
                          int layer_id, Rng* rng, GateCache<T>* cache = nullptr,
                          const std::vector<double>* frozen_noise = nullptr) {
    Tensor<T> logits = gate.logits(activation, mode, cache);
    auto out = decide(logits, layer_id, mode, gate.config().temperature, rng, frozen_noise);
    if (cache) cache->relaxed = out.relaxed;
    return out;
}

template <typename T>
GateBatch<T> gate_forward_eval(const Tensor<T>& activation, const GateModule<T>& gate, int layer_id) {
    return decide(gate.logits_eval(activation), layer_id, GateMode::eval, gate.config().temperature,
                  nullptr);
}

/// Scales channel c of every sample by hard[n][c].
template <typename T>
Tensor<T> apply_gate(const Tensor<T>& conv_output, const std::vector<int>& hard, int channels) {
    expects(conv_output.c() == channels, "apply_gate: conv output has " +
                                             std::to_string(conv_output.c()) + " channels, decision has " +
                                             std::to_string(channels));
    expects(hard.size() == static_cast<std::size_t>(conv_output.n()) * channels,
            "apply_gate: decision batch size mismatch");
    Tensor<T> y = conv_output;
    const int plane = y.plane();
    for (int n = 0; n < y.n(); ++n)
        for (int c = 0; c < channels; ++c)
            if (hard[n * channels + c] == 0) std::fill(y.channel(n, c), y.channel(n, c) + plane, T(0));
    return y;
}

template <typename T>
Tensor<T> apply_gate(const Tensor<T>& conv_output, const GateBatch<T>& decision) {
    return apply_gate(conv_output, decision.hard, decision.channels);
}

/// Same mask for every sample.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& conv_output, const std::vector<int>& mask) {
    expects(conv_output.c() == static_cast<int>(mask.size()), "apply_mask: channel mismatch");
    Tensor<T> y = conv_output;
    for (int n = 0; n < y.n(); ++n)
        for (int c = 0; c < y.c(); ++c)
            if (mask[c] == 0) std::fill(y.channel(n, c), y.channel(n, c) + y.plane(), T(0));
    return y;
}

/// Backward of apply_gate: gradient into the conv output and the
/// straight-through gradient dL/dz[n][c] = sum over positions of dout * y.
template <typename T>
std::pair<Tensor<T>, std::vector<T>> apply_gate_backward(const Tensor<T>& dout,
                                                         const Tensor<T>& conv_output,
                                                         const std::vector<int>& hard) {
    const int channels = dout.c(), plane = dout.plane();
    Tensor<T> dy = apply_gate(dout, hard, channels);
    std::vector<T> dz(static_cast<std::size_t>(dout.n()) * channels, T(0));
    for (int n = 0; n < dout.n(); ++n)
        for (int c = 0; c < channels; ++c) {
            const T* g = dout.channel(n, c);
            const T* y = conv_output.channel(n, c);
            double s = 0.0;
            for (int i = 0; i < plane; ++i) s += double(g[i]) * y[i];
            dz[n * channels + c] = static_cast<T>(s);
        }
    return {std::move(dy), std::move(dz)};
}

// ---------------------------------------------------------------------------
// Gradient check for the straight-through path
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t checked = 0;
};

/// Compares the analytic gradient of a relaxed objective J = sum_nc w_nc * y_nc
/// (y = Gumbel-softmax keep value with the noise frozen) against central
/// finite differences over every gate parameter.
inline GradCheckResult straight_through_grad_check(const GateModule<double>& gate,
                                                   const Tensor<double>& probe,
                                                   std::uint64_t seed = 7, double step = 1e-4,
                                                   double eps = 1e-6) {
    Rng rng(seed);
    const int n = probe.n(), m = gate.out_channels();
    std::vector<double> noise(static_cast<std::size_t>(n) * m * 2);
    for (auto& g : noise) g = sample_gumbel(rng);
    std::vector<double> weights(static_cast<std::size_t>(n) * m);
    fill_normal<double>(weights, rng);

    auto objective = [&](GateModule<double> g) {
        auto out = gate_forward<double>(probe, g, GateMode::train, 0, nullptr, nullptr, &noise);
        double j = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i) j += weights[i] * out.relaxed[i];
        return j;
    };

    GateModule<double> analytic = gate;
    GateCache<double> cache;
    gate_forward<double>(probe, analytic, GateMode::train, 0, nullptr, &cache, &noise);
    analytic.for_each_param([](Param<double>& p) { p.zero_grad(); });
    analytic.backward(weights, cache);

    std::vector<std::vector<double>> grads;
    analytic.for_each_param([&](Param<double>& p) { grads.push_back(p.grad); });

    GradCheckResult result;
    std::size_t which = 0;
    GateModule<double> base = gate;
    base.for_each_param([&](Param<double>& p) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double keep = p.value[i];
            p.value[i] = keep + step;
            const double up = objective(base);
            p.value[i] = keep - step;
            const double down = objective(base);
            p.value[i] = keep;
            const double fd = (up - down) / (2.0 * step);
            const double err = std::abs(grads[which][i] - fd) / (std::abs(fd) + eps);
            if (err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst_param = p.name + "[" + std::to_string(i) + "]";
            }
            ++result.checked;
        }
        ++which;
    });
    return result;
}

} // namespace ppp
