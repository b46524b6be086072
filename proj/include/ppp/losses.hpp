#pragma once

// Training objectives on the gate outputs of one minibatch:
//   prototype loss  (1/|C|) sum_l (1/|B|) sum_p sum_i || z_il - S(mean_p z_l) ||^2
//   target loss     (T - (1/|C|) sum_l (1/(|B| m_l)) sum_i ||z_il||_1)^2
//   total           task + alpha * prototype + beta * target
// The binary prototype S(mean) is a constant of the batch.

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "ppp/prototypes.hpp"

namespace ppp {

struct LossConfig {
    double alpha = 10.0;
    double beta = 10.0;
    double tau = 0.7;
    double target_rate = 0.6;

    void validate() const {
        if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigurationError("alpha and beta must be >= 0");
        check_tau(tau);
        if (!(target_rate > 0.0 && target_rate <= 1.0))
            throw ConfigurationError("target rate must lie in (0, 1]");
    }
};

/// Gate outputs of one minibatch: z[l] is [sample][channel] for gated layer l.
/// Values are the hard decisions during training; relaxed values are allowed
/// for gradient checking.
struct BatchGateRecord {
    std::vector<int> identities;
    std::vector<int> widths;
    std::vector<std::vector<double>> z;

    int batch() const { return static_cast<int>(identities.size()); }
    int layers() const { return static_cast<int>(widths.size()); }
    double at(int l, int n, int c) const { return z[l][static_cast<std::size_t>(n) * widths[l] + c]; }

    std::map<int, int> identity_counts() const {
        std::map<int, int> counts;
        for (int p : identities) ++counts[p];
        return counts;
    }

    void validate() const {
        expects(!widths.empty(), "gate record has no gated layers");
        expects(batch() > 0, "gate record is empty");
        expects(z.size() == widths.size(), "gate record layer count mismatch");
        for (std::size_t l = 0; l < widths.size(); ++l)
            expects(z[l].size() == static_cast<std::size_t>(batch()) * widths[l],
                    "gate record incomplete at layer " + std::to_string(l));
    }

    template <typename T>
    static BatchGateRecord from_hard(const std::vector<GateBatch<T>>& gates, std::vector<int> identities) {
        BatchGateRecord r;
        r.identities = std::move(identities);
        for (const auto& g : gates) {
            expects(g.layer_id == r.layers(), "gate batches must be in layer order");
            expects(g.batch == r.batch(), "gate batch size mismatch");
            r.widths.push_back(g.channels);
            r.z.emplace_back(g.hard.begin(), g.hard.end());
        }
        return r;
    }
};

/// S(mean_p z_l) for every layer l and identity p present in the batch.
using PrototypeTargets = std::vector<std::map<int, std::vector<int>>>;

inline PrototypeTargets prototype_targets(const BatchGateRecord& rec, double tau) {
    rec.validate();
    PrototypeTargets targets(rec.layers());
    for (int l = 0; l < rec.layers(); ++l) {
        std::map<int, std::vector<GateDecision>> per_identity;
        for (int n = 0; n < rec.batch(); ++n) {
            GateDecision d;
            d.layer_id = l;
            d.hard.resize(rec.widths[l]);
            for (int c = 0; c < rec.widths[l]; ++c) d.hard[c] = rec.at(l, n, c) >= 0.5 ? 1 : 0;
            per_identity[rec.identities[n]].push_back(std::move(d));
        }
        for (const auto& [p, ds] : per_identity) targets[l][p] = binarize(prototype_mean(ds), tau);
    }
    return targets;
}

inline double prototype_loss(const BatchGateRecord& rec, const PrototypeTargets& targets) {
    rec.validate();
    double total = 0.0;
    for (int l = 0; l < rec.layers(); ++l) {
        double layer = 0.0;
        for (int n = 0; n < rec.batch(); ++n) {
            const auto& s = targets[l].at(rec.identities[n]);
            for (int c = 0; c < rec.widths[l]; ++c) {
                const double d = rec.at(l, n, c) - s[c];
                layer += d * d;
            }
        }
        total += layer / rec.batch();
    }
    return total / rec.layers();
}

inline double prototype_loss(const BatchGateRecord& rec, double tau) {
    return prototype_loss(rec, prototype_targets(rec, tau));
}

/// dL_prototype / dz with the targets held constant.
inline std::vector<std::vector<double>> prototype_loss_grad(const BatchGateRecord& rec,
                                                            const PrototypeTargets& targets) {
    rec.validate();
    std::vector<std::vector<double>> g(rec.layers());
    const double scale = 2.0 / (rec.layers() * static_cast<double>(rec.batch()));
    for (int l = 0; l < rec.layers(); ++l) {
        g[l].resize(rec.z[l].size());
        for (int n = 0; n < rec.batch(); ++n) {
            const auto& s = targets[l].at(rec.identities[n]);
            for (int c = 0; c < rec.widths[l]; ++c)
                g[l][static_cast<std::size_t>(n) * rec.widths[l] + c] = scale * (rec.at(l, n, c) - s[c]);
        }
    }
    return g;
}

/// Keep logit at which a channel's expected prototype pull vanishes, for `n`
/// samples of one identity per batch: the interior root of
/// P(Bin(n, p) >= ceil(tau n)) = p. Channels that start above it drift on,
/// below it off. Returns nullopt when no interior root exists.
inline std::optional<double> balanced_keep_logit(double tau, int n) {
    if (n < 2 || !(tau > 0.0 && tau < 1.0)) return std::nullopt;
    const int need = static_cast<int>(std::ceil(tau * n - 1e-12));
    auto excess = [&](double p) {
        double tail = 0.0;
        for (int k = need; k <= n; ++k)
            tail += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) +
                             k * std::log(p) + (n - k) * std::log1p(-p));
        return tail - p;
    };
    double lo = 1e-3, hi = 1.0 - 1e-3;
    if (!(excess(lo) < 0.0 && excess(hi) > 0.0)) return std::nullopt;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (excess(mid) < 0.0 ? lo : hi) = mid;
    }
    const double p = 0.5 * (lo + hi);
    return std::log(p / (1.0 - p));
}

/// Mean keep rate over layers, each layer averaged over samples and channels.
inline double mean_keep_rate(const BatchGateRecord& rec) {
    rec.validate();
    double rate = 0.0;
    for (int l = 0; l < rec.layers(); ++l) {
        double s = 0.0;
        for (double v : rec.z[l]) s += std::abs(v);
        rate += s / (static_cast<double>(rec.batch()) * rec.widths[l]);
    }
    return rate / rec.layers();
}

inline double target_loss(const BatchGateRecord& rec, double target_rate) {
    const double r = target_rate - mean_keep_rate(rec);
    return r * r;
}

/// dL_target / dz (z >= 0, so d|z|/dz = 1).
inline std::vector<std::vector<double>> target_loss_grad(const BatchGateRecord& rec, double target_rate) {
    const double residual = target_rate - mean_keep_rate(rec);
    std::vector<std::vector<double>> g(rec.layers());
    for (int l = 0; l < rec.layers(); ++l) {
        const double d = -2.0 * residual / (rec.layers() * static_cast<double>(rec.batch()) * rec.widths[l]);
        g[l].assign(rec.z[l].size(), d);
    }
    return g;
}

struct LossBreakdown {
    double total = 0.0;
    double task = 0.0;
    double prototype = 0.0;
    double target = 0.0;
};

inline LossBreakdown total_loss(double task_loss, const BatchGateRecord& rec, const LossConfig& cfg) {
    LossBreakdown b;
    b.task = task_loss;
    b.prototype = prototype_loss(rec, cfg.tau);
    b.target = target_loss(rec, cfg.target_rate);
    b.total = b.task + cfg.alpha * b.prototype + cfg.beta * b.target;
    return b;
}

/// alpha * dL_prototype/dz + beta * dL_target/dz; targets come from `targets`.
inline std::vector<std::vector<double>> regularizer_grad(const BatchGateRecord& rec,
                                                         const PrototypeTargets& targets,
                                                         const LossConfig& cfg) {
    auto g = prototype_loss_grad(rec, targets);
    auto t = target_loss_grad(rec, cfg.target_rate);
    for (std::size_t l = 0; l < g.size(); ++l)
        for (std::size_t i = 0; i < g[l].size(); ++i) g[l][i] = cfg.alpha * g[l][i] + cfg.beta * t[l][i];
    return g;
}

// ---------------------------------------------------------------------------
// Gradient check of the full objective with respect to gate logits
// ---------------------------------------------------------------------------

struct LossGradCheckSetup {
    int batch = 6;
    int identities = 2;
    std::vector<int> widths{3, 4};
    double temperature = 1.0;
    LossConfig loss;
    std::uint64_t seed = 11;
};

/// Relaxed objective over per-layer logits [n][2m] with frozen Gumbel noise:
///   J = sum w * y  +  alpha * L_prototype(y; S fixed)  +  beta * L_target(y)
/// where y is the Gumbel-softmax keep value and the linear term stands in for
/// the task loss. Returns the max relative error between the analytic
/// gradient (loss gradients chained through the relaxation) and central
/// finite differences.
inline double total_loss_grad_check(const LossGradCheckSetup& setup, double step = 1e-5,
                                    double eps = 1e-6) {
    setup.loss.validate();
    Rng rng(setup.seed);
    const int L = static_cast<int>(setup.widths.size());
    std::vector<int> ids(setup.batch);
    for (int n = 0; n < setup.batch; ++n) ids[n] = n % setup.identities;
    std::vector<Tensor<double>> logits;
    std::vector<std::vector<double>> noise(L), task_w(L);
    for (int l = 0; l < L; ++l) {
        logits.emplace_back(setup.batch, 2 * setup.widths[l], 1, 1);
        fill_normal<double>(logits[l].span(), rng);
        noise[l].resize(static_cast<std::size_t>(setup.batch) * setup.widths[l] * 2);
        for (auto& g : noise[l]) g = sample_gumbel(rng);
        task_w[l].resize(static_cast<std::size_t>(setup.batch) * setup.widths[l]);
        fill_normal<double>(task_w[l], rng);
    }

    auto relaxed_record = [&](const std::vector<Tensor<double>>& lg, BatchGateRecord* hard) {
        BatchGateRecord soft;
        soft.identities = ids;
        if (hard) hard->identities = ids;
        for (int l = 0; l < L; ++l) {
            auto d = decide(lg[l], l, GateMode::train, setup.temperature, nullptr, &noise[l]);
            soft.widths.push_back(setup.widths[l]);
            soft.z.emplace_back(d.relaxed.begin(), d.relaxed.end());
            if (hard) {
                hard->widths.push_back(setup.widths[l]);
                hard->z.emplace_back(d.hard.begin(), d.hard.end());
            }
        }
        return soft;
    };

    BatchGateRecord hard;
    const BatchGateRecord base = relaxed_record(logits, &hard);
    const PrototypeTargets targets = prototype_targets(hard, setup.loss.tau);

    auto objective = [&](const std::vector<Tensor<double>>& lg) {
        const BatchGateRecord r = relaxed_record(lg, nullptr);
        double j = setup.loss.alpha * prototype_loss(r, targets) +
                   setup.loss.beta * target_loss(r, setup.loss.target_rate);
        for (int l = 0; l < L; ++l)
            for (std::size_t i = 0; i < r.z[l].size(); ++i) j += task_w[l][i] * r.z[l][i];
        return j;
    };

    auto dz = regularizer_grad(base, targets, setup.loss);
    double worst = 0.0;
    for (int l = 0; l < L; ++l) {
        const int m = setup.widths[l];
        for (int n = 0; n < setup.batch; ++n)
            for (int c = 0; c < m; ++c) {
                const int i = n * m + c;
                const double y = base.z[l][i];
                const double g = (dz[l][i] + task_w[l][i]) * y * (1.0 - y) / setup.temperature;
                for (int side = 0; side < 2; ++side) {
                    const double analytic = side == 0 ? g : -g;
                    auto lg = logits;
                    double& v = lg[l].at(n, 2 * c + side, 0, 0);
                    const double keep = v;
                    v = keep + step;
                    const double up = objective(lg);
                    v = keep - step;
                    const double down = objective(lg);
                    const double fd = (up - down) / (2.0 * step);
                    worst = std::max(worst, std::abs(analytic - fd) / (std::abs(fd) + eps));
                }
            }
    }
    return worst;
}

} // namespace ppp
