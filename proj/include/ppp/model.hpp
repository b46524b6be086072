#pragma once

// Residual classifier whose block convolutions carry per-channel gates.
//
//   stem conv -> BN -> ReLU
//   stages of residual blocks:
//       x -> conv1 -> BN1 -> gate1 -> ReLU -> conv2 -> BN2 -> gate2 -> (+ skip) -> ReLU
//   global average pool -> linear classifier
//
// Only conv1 and conv2 of each block are gated; the stem, the projection
// shortcuts and the classifier are not. Each gate reads the activation that
// its conv consumes. Masks are applied after the normalization layer so a
// dropped channel is exactly zero.

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ppp/gating.hpp"
#include "ppp/io.hpp"

namespace ppp {

struct ModelSpec {
    int in_channels = 3;
    int image_size = 16;
    std::vector<int> widths{16, 32, 64};
    int blocks_per_stage = 2;
    int num_classes = 4;
    bool gated = true;
    GateConfig gate;

    void validate() const {
        if (in_channels < 1 || image_size < 1 || num_classes < 2 || blocks_per_stage < 1 ||
            widths.empty())
            throw ConfigurationError("invalid model spec");
        for (int w : widths)
            if (w < 1) throw ConfigurationError("model widths must be positive");
        gate.validate();
    }
};

inline void to_json(json& j, const ModelSpec& s) {
    j = json{{"in_channels", s.in_channels},
             {"image_size", s.image_size},
             {"widths", s.widths},
             {"blocks_per_stage", s.blocks_per_stage},
             {"num_classes", s.num_classes},
             {"gated", s.gated},
             {"gate_hidden", s.gate.hidden_width},
             {"temperature", s.gate.temperature},
             {"gate_init_keep_logit", s.gate.init_keep_logit}};
}

inline void from_json(const json& j, ModelSpec& s) {
    static const std::vector<std::string> known{"in_channels", "image_size",  "widths",
                                                "blocks_per_stage", "num_classes", "gated",
                                                "gate_hidden", "temperature", "gate_init_keep_logit"};
    for (const auto& [k, v] : j.items())
        if (std::find(known.begin(), known.end(), k) == known.end())
            throw ConfigurationError("unknown model key '" + k + "'");
    s.in_channels = j.value("in_channels", s.in_channels);
    s.image_size = j.value("image_size", s.image_size);
    s.widths = j.value("widths", s.widths);
    s.blocks_per_stage = j.value("blocks_per_stage", s.blocks_per_stage);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.gated = j.value("gated", s.gated);
    s.gate.hidden_width = j.value("gate_hidden", s.gate.hidden_width);
    s.gate.temperature = j.value("temperature", s.gate.temperature);
    s.gate.init_keep_logit = j.value("gate_init_keep_logit", s.gate.init_keep_logit);
}

/// How gates are resolved during a forward pass.
enum class GatePolicy {
    all_on,  // every channel kept (vanilla behaviour)
    sample,  // Gumbel-max draws, training
    eval,    // keep iff keep probability >= 0.5, per input ("Single" inference)
    fixed,   // one mask per gated layer for every input (masked full model)
};

/// One binary mask per gated layer, indexed by layer id.
using MaskSet = std::vector<std::vector<int>>;

struct ForwardResult {
    Tensor<float> logits;
    std::vector<GateBatch<float>> gates; // per gated layer (empty for all_on / fixed)
};

struct BlockCache {
    Tensor<float> input;
    ConvCache<float> conv1, conv2, proj;
    NormCache<float> norm1, norm2, proj_norm;
    Tensor<float> bn1_out, bn2_out, hidden, output;
    std::vector<int> hard1, hard2;
    GateCache<float> gate1, gate2;
};

struct Tape {
    ConvCache<float> stem;
    NormCache<float> stem_norm;
    Tensor<float> stem_out;
    std::vector<BlockCache> blocks;
    Tensor<float> pooled;
    int final_h = 0, final_w = 0;
    bool gates_active = false;
};

/// Counts forward passes; copies start from the source's count.
class AccessCounter {
public:
    AccessCounter() = default;
    AccessCounter(const AccessCounter& o) : n_(o.n_.load()) {}
    AccessCounter& operator=(const AccessCounter& o) {
        n_ = o.n_.load();
        return *this;
    }
    void bump() const { n_.fetch_add(1, std::memory_order_relaxed); }
    std::uint64_t count() const { return n_.load(); }

private:
    mutable std::atomic<std::uint64_t> n_{0};
};

struct ResidualBlock {
    int in_channels = 0, out_channels = 0, stride = 1;
    int input_size = 0; // spatial size of the block input
    Conv2d<float> conv1, conv2;
    BatchNorm<float> bn1, bn2;
    std::optional<Conv2d<float>> proj;
    std::optional<BatchNorm<float>> proj_bn;
    std::optional<GateModule<float>> gate1, gate2;
    int gate1_id = -1, gate2_id = -1;

    bool gated() const { return gate1.has_value(); }
};

class GatedResNet {
public:
    static constexpr std::uint32_t kFormatVersion = 1;
    static constexpr const char* kMagic = "PPPCKPT\0";

    GatedResNet() = default;
    GatedResNet(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
        spec_.validate();
        Rng rng(seed);
        const int w0 = spec_.widths.front();
        stem_ = Conv2d<float>("stem", spec_.in_channels, w0, 3, 1, 1);
        stem_.init_he(rng);
        stem_bn_ = BatchNorm<float>("stem_bn", w0);
        int in = w0, size = spec_.image_size, gate_id = 0;
        for (std::size_t s = 0; s < spec_.widths.size(); ++s) {
            for (int b = 0; b < spec_.blocks_per_stage; ++b) {
                const int out = spec_.widths[s];
                const int stride = (s > 0 && b == 0) ? 2 : 1;
                const std::string name = "s" + std::to_string(s) + "b" + std::to_string(b);
                ResidualBlock blk;
                blk.in_channels = in;
                blk.out_channels = out;
                blk.stride = stride;
                blk.input_size = size;
                blk.conv1 = Conv2d<float>(name + ".conv1", in, out, 3, stride, 1);
                blk.conv1.init_he(rng);
                blk.bn1 = BatchNorm<float>(name + ".bn1", out);
                blk.conv2 = Conv2d<float>(name + ".conv2", out, out, 3, 1, 1);
                blk.conv2.init_he(rng);
                blk.bn2 = BatchNorm<float>(name + ".bn2", out);
                if (stride != 1 || in != out) {
                    blk.proj = Conv2d<float>(name + ".proj", in, out, 1, stride, 0);
                    blk.proj->init_he(rng);
                    blk.proj_bn = BatchNorm<float>(name + ".proj_bn", out);
                }
                if (spec_.gated) {
                    blk.gate1 = GateModule<float>(name + ".gate1", in, out, spec_.gate);
                    blk.gate1->init(rng);
                    blk.gate2 = GateModule<float>(name + ".gate2", out, out, spec_.gate);
                    blk.gate2->init(rng);
                    blk.gate1_id = gate_id++;
                    blk.gate2_id = gate_id++;
                }
                size = blk.conv1.out_size(size);
                blocks_.push_back(std::move(blk));
                in = out;
            }
        }
        final_size_ = size;
        fc_ = Linear<float>("fc", in, spec_.num_classes);
        fc_.init_uniform(rng);
    }

    const ModelSpec& spec() const { return spec_; }
    bool gated() const { return spec_.gated; }
    int num_gated_layers() const { return spec_.gated ? 2 * static_cast<int>(blocks_.size()) : 0; }
    const std::vector<ResidualBlock>& blocks() const { return blocks_; }
    std::vector<ResidualBlock>& blocks() { return blocks_; }
    const Conv2d<float>& stem() const { return stem_; }
    const BatchNorm<float>& stem_bn() const { return stem_bn_; }
    const Linear<float>& fc() const { return fc_; }
    int final_size() const { return final_size_; }
    std::uint64_t forward_count() const { return access_.count(); }

    /// Registry of gated convolutions in layer-id order.
    std::vector<LayerSpec> layer_specs() const {
        std::vector<LayerSpec> out;
        for (const auto& b : blocks_) {
            if (!b.gated()) continue;
            const int s1 = b.input_size, s2 = b.conv1.out_size(b.input_size);
            out.push_back({b.gate1_id, b.in_channels, b.out_channels, s1, s1, true});
            out.push_back({b.gate2_id, b.out_channels, b.out_channels, s2, s2, true});
        }
        return out;
    }

    std::vector<int> gated_widths() const {
        std::vector<int> w;
        for (const auto& l : layer_specs()) w.push_back(l.out_channels);
        return w;
    }

    MaskSet all_on_masks() const {
        MaskSet m;
        for (int w : gated_widths()) m.emplace_back(w, 1);
        return m;
    }

    // -- parameter access ----------------------------------------------------

    template <typename F>
    void for_each_param(F&& f) {
        f(stem_.weight);
        f(stem_bn_.gamma);
        f(stem_bn_.beta);
        for (auto& b : blocks_) {
            f(b.conv1.weight);
            f(b.bn1.gamma);
            f(b.bn1.beta);
            f(b.conv2.weight);
            f(b.bn2.gamma);
            f(b.bn2.beta);
            if (b.proj) {
                f(b.proj->weight);
                f(b.proj_bn->gamma);
                f(b.proj_bn->beta);
            }
            if (b.gate1) b.gate1->for_each_param(f);
            if (b.gate2) b.gate2->for_each_param(f);
        }
        f(fc_.weight);
        f(fc_.bias);
    }

    /// Every persisted array (parameters and normalization statistics), by name.
    void for_each_array(const std::function<void(const std::string&, std::vector<float>&)>& f) {
        auto norm = [&](BatchNorm<float>& bn) {
            f(bn.gamma.name, bn.gamma.value);
            f(bn.beta.name, bn.beta.value);
            f(bn.gamma.name.substr(0, bn.gamma.name.size() - 6) + ".running_mean", bn.running_mean);
            f(bn.gamma.name.substr(0, bn.gamma.name.size() - 6) + ".running_var", bn.running_var);
        };
        auto gate = [&](GateModule<float>& g) {
            if (g.proj()) {
                f(g.proj()->weight.name, g.proj()->weight.value);
                f(g.proj()->bias.name, g.proj()->bias.value);
                norm(*g.norm());
            }
            f(g.head().weight.name, g.head().weight.value);
            f(g.head().bias.name, g.head().bias.value);
        };
        f(stem_.weight.name, stem_.weight.value);
        norm(stem_bn_);
        for (auto& b : blocks_) {
            f(b.conv1.weight.name, b.conv1.weight.value);
            norm(b.bn1);
            f(b.conv2.weight.name, b.conv2.weight.value);
            norm(b.bn2);
            if (b.proj) {
                f(b.proj->weight.name, b.proj->weight.value);
                norm(*b.proj_bn);
            }
            if (b.gate1) gate(*b.gate1);
            if (b.gate2) gate(*b.gate2);
        }
        f(fc_.weight.name, fc_.weight.value);
        f(fc_.bias.name, fc_.bias.value);
    }

    void zero_grad() {
        for_each_param([](Param<float>& p) { p.zero_grad(); });
    }

    void set_temperature(double t) {
        spec_.gate.temperature = t;
        for (auto& b : blocks_) {
            if (b.gate1) b.gate1->set_temperature(t);
            if (b.gate2) b.gate2->set_temperature(t);
        }
    }

    /// Copies every non-gate array present in `src` (backbone warm start).
    void load_backbone_from(const GatedResNet& src) {
        std::map<std::string, std::vector<float>> arrays;
        const_cast<GatedResNet&>(src).for_each_array(
            [&](const std::string& n, std::vector<float>& v) { arrays[n] = v; });
        for_each_array([&](const std::string& n, std::vector<float>& v) {
            if (n.find(".gate") != std::string::npos) return;
            auto it = arrays.find(n);
            if (it == arrays.end() || it->second.size() != v.size())
                throw ConfigurationError("backbone checkpoint does not match model at '" + n + "'");
            v = it->second;
        });
    }

    // -- inference -----------------------------------------------------------

    /// Stateless forward pass (normalization uses running statistics).
    ForwardResult forward(const Tensor<float>& x, GatePolicy policy,
                          const MaskSet* masks = nullptr) const {
        expects(policy != GatePolicy::sample, "forward: sampling needs forward_train");
        expects(x.c() == spec_.in_channels && x.h() == spec_.image_size && x.w() == spec_.image_size,
                "forward: input shape " + x.shape_str() + " does not match model");
        if (policy == GatePolicy::fixed) check_masks(masks);
        if (policy != GatePolicy::all_on)
            expects(spec_.gated, "forward: gate policy requires a gated model");
        access_.bump();
        ForwardResult res;
        Tensor<float> h = relu(stem_bn_.forward_eval(stem_.forward_inference(x)));
        for (const auto& b : blocks_) {
            Tensor<float> m1 = b.bn1.forward_eval(b.conv1.forward_inference(h));
            if (b.gated() && policy == GatePolicy::eval) {
                auto d = gate_forward_eval(h, *b.gate1, b.gate1_id);
                m1 = apply_gate(m1, d);
                res.gates.push_back(std::move(d));
            } else if (b.gated() && policy == GatePolicy::fixed) {
                m1 = apply_mask(m1, (*masks)[b.gate1_id]);
            }
            Tensor<float> hid = relu(m1);
            Tensor<float> m2 = b.bn2.forward_eval(b.conv2.forward_inference(hid));
            if (b.gated() && policy == GatePolicy::eval) {
                auto d = gate_forward_eval(hid, *b.gate2, b.gate2_id);
                m2 = apply_gate(m2, d);
                res.gates.push_back(std::move(d));
            } else if (b.gated() && policy == GatePolicy::fixed) {
                m2 = apply_mask(m2, (*masks)[b.gate2_id]);
            }
            if (b.proj) add_inplace(m2, b.proj_bn->forward_eval(b.proj->forward_inference(h)));
            else add_inplace(m2, h);
            h = relu(m2);
        }
        res.logits = fc_.forward(global_avg_pool(h));
        return res;
    }

    // -- training ------------------------------------------------------------

    /// Training forward: batch statistics, Gumbel-sampled gates (or all-on).
    /// `frozen_noise`, when given, supplies the Gumbel draws per gated layer.
    ForwardResult forward_train(const Tensor<float>& x, GatePolicy policy, Rng& rng, Tape& tape,
                                const std::vector<std::vector<double>>* frozen_noise = nullptr) {
        expects(policy == GatePolicy::sample || policy == GatePolicy::all_on,
                "forward_train: policy must be sample or all_on");
        expects(policy == GatePolicy::all_on || spec_.gated, "forward_train: model has no gates");
        access_.bump();
        ForwardResult res;
        tape.gates_active = policy == GatePolicy::sample;
        tape.blocks.assign(blocks_.size(), BlockCache{});
        Tensor<float> a = stem_.forward(x, &tape.stem);
        tape.stem_out = relu(stem_bn_.forward_train(a, &tape.stem_norm));
        Tensor<float> h = tape.stem_out;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            auto& b = blocks_[i];
            auto& c = tape.blocks[i];
            c.input = h;
            const bool gate = tape.gates_active && b.gated();
            Tensor<float> m1 = b.bn1.forward_train(b.conv1.forward(h, &c.conv1), &c.norm1);
            c.bn1_out = m1;
            if (gate) {
                auto d = gate_forward(h, *b.gate1, GateMode::train, b.gate1_id, &rng, &c.gate1,
                                      frozen_noise ? &(*frozen_noise)[b.gate1_id] : nullptr);
                m1 = apply_gate(m1, d);
                c.hard1 = d.hard;
                res.gates.push_back(std::move(d));
            }
            c.hidden = relu(m1);
            Tensor<float> m2 = b.bn2.forward_train(b.conv2.forward(c.hidden, &c.conv2), &c.norm2);
            c.bn2_out = m2;
            if (gate) {
                auto d = gate_forward(c.hidden, *b.gate2, GateMode::train, b.gate2_id, &rng, &c.gate2,
                                      frozen_noise ? &(*frozen_noise)[b.gate2_id] : nullptr);
                m2 = apply_gate(m2, d);
                c.hard2 = d.hard;
                res.gates.push_back(std::move(d));
            }
            if (b.proj)
                add_inplace(m2, b.proj_bn->forward_train(b.proj->forward(h, &c.proj), &c.proj_norm));
            else
                add_inplace(m2, h);
            c.output = relu(m2);
            h = c.output;
        }
        tape.final_h = h.h();
        tape.final_w = h.w();
        tape.pooled = global_avg_pool(h);
        res.logits = fc_.forward(tape.pooled);
        return res;
    }

    /// Accumulates parameter gradients. `gate_grads[l]` holds extra dL/dz for
    /// gated layer l ([sample][channel]); it may be empty.
    void backward(const Tensor<float>& dlogits, const Tape& tape,
                  const std::vector<std::vector<float>>& gate_grads = {}) {
        Tensor<float> dpool = fc_.backward(dlogits, tape.pooled);
        Tensor<float> dh = global_avg_pool_backward(dpool, tape.final_h, tape.final_w);
        for (int i = static_cast<int>(blocks_.size()) - 1; i >= 0; --i) {
            auto& b = blocks_[i];
            const auto& c = tape.blocks[i];
            const bool gate = tape.gates_active && b.gated();
            Tensor<float> dsum = relu_backward(dh, c.output);

            Tensor<float> db2 = dsum;
            Tensor<float> dhid_gate;
            if (gate) {
                auto [dy, dz] = apply_gate_backward(dsum, c.bn2_out, c.hard2);
                db2 = std::move(dy);
                add_extra(dz, gate_grads, b.gate2_id);
                dhid_gate = b.gate2->backward(dz, c.gate2);
            }
            Tensor<float> dhid;
            b.conv2.backward(b.bn2.backward(db2, c.norm2), c.conv2, &dhid);
            if (gate) add_inplace(dhid, dhid_gate);

            Tensor<float> dm1 = relu_backward(dhid, c.hidden);
            Tensor<float> db1 = dm1;
            Tensor<float> dx_gate;
            if (gate) {
                auto [dy, dz] = apply_gate_backward(dm1, c.bn1_out, c.hard1);
                db1 = std::move(dy);
                add_extra(dz, gate_grads, b.gate1_id);
                dx_gate = b.gate1->backward(dz, c.gate1);
            }
            Tensor<float> dx;
            b.conv1.backward(b.bn1.backward(db1, c.norm1), c.conv1, &dx);
            if (gate) add_inplace(dx, dx_gate);
            if (b.proj) {
                Tensor<float> dxp;
                b.proj->backward(b.proj_bn->backward(dsum, c.proj_norm), c.proj, &dxp);
                add_inplace(dx, dxp);
            } else {
                add_inplace(dx, dsum);
            }
            dh = std::move(dx);
        }
        Tensor<float> da = stem_bn_.backward(relu_backward(dh, tape.stem_out), tape.stem_norm);
        stem_.backward(da, tape.stem, nullptr);
    }

    // -- persistence ---------------------------------------------------------

    Container to_container(const json& extra_header = json::object()) const {
        Container c;
        c.magic = std::string(kMagic, 8);
        c.version = kFormatVersion;
        c.header = extra_header;
        c.header["model"] = spec_;
        const_cast<GatedResNet*>(this)->for_each_array(
            [&](const std::string& n, std::vector<float>& v) { c.tensors.push_back({n, v}); });
        return c;
    }

    static GatedResNet from_container(const Container& c) {
        ModelSpec spec;
        try {
            spec = c.header.at("model").get<ModelSpec>();
        } catch (const json::exception& e) {
            throw IngestionError(std::string("checkpoint header: ") + e.what());
        }
        GatedResNet m(spec, 0);
        m.for_each_array([&](const std::string& n, std::vector<float>& v) {
            const auto& t = c.tensor(n);
            if (t.data.size() != v.size())
                throw IngestionError("checkpoint tensor '" + n + "' has wrong size");
            v = t.data;
        });
        return m;
    }

private:
    void check_masks(const MaskSet* masks) const {
        expects(masks != nullptr, "fixed gate policy needs masks");
        const auto widths = gated_widths();
        expects(masks->size() == widths.size(), "mask set covers " + std::to_string(masks->size()) +
                                                    " layers, model has " +
                                                    std::to_string(widths.size()));
        for (std::size_t l = 0; l < widths.size(); ++l)
            expects(static_cast<int>((*masks)[l].size()) == widths[l],
                    "mask width mismatch at layer " + std::to_string(l));
    }

    static void add_extra(std::vector<float>& dz, const std::vector<std::vector<float>>& extra, int id) {
        if (id < 0 || static_cast<std::size_t>(id) >= extra.size() || extra[id].empty()) return;
        expects(extra[id].size() == dz.size(), "gate gradient size mismatch at layer " + std::to_string(id));
        for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += extra[id][i];
    }

    ModelSpec spec_;
    Conv2d<float> stem_;
    BatchNorm<float> stem_bn_;
    std::vector<ResidualBlock> blocks_;
    Linear<float> fc_;
    int final_size_ = 0;
    AccessCounter access_;
};

/// Mean cross-entropy over the batch; fills dlogits with its gradient.
inline double cross_entropy(const Tensor<float>& logits, const std::vector<int>& labels,
                            Tensor<float>* dlogits = nullptr) {
    const int n = logits.n(), k = logits.c();
    expects(static_cast<int>(labels.size()) == n, "cross_entropy: label count mismatch");
    if (dlogits) *dlogits = Tensor<float>(n, k, 1, 1);
    double loss = 0.0;
    for (int s = 0; s < n; ++s) {
        expects(labels[s] >= 0 && labels[s] < k, "cross_entropy: label out of range");
        double mx = logits.at(s, 0, 0, 0);
        for (int c = 1; c < k; ++c) mx = std::max(mx, double(logits.at(s, c, 0, 0)));
        double z = 0.0;
        for (int c = 0; c < k; ++c) z += std::exp(logits.at(s, c, 0, 0) - mx);
        loss += -(logits.at(s, labels[s], 0, 0) - mx - std::log(z));
        if (dlogits)
            for (int c = 0; c < k; ++c) {
                const double p = std::exp(logits.at(s, c, 0, 0) - mx) / z;
                dlogits->at(s, c, 0, 0) = static_cast<float>((p - (c == labels[s] ? 1.0 : 0.0)) / n);
            }
    }
    return loss / n;
}

inline std::vector<int> argmax_rows(const Tensor<float>& logits) {
    std::vector<int> out(logits.n());
    for (int s = 0; s < logits.n(); ++s) {
        int best = 0;
        for (int c = 1; c < logits.c(); ++c)
            if (logits.at(s, c, 0, 0) > logits.at(s, best, 0, 0)) best = c;
        out[s] = best;
    }
    return out;
}

} // namespace ppp
