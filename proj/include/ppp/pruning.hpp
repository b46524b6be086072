#pragma once

// Graph generator and network pruner: a prototype's binary masks become a
// PruningPlan, and the plan turns the gated full model into a smaller
// ungated network by copying surviving filters. Block outputs stay full
// width; the second conv's surviving channels are scattered back to their
// original positions before the residual add.

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "ppp/prototypes.hpp"

namespace ppp {

struct LayerPlan {
    int layer_id = 0;
    int full_out = 0;
    int full_in = 0;
    std::vector<int> alive_out;
    std::vector<int> alive_in;
    std::vector<int> scatter; // second conv of a block: alive index -> block channel
};

struct PruningPlan {
    std::vector<LayerPlan> layers; // one per gated layer, in layer-id order
    MaskSet masks;                 // effective masks the plan was derived from

    bool empty() const { return layers.empty(); }
};

inline std::vector<int> alive_indices(const std::vector<int>& mask) {
    std::vector<int> out;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) out.push_back(static_cast<int>(i));
    return out;
}

inline std::vector<int> iota_vec(int n) {
    std::vector<int> v(n);
    for (int i = 0; i < n; ++i) v[i] = i;
    return v;
}

/// Plan from explicit masks (already repaired). Masks must be non-empty per layer.
inline PruningPlan plan_from_masks(const GatedResNet& model, const MaskSet& masks) {
    expects(model.gated(), "build_plan: model has no gates");
    const auto specs = model.layer_specs();
    expects(masks.size() == specs.size(), "build_plan: prototype covers " + std::to_string(masks.size()) +
                                              " layers, model has " + std::to_string(specs.size()));
    PruningPlan plan;
    plan.masks = masks;
    for (const auto& b : model.blocks()) {
        const auto& m1 = masks[b.gate1_id];
        const auto& m2 = masks[b.gate2_id];
        expects(static_cast<int>(m1.size()) == b.out_channels && static_cast<int>(m2.size()) == b.out_channels,
                "build_plan: mask width mismatch");
        LayerPlan p1{b.gate1_id, b.out_channels, b.in_channels, alive_indices(m1), iota_vec(b.in_channels), {}};
        LayerPlan p2{b.gate2_id, b.out_channels, b.out_channels, alive_indices(m2), p1.alive_out, {}};
        expects(!p1.alive_out.empty() && !p2.alive_out.empty(),
                "build_plan: layer without alive channels (degenerate mask not repaired)");
        p2.scatter = p2.alive_out;
        plan.layers.push_back(std::move(p1));
        plan.layers.push_back(std::move(p2));
    }
    return plan;
}

/// build_plan: prototype -> plan, with the degenerate-layer rule applied.
inline PruningPlan build_plan(const GatedResNet& model, const Prototype& proto) {
    return plan_from_masks(model, prototype_masks(proto, model));
}

inline PruningPlan full_plan(const GatedResNet& model) {
    if (!model.gated()) return {};
    return plan_from_masks(model, model.all_on_masks());
}

// -- accounting ---------------------------------------------------------------

struct ConvCount {
    long long alive_propagated = 0;
    long long alive_output_only = 0;
    long long total = 0;
    long long macs = 0;
};

/// Walks every conv of the network with its alive output/input counts.
inline ConvCount count_convs(const PruningPlan& plan, const GatedResNet& model, int input_spatial) {
    ConvCount cc;
    auto add = [&](long long out_alive, long long in_alive, long long in_full, long long out_full,
                   long long k2, long long positions) {
        cc.alive_propagated += out_alive * in_alive * k2;
        cc.alive_output_only += out_alive * in_full * k2;
        cc.total += out_full * in_full * k2;
        cc.macs += out_alive * in_alive * k2 * positions;
    };
    const auto& st = model.stem();
    int size = st.out_size(input_spatial);
    add(st.out_channels(), st.in_channels(), st.in_channels(), st.out_channels(), 9, 1LL * size * size);
    for (const auto& b : model.blocks()) {
        const int s1 = b.conv1.out_size(size);
        const long long pos = 1LL * s1 * s1;
        long long a1 = b.out_channels, a2 = b.out_channels;
        if (b.gated() && !plan.empty()) {
            expects(static_cast<std::size_t>(b.gate2_id) < plan.layers.size(), "plan/model mismatch");
            a1 = static_cast<long long>(plan.layers[b.gate1_id].alive_out.size());
            a2 = static_cast<long long>(plan.layers[b.gate2_id].alive_out.size());
        }
        add(a1, b.in_channels, b.in_channels, b.out_channels, 9, pos);
        add(a2, a1, b.out_channels, b.out_channels, 9, pos);
        if (b.proj) add(b.out_channels, b.in_channels, b.in_channels, b.out_channels, 1, pos);
        size = s1;
    }
    return cc;
}

/// Fraction of conv weights that survive, counting a weight alive only when
/// both its output and its input channel are alive.
inline double utilization_rate(const PruningPlan& plan, const GatedResNet& model) {
    const auto cc = count_convs(plan, model, model.spec().image_size);
    return static_cast<double>(cc.alive_propagated) / static_cast<double>(cc.total);
}

/// Same, counting only output-channel removal.
inline double utilization_output_only(const PruningPlan& plan, const GatedResNet& model) {
    const auto cc = count_convs(plan, model, model.spec().image_size);
    return static_cast<double>(cc.alive_output_only) / static_cast<double>(cc.total);
}

/// Multiply-accumulates of all convs for a square input of the given size.
inline long long flops_estimate(const PruningPlan& plan, const GatedResNet& model, int input_spatial) {
    return count_convs(plan, model, input_spatial).macs;
}

// -- pruned model -------------------------------------------------------------

struct PrunedBlock {
    int out_channels = 0;
    Conv2d<float> conv1, conv2;
    BatchNorm<float> bn1, bn2;
    std::optional<Conv2d<float>> proj;
    std::optional<BatchNorm<float>> proj_bn;
    std::vector<int> scatter;
};

struct Provenance {
    std::string source_digest;
    int identity = -1;
    double tau = 0.0;
    double target_rate = 0.0;
};

struct Certificate {
    int probes = 0;
    double max_abs_deviation = 0.0;
    double tolerance = 1e-5;
};

class PrunedModel {
public:
    static constexpr std::uint32_t kFormatVersion = 1;
    static constexpr const char* kMagic = "PPPPRUN\0";

    PrunedModel() = default;

    /// Allocates the compact network described by (spec, plan); weights zero.
    PrunedModel(const ModelSpec& spec, const PruningPlan& plan) : spec_(spec), plan_(plan) {
        spec_.gated = false;
        const int w0 = spec.widths.front();
        stem_ = Conv2d<float>("stem", spec.in_channels, w0, 3, 1, 1);
        stem_bn_ = BatchNorm<float>("stem_bn", w0);
        int in = w0, layer = 0;
        for (std::size_t s = 0; s < spec.widths.size(); ++s)
            for (int b = 0; b < spec.blocks_per_stage; ++b) {
                const int out = spec.widths[s];
                const int stride = (s > 0 && b == 0) ? 2 : 1;
                const std::string name = "s" + std::to_string(s) + "b" + std::to_string(b);
                expects(static_cast<std::size_t>(layer + 1) < plan.layers.size(), "plan too short for model");
                const auto& p1 = plan.layers[layer];
                const auto& p2 = plan.layers[layer + 1];
                expects(p1.full_out == out && p2.full_out == out && p1.full_in == in,
                        "plan shape does not match model at " + name);
                expects(p2.alive_in == p1.alive_out, "plan: second conv inputs differ from first conv outputs");
                expects(p2.scatter.size() == p2.alive_out.size(), "plan: scatter map size mismatch");
                for (int v : p2.scatter) expects(v >= 0 && v < out, "plan: scatter index out of range");
                PrunedBlock blk;
                blk.out_channels = out;
                const int a1 = static_cast<int>(p1.alive_out.size());
                const int a2 = static_cast<int>(p2.alive_out.size());
                blk.conv1 = Conv2d<float>(name + ".conv1", in, a1, 3, stride, 1);
                blk.bn1 = BatchNorm<float>(name + ".bn1", a1);
                blk.conv2 = Conv2d<float>(name + ".conv2", a1, a2, 3, 1, 1);
                blk.bn2 = BatchNorm<float>(name + ".bn2", a2);
                blk.scatter = p2.scatter;
                if (stride != 1 || in != out) {
                    blk.proj = Conv2d<float>(name + ".proj", in, out, 1, stride, 0);
                    blk.proj_bn = BatchNorm<float>(name + ".proj_bn", out);
                }
                blocks_.push_back(std::move(blk));
                in = out;
                layer += 2;
            }
        expects(static_cast<std::size_t>(layer) == plan.layers.size(), "plan has more layers than model");
        fc_ = Linear<float>("fc", in, spec.num_classes);
    }

    const PruningPlan& plan() const { return plan_; }
    const ModelSpec& spec() const { return spec_; }
    const std::vector<PrunedBlock>& blocks() const { return blocks_; }
    Provenance provenance;
    Certificate certificate;

    Tensor<float> forward(const Tensor<float>& x) const {
        expects(x.c() == spec_.in_channels && x.h() == spec_.image_size && x.w() == spec_.image_size,
                "pruned forward: input shape mismatch");
        Tensor<float> h = relu(stem_bn_.forward_eval(stem_.forward_inference(x)));
        for (const auto& b : blocks_) {
            Tensor<float> hid = relu(b.bn1.forward_eval(b.conv1.forward_inference(h)));
            Tensor<float> branch = b.bn2.forward_eval(b.conv2.forward_inference(hid));
            Tensor<float> sum = b.proj ? b.proj_bn->forward_eval(b.proj->forward_inference(h)) : h;
            for (int n = 0; n < sum.n(); ++n)
                for (std::size_t j = 0; j < b.scatter.size(); ++j) {
                    float* dst = sum.channel(n, b.scatter[j]);
                    const float* src = branch.channel(n, static_cast<int>(j));
                    for (int i = 0; i < sum.plane(); ++i) dst[i] += src[i];
                }
            h = relu(sum);
        }
        return fc_.forward(global_avg_pool(h));
    }

    void for_each_array(const std::function<void(const std::string&, std::vector<float>&)>& f) {
        auto norm = [&](BatchNorm<float>& bn) {
            const std::string base = bn.gamma.name.substr(0, bn.gamma.name.size() - 6);
            f(bn.gamma.name, bn.gamma.value);
            f(bn.beta.name, bn.beta.value);
            f(base + ".running_mean", bn.running_mean);
            f(base + ".running_var", bn.running_var);
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
        }
        f(fc_.weight.name, fc_.weight.value);
        f(fc_.bias.name, fc_.bias.value);
    }

    /// Parameter census by kind.
    struct Census {
        long long conv = 0;
        long long gate = 0;
        long long other = 0;
    };
    Census census() const {
        Census c;
        c.conv += static_cast<long long>(stem_.weight.size());
        for (const auto& b : blocks_) {
            c.conv += static_cast<long long>(b.conv1.weight.size() + b.conv2.weight.size());
            if (b.proj) c.conv += static_cast<long long>(b.proj->weight.size());
        }
        const_cast<PrunedModel*>(this)->for_each_array([&](const std::string& n, std::vector<float>& v) {
            if (n.find(".gate") != std::string::npos) c.gate += static_cast<long long>(v.size());
            else if (n.find("conv") == std::string::npos && n.find(".proj.") == std::string::npos &&
                     n != "stem.weight")
                c.other += static_cast<long long>(v.size());
        });
        return c;
    }

    Container to_container() const;
    static PrunedModel from_container(const Container& c);

    friend PrunedModel prune(const GatedResNet&, const PruningPlan&, const Provenance&, int, std::uint64_t,
                             double);

private:
    ModelSpec spec_;
    PruningPlan plan_;
    Conv2d<float> stem_;
    BatchNorm<float> stem_bn_;
    std::vector<PrunedBlock> blocks_;
    Linear<float> fc_;
};

inline json plan_to_json(const PruningPlan& p) {
    json layers = json::array();
    for (const auto& l : p.layers)
        layers.push_back({{"layer_id", l.layer_id},
                          {"full_out", l.full_out},
                          {"full_in", l.full_in},
                          {"alive_out", l.alive_out},
                          {"alive_in", l.alive_in},
                          {"scatter", l.scatter}});
    return json{{"layers", layers}, {"masks", p.masks}};
}

inline PruningPlan plan_from_json(const json& j) {
    PruningPlan p;
    for (const auto& l : j.at("layers"))
        p.layers.push_back({l.at("layer_id").get<int>(), l.at("full_out").get<int>(), l.at("full_in").get<int>(),
                            l.at("alive_out").get<std::vector<int>>(), l.at("alive_in").get<std::vector<int>>(),
                            l.at("scatter").get<std::vector<int>>()});
    p.masks = j.at("masks").get<MaskSet>();
    return p;
}

inline Container PrunedModel::to_container() const {
    Container c;
    c.magic = std::string(kMagic, 8);
    c.version = kFormatVersion;
    c.header = json{{"model", spec_},
                    {"plan", plan_to_json(plan_)},
                    {"provenance",
                     {{"source_digest", provenance.source_digest},
                      {"identity", provenance.identity},
                      {"tau", provenance.tau},
                      {"target_rate", provenance.target_rate}}},
                    {"certificate",
                     {{"probes", certificate.probes},
                      {"max_abs_deviation", certificate.max_abs_deviation},
                      {"tolerance", certificate.tolerance}}}};
    const_cast<PrunedModel*>(this)->for_each_array(
        [&](const std::string& n, std::vector<float>& v) { c.tensors.push_back({n, v}); });
    return c;
}

inline PrunedModel PrunedModel::from_container(const Container& c) {
    try {
        PrunedModel m(c.header.at("model").get<ModelSpec>(), plan_from_json(c.header.at("plan")));
        const auto& pv = c.header.at("provenance");
        m.provenance = {pv.at("source_digest").get<std::string>(), pv.at("identity").get<int>(),
                        pv.at("tau").get<double>(), pv.at("target_rate").get<double>()};
        const auto& ct = c.header.at("certificate");
        m.certificate = {ct.at("probes").get<int>(), ct.at("max_abs_deviation").get<double>(),
                         ct.at("tolerance").get<double>()};
        m.for_each_array([&](const std::string& n, std::vector<float>& v) {
            const auto& t = c.tensor(n);
            if (t.data.size() != v.size()) throw IngestionError("pruned tensor '" + n + "' has wrong size");
            v = t.data;
        });
        return m;
    } catch (const json::exception& e) {
        throw IngestionError(std::string("pruned model header: ") + e.what());
    }
}

inline void save_pruned(const std::string& path, const PrunedModel& m) {
    write_file(path, serialize(m.to_container()));
}

inline PrunedModel load_pruned(const std::string& path) {
    return PrunedModel::from_container(
        deserialize(read_file(path), std::string(PrunedModel::kMagic, 8), PrunedModel::kFormatVersion, path));
}

/// Standard-normal probe batch at the model's input shape.
inline Tensor<float> probe_inputs(const ModelSpec& spec, int count, std::uint64_t seed) {
    Tensor<float> x(count, spec.in_channels, spec.image_size, spec.image_size);
    Rng rng(seed);
    fill_normal<float>(x.span(), rng);
    return x;
}

namespace detail {

inline std::vector<float> gather_rows(const std::vector<float>& src, const std::vector<int>& rows, int row_len) {
    std::vector<float> out;
    out.reserve(rows.size() * row_len);
    for (int r : rows)
        out.insert(out.end(), src.begin() + static_cast<std::size_t>(r) * row_len,
                   src.begin() + static_cast<std::size_t>(r + 1) * row_len);
    return out;
}

inline void slice_norm(const BatchNorm<float>& src, const std::vector<int>& keep, BatchNorm<float>& dst) {
    for (std::size_t j = 0; j < keep.size(); ++j) {
        dst.gamma.value[j] = src.gamma.value[keep[j]];
        dst.beta.value[j] = src.beta.value[keep[j]];
        dst.running_mean[j] = src.running_mean[keep[j]];
        dst.running_var[j] = src.running_var[keep[j]];
    }
}

} // namespace detail

/// Network pruner: copies surviving filters and normalization channels, drops
/// every gate, then certifies the result against the masked full model.
inline PrunedModel prune(const GatedResNet& model, const PruningPlan& plan, const Provenance& provenance = {},
                         int probes = 100, std::uint64_t probe_seed = 1234, double tolerance = 1e-5) {
    expects(model.gated(), "prune: model has no gates");
    const auto reference = plan_from_masks(model, plan.masks);
    for (std::size_t l = 0; l < plan.layers.size(); ++l)
        expects(reference.layers[l].alive_out == plan.layers[l].alive_out &&
                    reference.layers[l].alive_in == plan.layers[l].alive_in &&
                    reference.layers[l].scatter == plan.layers[l].scatter,
                "prune: plan is inconsistent with its masks at layer " + std::to_string(l));
    PrunedModel pm(model.spec(), plan);
    pm.provenance = provenance;
    pm.stem_.weight.value = model.stem().weight.value;
    pm.stem_bn_ = model.stem_bn();
    for (std::size_t i = 0; i < pm.blocks_.size(); ++i) {
        const auto& src = model.blocks()[i];
        auto& dst = pm.blocks_[i];
        const auto& p1 = plan.layers[src.gate1_id];
        const auto& p2 = plan.layers[src.gate2_id];
        const int k2 = 9;
        dst.conv1.weight.value = detail::gather_rows(src.conv1.weight.value, p1.alive_out, src.in_channels * k2);
        detail::slice_norm(src.bn1, p1.alive_out, dst.bn1);
        auto rows = detail::gather_rows(src.conv2.weight.value, p2.alive_out, src.out_channels * k2);
        auto& w2 = dst.conv2.weight.value;
        const int a1 = static_cast<int>(p2.alive_in.size());
        for (std::size_t o = 0; o < p2.alive_out.size(); ++o)
            for (int j = 0; j < a1; ++j)
                std::copy_n(rows.begin() + (static_cast<std::size_t>(o) * src.out_channels + p2.alive_in[j]) * k2, k2,
                            w2.begin() + (static_cast<std::size_t>(o) * a1 + j) * k2);
        detail::slice_norm(src.bn2, p2.alive_out, dst.bn2);
        if (src.proj) {
            dst.proj->weight.value = src.proj->weight.value;
            *dst.proj_bn = *src.proj_bn;
        }
    }
    pm.fc_.weight.value = model.fc().weight.value;
    pm.fc_.bias.value = model.fc().bias.value;

    const Tensor<float> x = probe_inputs(model.spec(), probes, probe_seed);
    const auto full = model.forward(x, GatePolicy::fixed, &plan.masks).logits;
    const auto small = pm.forward(x);
    pm.certificate.probes = probes;
    pm.certificate.tolerance = tolerance;
    pm.certificate.max_abs_deviation = max_abs_diff<float>(full.span(), small.span());
    if (!(pm.certificate.max_abs_deviation <= tolerance))
        throw PruningDefect("pruned model deviates from masked full model by " +
                            std::to_string(pm.certificate.max_abs_deviation) + " (tolerance " +
                            std::to_string(tolerance) + ")");
    return pm;
}

} // namespace ppp
