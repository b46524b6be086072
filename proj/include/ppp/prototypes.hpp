#pragma once

// Per-identity prototypes: the mean of hard gate decisions over a set of
// samples from one identity, and its thresholded binary form.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "ppp/model.hpp"

namespace ppp {

struct IdentityId {
    int value = 0;
    auto operator<=>(const IdentityId&) const = default;
};

struct Prototype {
    IdentityId identity;
    double tau = 0.7;
    std::map<int, std::vector<double>> soft_masks; // layer id -> mean keep rate
    std::map<int, std::vector<int>> hard_masks;    // layer id -> binarized soft mask
    int sample_count = 0;
};

inline void check_tau(double tau) {
    if (!(tau > 0.0 && tau < 1.0))
        throw ConfigurationError("threshold tau must lie in (0, 1), got " + std::to_string(tau));
}

/// Elementwise mean of the hard decisions of one identity at one layer.
inline std::vector<double> prototype_mean(const std::vector<GateDecision>& decisions) {
    if (decisions.empty()) throw InsufficientEnrollment("prototype_mean: no decisions");
    const int layer = decisions.front().layer_id;
    const int m = decisions.front().size();
    std::vector<double> sum(m, 0.0);
    for (const auto& d : decisions) {
        expects(d.layer_id == layer, "prototype_mean: decisions from layers " + std::to_string(layer) +
                                         " and " + std::to_string(d.layer_id) + " mixed");
        expects(d.size() == m, "prototype_mean: decision width mismatch");
        for (int i = 0; i < m; ++i) sum[i] += d.hard[i];
    }
    for (auto& v : sum) v /= static_cast<double>(decisions.size());
    return sum;
}

/// Step function: 1 where soft >= tau.
inline std::vector<int> binarize(const std::vector<double>& soft, double tau) {
    check_tau(tau);
    std::vector<int> out(soft.size());
    for (std::size_t i = 0; i < soft.size(); ++i) out[i] = soft[i] >= tau ? 1 : 0;
    return out;
}

/// Hard mask with the degenerate-layer rule applied: an all-zero mask keeps
/// the channel with the largest soft value (lowest index on ties).
inline std::vector<int> effective_mask(const std::vector<double>& soft, const std::vector<int>& hard) {
    expects(soft.size() == hard.size() && !hard.empty(), "effective_mask: size mismatch");
    if (std::any_of(hard.begin(), hard.end(), [](int v) { return v != 0; })) return hard;
    std::vector<int> out(hard.size(), 0);
    out[std::max_element(soft.begin(), soft.end()) - soft.begin()] = 1;
    return out;
}

/// Builds a prototype from per-layer decision lists of one identity.
inline Prototype make_prototype(IdentityId id, const std::map<int, std::vector<GateDecision>>& per_layer,
                                double tau) {
    check_tau(tau);
    Prototype p;
    p.identity = id;
    p.tau = tau;
    for (const auto& [layer, decisions] : per_layer) {
        p.soft_masks[layer] = prototype_mean(decisions);
        p.hard_masks[layer] = binarize(p.soft_masks[layer], tau);
        p.sample_count = static_cast<int>(decisions.size());
    }
    return p;
}

/// Eval-mode gate decisions for every sample of a batch, grouped by layer.
inline std::map<int, std::vector<GateDecision>> collect_decisions(const GatedResNet& model,
                                                                  const Tensor<float>& inputs) {
    expects(model.gated(), "collect_decisions: model has no gates");
    auto res = model.forward(inputs, GatePolicy::eval);
    std::map<int, std::vector<GateDecision>> out;
    for (const auto& g : res.gates)
        for (int n = 0; n < g.batch; ++n) out[g.layer_id].push_back(g.decision(n));
    return out;
}

/// Enrollment: prototype of one identity from a personal batch. The model is
/// only read.
inline Prototype enroll(const GatedResNet& model, const Tensor<float>& inputs,
                        const std::vector<int>& identities, double tau) {
    if (inputs.n() == 0 || identities.empty())
        throw InsufficientEnrollment("enroll: empty personal batch");
    expects(static_cast<int>(identities.size()) == inputs.n(), "enroll: identity count mismatch");
    for (int id : identities)
        expects(id == identities.front(), "enroll: personal batch mixes identities " +
                                              std::to_string(identities.front()) + " and " +
                                              std::to_string(id));
    return make_prototype(IdentityId{identities.front()}, collect_decisions(model, inputs), tau);
}

/// Mean squared distance of per-sample hard decisions to the prototype's
/// binary mask at one layer.
inline double dispersion(const std::vector<GateDecision>& decisions, const Prototype& proto, int layer_id) {
    auto it = proto.hard_masks.find(layer_id);
    expects(it != proto.hard_masks.end(), "dispersion: layer " + std::to_string(layer_id) +
                                              " not in prototype");
    expects(!decisions.empty(), "dispersion: no decisions");
    const auto& mask = it->second;
    double total = 0.0;
    for (const auto& d : decisions) {
        expects(d.size() == static_cast<int>(mask.size()), "dispersion: width mismatch");
        for (std::size_t i = 0; i < mask.size(); ++i) {
            const double diff = d.hard[i] - mask[i];
            total += diff * diff;
        }
    }
    return total / static_cast<double>(decisions.size());
}

/// Mask set for a full model from a prototype (degenerate layers repaired).
inline MaskSet prototype_masks(const Prototype& proto, const GatedResNet& model) {
    const auto widths = model.gated_widths();
    MaskSet out;
    for (std::size_t l = 0; l < widths.size(); ++l) {
        auto s = proto.soft_masks.find(static_cast<int>(l));
        auto h = proto.hard_masks.find(static_cast<int>(l));
        expects(s != proto.soft_masks.end() && h != proto.hard_masks.end(),
                "prototype does not cover gated layer " + std::to_string(l));
        expects(static_cast<int>(h->second.size()) == widths[l],
                "prototype width mismatch at layer " + std::to_string(l));
        out.push_back(effective_mask(s->second, h->second));
    }
    expects(proto.hard_masks.size() == widths.size(), "prototype has layers the model does not");
    return out;
}

// -- prototype file ---------------------------------------------------------

inline json prototype_to_json(const Prototype& p) {
    json layers = json::array();
    for (const auto& [l, soft] : p.soft_masks)
        layers.push_back({{"layer_id", l}, {"soft", soft}, {"hard", p.hard_masks.at(l)}});
    return json{{"format", "ppp-prototype"},
                {"version", 1},
                {"identity", p.identity.value},
                {"tau", p.tau},
                {"sample_count", p.sample_count},
                {"layers", layers}};
}

inline Prototype prototype_from_json(const json& j) {
    try {
        if (j.at("format") != "ppp-prototype") throw IngestionError("not a prototype document");
        if (j.at("version").get<int>() > 1) throw IngestionError("prototype version too new");
        Prototype p;
        p.identity.value = j.at("identity").get<int>();
        p.tau = j.at("tau").get<double>();
        p.sample_count = j.at("sample_count").get<int>();
        for (const auto& layer : j.at("layers")) {
            const int l = layer.at("layer_id").get<int>();
            p.soft_masks[l] = layer.at("soft").get<std::vector<double>>();
            p.hard_masks[l] = layer.at("hard").get<std::vector<int>>();
            if (p.soft_masks[l].size() != p.hard_masks[l].size())
                throw IngestionError("prototype layer " + std::to_string(l) + ": soft/hard width differ");
            if (binarize(p.soft_masks[l], p.tau) != p.hard_masks[l])
                throw IngestionError("prototype layer " + std::to_string(l) +
                                     ": hard mask does not match soft mask at tau");
        }
        if (p.sample_count < 1) throw IngestionError("prototype sample_count must be >= 1");
        return p;
    } catch (const json::exception& e) {
        throw IngestionError(std::string("prototype document: ") + e.what());
    }
}

inline void save_prototype(const std::string& path, const Prototype& p) {
    write_json_file(path, prototype_to_json(p));
}

inline Prototype load_prototype(const std::string& path) {
    return prototype_from_json(read_json_file(path));
}

} // namespace ppp
