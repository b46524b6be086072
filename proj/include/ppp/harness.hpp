#pragma once

// Training loop, evaluation in the three inference types, run configuration,
// checkpoints and the comparison report.

#include <cmath>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ppp/data.hpp"
#include "ppp/losses.hpp"
#include "ppp/pruning.hpp"

namespace ppp {

enum class RunMode { ppp, noreg, vanilla };

inline std::string to_string(RunMode m) {
    switch (m) {
    case RunMode::ppp: return "ppp";
    case RunMode::noreg: return "noreg";
    case RunMode::vanilla: return "vanilla";
    }
    return "?";
}

inline RunMode run_mode_from_string(const std::string& s) {
    if (s == "ppp") return RunMode::ppp;
    if (s == "noreg") return RunMode::noreg;
    if (s == "vanilla") return RunMode::vanilla;
    throw ConfigurationError("unknown mode '" + s + "' (expected ppp, noreg or vanilla)");
}

struct OptimizerConfig {
    double lr_network = 0.01;
    double lr_gate = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
};

struct ScheduleConfig {
    int epochs = 10;
    bool cosine = true;
};

struct DataSource {
    std::string kind = "synthetic"; // synthetic | cifar10 | cifar100
    SynthConfig synth;
    std::string path;               // cifar archive directory
    int subset = 0;
    double holdout = 0.25;          // synthetic: per-identity test fraction
};

struct RunConfig {
    RunMode mode = RunMode::ppp;
    std::uint64_t seed = 1;
    ModelSpec model;
    LossConfig loss;
    BatchComposition batch;
    OptimizerConfig optimizer;
    ScheduleConfig schedule;
    DataSource data;
    std::string init_from;          // optional backbone checkpoint
    int enroll_size = 32;
    bool running_prototype = false; // cross-batch average of training prototypes
    double running_momentum = 0.9;
    int alpha_warmup_epochs = 0;    // alpha ramps linearly from 0 over these epochs
    bool balanced_gate_init = true; // start gates at balanced_keep_logit(tau, samples_per_identity)

    /// Loss weights actually optimized (NoReg drops the prototype term).
    LossConfig effective_loss() const {
        LossConfig l = loss;
        if (mode == RunMode::noreg) l.alpha = 0.0;
        return l;
    }

    ModelSpec effective_model() const {
        ModelSpec m = model;
        m.gated = mode != RunMode::vanilla;
        if (m.gated && balanced_gate_init)
            if (auto l = balanced_keep_logit(loss.tau, batch.samples_per_identity)) m.gate.init_keep_logit = *l;
        return m;
    }

    void validate() const {
        model.validate();
        loss.validate();
        if (batch.identities_per_batch < 1 || batch.samples_per_identity < 1)
            throw ConfigurationError("batch composition counts must be positive");
        if (mode != RunMode::vanilla && batch.samples_per_identity < 2)
            throw ConfigurationError("samples_per_identity must be >= 2 when training gates");
        if (schedule.epochs < 0) throw ConfigurationError("epochs must be >= 0");
        if (alpha_warmup_epochs < 0) throw ConfigurationError("alpha_warmup_epochs must be >= 0");
        if (enroll_size < 1) throw ConfigurationError("enroll_size must be >= 1");
        if (!(optimizer.lr_network >= 0 && optimizer.lr_gate >= 0 && optimizer.momentum >= 0 &&
              optimizer.momentum < 1 && optimizer.weight_decay >= 0))
            throw ConfigurationError("invalid optimizer settings");
        if (data.kind != "synthetic" && data.kind != "cifar10" && data.kind != "cifar100")
            throw ConfigurationError("data.kind must be synthetic, cifar10 or cifar100");
    }
};

namespace detail {

inline void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigurationError(where + " must be an object");
    for (const auto& [k, v] : j.items())
        if (std::find(known.begin(), known.end(), k) == known.end())
            throw ConfigurationError("unknown key '" + k + "' in " + where);
}

} // namespace detail

inline json run_config_to_json(const RunConfig& c) {
    json data{{"kind", c.data.kind}, {"holdout", c.data.holdout}};
    if (c.data.kind == "synthetic") data["synthetic"] = c.data.synth;
    else {
        data["path"] = c.data.path;
        data["subset"] = c.data.subset;
    }
    return json{{"mode", to_string(c.mode)},
                {"seed", c.seed},
                {"model", c.model},
                {"loss",
                 {{"alpha", c.loss.alpha},
                  {"beta", c.loss.beta},
                  {"tau", c.loss.tau},
                  {"target_rate", c.loss.target_rate}}},
                {"batch",
                 {{"identities_per_batch", c.batch.identities_per_batch},
                  {"samples_per_identity", c.batch.samples_per_identity}}},
                {"optimizer",
                 {{"lr_network", c.optimizer.lr_network},
                  {"lr_gate", c.optimizer.lr_gate},
                  {"momentum", c.optimizer.momentum},
                  {"weight_decay", c.optimizer.weight_decay}}},
                {"schedule", {{"epochs", c.schedule.epochs}, {"cosine", c.schedule.cosine}}},
                {"data", data},
                {"init_from", c.init_from},
                {"enroll_size", c.enroll_size},
                {"running_prototype", c.running_prototype},
                {"running_momentum", c.running_momentum},
                {"alpha_warmup_epochs", c.alpha_warmup_epochs},
                {"balanced_gate_init", c.balanced_gate_init}};
}

/// Parses a run configuration; unknown keys anywhere are rejected.
inline RunConfig run_config_from_json(const json& j) {
    using detail::reject_unknown;
    RunConfig c;
    try {
        reject_unknown(j,
                       {"mode", "seed", "model", "loss", "batch", "optimizer", "schedule", "data", "init_from",
                        "enroll_size", "running_prototype", "running_momentum", "alpha_warmup_epochs",
                        "balanced_gate_init"},
                       "run config");
        if (j.contains("mode")) c.mode = run_mode_from_string(j.at("mode").get<std::string>());
        c.seed = j.value("seed", c.seed);
        if (j.contains("model")) c.model = j.at("model").get<ModelSpec>();
        if (j.contains("loss")) {
            const auto& l = j.at("loss");
            reject_unknown(l, {"alpha", "beta", "tau", "target_rate"}, "loss");
            c.loss.alpha = l.value("alpha", c.loss.alpha);
            c.loss.beta = l.value("beta", c.loss.beta);
            c.loss.tau = l.value("tau", c.loss.tau);
            c.loss.target_rate = l.value("target_rate", c.loss.target_rate);
        }
        if (j.contains("batch")) {
            const auto& b = j.at("batch");
            reject_unknown(b, {"identities_per_batch", "samples_per_identity"}, "batch");
            c.batch.identities_per_batch = b.value("identities_per_batch", c.batch.identities_per_batch);
            c.batch.samples_per_identity = b.value("samples_per_identity", c.batch.samples_per_identity);
        }
        if (j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            reject_unknown(o, {"lr_network", "lr_gate", "momentum", "weight_decay"}, "optimizer");
            c.optimizer.lr_network = o.value("lr_network", c.optimizer.lr_network);
            c.optimizer.lr_gate = o.value("lr_gate", c.optimizer.lr_gate);
            c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
            c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
        }
        if (j.contains("schedule")) {
            const auto& s = j.at("schedule");
            reject_unknown(s, {"epochs", "cosine"}, "schedule");
            c.schedule.epochs = s.value("epochs", c.schedule.epochs);
            c.schedule.cosine = s.value("cosine", c.schedule.cosine);
        }
        if (j.contains("data")) {
            const auto& d = j.at("data");
            reject_unknown(d, {"kind", "synthetic", "path", "subset", "holdout"}, "data");
            c.data.kind = d.value("kind", c.data.kind);
            if (d.contains("synthetic")) c.data.synth = d.at("synthetic").get<SynthConfig>();
            c.data.path = d.value("path", c.data.path);
            c.data.subset = d.value("subset", c.data.subset);
            c.data.holdout = d.value("holdout", c.data.holdout);
        }
        c.init_from = j.value("init_from", c.init_from);
        c.enroll_size = j.value("enroll_size", c.enroll_size);
        c.running_prototype = j.value("running_prototype", c.running_prototype);
        c.running_momentum = j.value("running_momentum", c.running_momentum);
        c.alpha_warmup_epochs = j.value("alpha_warmup_epochs", c.alpha_warmup_epochs);
        c.balanced_gate_init = j.value("balanced_gate_init", c.balanced_gate_init);
    } catch (const json::exception& e) {
        throw ConfigurationError(std::string("run config: ") + e.what());
    }
    c.validate();
    return c;
}

/// Train / test split for a configuration.
inline std::pair<Dataset, Dataset> load_data(const RunConfig& cfg) {
    if (cfg.data.kind == "synthetic") return split_by_identity(synth_identity_dataset(cfg.data.synth), cfg.data.holdout);
    CifarOptions opt;
    opt.cifar100 = cfg.data.kind == "cifar100";
    opt.subset = cfg.data.subset;
    return {image_dataset_loader(cfg.data.path, "train", opt), image_dataset_loader(cfg.data.path, "test", opt)};
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct StepLog {
    int step = 0;
    LossBreakdown loss;
    double keep_rate = 1.0;
};

struct EpochLog {
    int epoch = 0;
    double mean_loss = 0.0;
    double train_accuracy = 0.0;
    double mean_keep_rate = 1.0;
};

struct TrainResult {
    GatedResNet model;
    RunConfig config;
    int steps = 0;
    std::vector<StepLog> steps_log;
    std::vector<EpochLog> epochs;
};

class Sgd {
public:
    explicit Sgd(OptimizerConfig cfg) : cfg_(cfg) {}

    void step(GatedResNet& model, double scale) {
        model.for_each_param([&](Param<float>& p) {
            const double lr = scale * (p.group == ParamGroup::gate ? cfg_.lr_gate : cfg_.lr_network);
            const double wd = p.decay ? cfg_.weight_decay : 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double g = double(p.grad[i]) + wd * p.value[i];
                p.velocity[i] = static_cast<float>(cfg_.momentum * p.velocity[i] + g);
                p.value[i] = static_cast<float>(p.value[i] - lr * p.velocity[i]);
            }
        });
    }

private:
    OptimizerConfig cfg_;
};

using TrainObserver = std::function<void(const EpochLog&)>;

/// Optimizes task + alpha * prototype + beta * target on identity-composed
/// minibatches. `backbone`, when given, seeds the non-gate weights.
inline TrainResult train(const RunConfig& config, const Dataset& data, const GatedResNet* backbone = nullptr,
                         const TrainObserver& observer = {}) {
    config.validate();
    const ModelSpec spec = config.effective_model();
    if (spec.in_channels != data.channels() || spec.image_size != data.height() || spec.num_classes != data.num_classes())
        throw ConfigurationError("model spec does not match dataset (channels/size/classes)");
    TrainResult out{GatedResNet(spec, config.seed), config, 0, {}, {}};
    GatedResNet& model = out.model;
    if (backbone) model.load_backbone_from(*backbone);

    const LossConfig full_loss = config.effective_loss();
    BatchComposition comp = config.batch;
    comp.seed = config.seed * 7919 + 17;
    IdentityBatchSampler sampler(data, comp);
    Rng gumbel(config.seed * 104729 + 3);
    Sgd opt(config.optimizer);

    // running prototypes: [layer][identity] -> mean keep rate
    std::vector<std::map<int, std::vector<double>>> running;

    std::vector<std::vector<std::vector<int>>> epochs;
    for (int e = 0; e < config.schedule.epochs; ++e) epochs.push_back(sampler.epoch());
    int total_steps = 0;
    for (const auto& ep : epochs) total_steps += static_cast<int>(ep.size());
    const double pi = 3.14159265358979323846;

    for (int e = 0; e < config.schedule.epochs; ++e) {
        EpochLog elog;
        elog.epoch = e;
        double loss_sum = 0.0, rate_sum = 0.0;
        int correct = 0, seen = 0;
        for (const auto& idx : epochs[e]) {
            LossConfig loss = full_loss;
            if (config.alpha_warmup_epochs > 0) {
                const double done = static_cast<double>(out.steps) /
                                    (config.alpha_warmup_epochs * std::max<std::size_t>(1, epochs[e].size()));
                loss.alpha *= std::min(1.0, done);
            }
            const Tensor<float> x = data.gather(idx);
            const std::vector<int> labels = data.gather_labels(idx);
            const std::vector<int> ids = data.gather_identities(idx);
            Tape tape;
            auto res = model.forward_train(x, spec.gated ? GatePolicy::sample : GatePolicy::all_on, gumbel, tape);
            Tensor<float> dlogits;
            StepLog slog;
            slog.step = out.steps;
            slog.loss.task = cross_entropy(res.logits, labels, &dlogits);
            std::vector<std::vector<float>> gate_grads;
            if (spec.gated) {
                const auto rec = BatchGateRecord::from_hard(res.gates, ids);
                PrototypeTargets targets = prototype_targets(rec, loss.tau);
                if (config.running_prototype) {
                    running.resize(rec.layers());
                    for (int l = 0; l < rec.layers(); ++l) {
                        for (const auto& [p, mask] : targets[l]) {
                            std::vector<double> mean(rec.widths[l], 0.0);
                            int cnt = 0;
                            for (int n = 0; n < rec.batch(); ++n)
                                if (rec.identities[n] == p) {
                                    ++cnt;
                                    for (int c = 0; c < rec.widths[l]; ++c) mean[c] += rec.at(l, n, c);
                                }
                            for (auto& v : mean) v /= cnt;
                            auto [it, fresh] = running[l].try_emplace(p, mean);
                            if (!fresh)
                                for (int c = 0; c < rec.widths[l]; ++c)
                                    it->second[c] = config.running_momentum * it->second[c] +
                                                    (1 - config.running_momentum) * mean[c];
                            targets[l][p] = binarize(it->second, loss.tau);
                        }
                    }
                }
                slog.loss.prototype = prototype_loss(rec, targets);
                slog.loss.target = target_loss(rec, loss.target_rate);
                slog.keep_rate = mean_keep_rate(rec);
                const auto g = regularizer_grad(rec, targets, loss);
                for (const auto& layer : g) gate_grads.emplace_back(layer.begin(), layer.end());
            }
            slog.loss.total = slog.loss.task + loss.alpha * slog.loss.prototype + loss.beta * slog.loss.target;
            if (!std::isfinite(slog.loss.total))
                throw DivergenceError("non-finite loss at step " + std::to_string(out.steps) + " (task " +
                                      std::to_string(slog.loss.task) + ", prototype " +
                                      std::to_string(slog.loss.prototype) + ", target " +
                                      std::to_string(slog.loss.target) + ")");
            model.zero_grad();
            model.backward(dlogits, tape, gate_grads);
            const double scale = config.schedule.cosine
                                     ? 0.5 * (1.0 + std::cos(pi * out.steps / std::max(1, total_steps)))
                                     : 1.0;
            opt.step(model, scale);

            const auto pred = argmax_rows(res.logits);
            for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
            seen += static_cast<int>(pred.size());
            loss_sum += slog.loss.total;
            rate_sum += slog.keep_rate;
            out.steps_log.push_back(slog);
            ++out.steps;
        }
        const double nb = std::max<std::size_t>(1, epochs[e].size());
        elog.mean_loss = loss_sum / nb;
        elog.mean_keep_rate = rate_sum / nb;
        elog.train_accuracy = seen ? 100.0 * correct / seen : 0.0;
        out.epochs.push_back(elog);
        if (observer) observer(elog);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
    GatedResNet model;
    RunConfig config;
    int step = 0;
};

inline Container checkpoint_container(const GatedResNet& model, const RunConfig& cfg, int step) {
    return model.to_container(json{{"format", "ppp-checkpoint"},
                                   {"config", run_config_to_json(cfg)},
                                   {"seed", cfg.seed},
                                   {"step", step}});
}

inline std::string checkpoint_bytes(const GatedResNet& model, const RunConfig& cfg, int step) {
    return serialize(checkpoint_container(model, cfg, step));
}

inline void save_checkpoint(const std::string& path, const GatedResNet& model, const RunConfig& cfg, int step) {
    write_file(path, checkpoint_bytes(model, cfg, step));
}

inline Checkpoint checkpoint_from_bytes(const std::string& bytes, const std::string& context) {
    const Container c = deserialize(bytes, std::string(GatedResNet::kMagic, 8), GatedResNet::kFormatVersion, context);
    Checkpoint ck{GatedResNet::from_container(c), {}, 0};
    try {
        ck.config = run_config_from_json(c.header.at("config"));
        ck.step = c.header.at("step").get<int>();
    } catch (const json::exception& e) {
        throw IngestionError(context + ": " + e.what());
    }
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_bytes(read_file(path), path); }

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum class EvalType { single, prototype, vanilla };

inline std::string to_string(EvalType t) {
    switch (t) {
    case EvalType::single: return "single";
    case EvalType::prototype: return "prototype";
    case EvalType::vanilla: return "vanilla";
    }
    return "?";
}

inline EvalType eval_type_from_string(const std::string& s) {
    if (s == "single") return EvalType::single;
    if (s == "prototype") return EvalType::prototype;
    if (s == "vanilla") return EvalType::vanilla;
    throw ConfigurationError("unknown evaluation type '" + s + "'");
}

struct IdentityResult {
    int identity = 0;
    int examples = 0;
    double accuracy_pct = 0.0;
    double util_propagated = 1.0;
    double util_output_only = 1.0;
    double dispersion = 0.0;
    std::vector<double> layer_dispersion;
    double certificate_deviation = 0.0;
};

struct MethodRow {
    std::string method; // vanilla | ppp | noreg
    std::string type;   // vanilla | single | prototype
    double accuracy_pct = 0.0;
    double util_propagated = 1.0;
    double util_output_only = 1.0;
    std::optional<double> mean_dispersion;
    std::vector<double> layer_dispersion;
    std::vector<IdentityResult> identities;
};

struct EvalReport {
    std::vector<MethodRow> rows;
    std::vector<int> omitted_identities;
    json metadata = json::object();
};

inline json to_json(const MethodRow& r) {
    json ids = json::array();
    for (const auto& i : r.identities)
        ids.push_back({{"identity", i.identity},
                       {"examples", i.examples},
                       {"accuracy_pct", i.accuracy_pct},
                       {"util_propagated", i.util_propagated},
                       {"util_output_only", i.util_output_only},
                       {"dispersion", i.dispersion},
                       {"layer_dispersion", i.layer_dispersion},
                       {"certificate_deviation", i.certificate_deviation}});
    return json{{"method", r.method},
                {"type", r.type},
                {"accuracy_pct", r.accuracy_pct},
                {"util_propagated", r.util_propagated},
                {"util_output_only", r.util_output_only},
                {"mean_dispersion", r.mean_dispersion ? json(*r.mean_dispersion) : json(nullptr)},
                {"layer_dispersion", r.layer_dispersion},
                {"identities", ids}};
}

inline MethodRow method_row_from_json(const json& j) {
    MethodRow r;
    r.method = j.at("method").get<std::string>();
    r.type = j.at("type").get<std::string>();
    r.accuracy_pct = j.at("accuracy_pct").get<double>();
    r.util_propagated = j.at("util_propagated").get<double>();
    r.util_output_only = j.at("util_output_only").get<double>();
    if (!j.at("mean_dispersion").is_null()) r.mean_dispersion = j.at("mean_dispersion").get<double>();
    r.layer_dispersion = j.at("layer_dispersion").get<std::vector<double>>();
    for (const auto& i : j.at("identities"))
        r.identities.push_back({i.at("identity").get<int>(), i.at("examples").get<int>(),
                                i.at("accuracy_pct").get<double>(), i.at("util_propagated").get<double>(),
                                i.at("util_output_only").get<double>(), i.at("dispersion").get<double>(),
                                i.at("layer_dispersion").get<std::vector<double>>(),
                                i.at("certificate_deviation").get<double>()});
    return r;
}

inline json eval_report_to_json(const EvalReport& r) {
    json rows = json::array();
    for (const auto& row : r.rows) rows.push_back(to_json(row));
    return json{{"format", "ppp-eval-report"},
                {"version", 1},
                {"rows", rows},
                {"omitted_identities", r.omitted_identities},
                {"metadata", r.metadata}};
}

inline EvalReport eval_report_from_json(const json& j) {
    try {
        if (j.at("format") != "ppp-eval-report") throw IngestionError("not an evaluation report");
        EvalReport r;
        for (const auto& row : j.at("rows")) r.rows.push_back(method_row_from_json(row));
        r.omitted_identities = j.at("omitted_identities").get<std::vector<int>>();
        r.metadata = j.at("metadata");
        return r;
    } catch (const json::exception& e) {
        throw IngestionError(std::string("evaluation report: ") + e.what());
    }
}

/// Canonical byte form of the machine-readable report.
inline std::string eval_report_bytes(const EvalReport& r) { return eval_report_to_json(r).dump(2) + "\n"; }

inline double accuracy_pct(const std::vector<int>& pred, const std::vector<int>& labels) {
    if (pred.empty()) return 0.0;
    int c = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) c += pred[i] == labels[i];
    return 100.0 * c / static_cast<double>(pred.size());
}

/// Utilization for explicit masks without the degenerate-layer repair
/// (a per-input pattern may legitimately switch off a whole branch).
inline std::pair<double, double> mask_utilization(const GatedResNet& model, const MaskSet& masks) {
    PruningPlan plan;
    plan.masks = masks;
    for (const auto& b : model.blocks()) {
        LayerPlan p1{b.gate1_id, b.out_channels, b.in_channels, alive_indices(masks[b.gate1_id]), iota_vec(b.in_channels), {}};
        LayerPlan p2{b.gate2_id, b.out_channels, b.out_channels, alive_indices(masks[b.gate2_id]), p1.alive_out, {}};
        plan.layers.push_back(std::move(p1));
        plan.layers.push_back(std::move(p2));
    }
    return {utilization_rate(plan, model), utilization_output_only(plan, model)};
}

struct EvalOptions {
    std::string method;       // label for the row; defaults to the checkpoint mode
    int enroll_size = 32;
    double tau = 0.7;
    int probes = 100;
    std::uint64_t probe_seed = 1234;
    int eval_batch = 64;
    std::optional<MaskSet> forced_masks; // prototype type: bypass enrollment
};

namespace detail {

template <typename F>
std::vector<int> predict_batched(const Dataset& data, const std::vector<int>& idx, int batch, F&& fwd) {
    std::vector<int> pred;
    for (std::size_t s = 0; s < idx.size(); s += batch) {
        std::vector<int> chunk(idx.begin() + s, idx.begin() + std::min(idx.size(), s + batch));
        auto p = argmax_rows(fwd(data.gather(chunk)));
        pred.insert(pred.end(), p.begin(), p.end());
    }
    return pred;
}

} // namespace detail

/// Evaluates one checkpoint in one inference type on a test split.
inline MethodRow evaluate(const GatedResNet& model, const Dataset& test, EvalType type, const EvalOptions& opt,
                          std::vector<int>* omitted = nullptr) {
    MethodRow row;
    row.method = opt.method.empty() ? (model.gated() ? "ppp" : "vanilla") : opt.method;
    row.type = to_string(type);
    std::vector<int> all(test.size());
    for (int i = 0; i < test.size(); ++i) all[i] = i;

    if (type == EvalType::vanilla) {
        auto pred = detail::predict_batched(test, all, opt.eval_batch,
                                            [&](const Tensor<float>& x) { return model.forward(x, GatePolicy::all_on).logits; });
        row.accuracy_pct = accuracy_pct(pred, test.labels());
        row.util_propagated = row.util_output_only = 1.0;
        return row;
    }
    if (!model.gated()) throw ConfigurationError("evaluation type '" + row.type + "' requires a gated checkpoint");

    if (type == EvalType::single) {
        std::vector<int> pred;
        double up = 0.0, uo = 0.0;
        for (std::size_t s = 0; s < all.size(); s += opt.eval_batch) {
            std::vector<int> chunk(all.begin() + s, all.begin() + std::min(all.size(), s + opt.eval_batch));
            auto res = model.forward(test.gather(chunk), GatePolicy::eval);
            auto p = argmax_rows(res.logits);
            pred.insert(pred.end(), p.begin(), p.end());
            for (std::size_t n = 0; n < chunk.size(); ++n) {
                MaskSet masks;
                for (const auto& g : res.gates) masks.push_back(g.decision(static_cast<int>(n)).hard);
                auto [a, b] = mask_utilization(model, masks);
                up += a;
                uo += b;
            }
        }
        row.accuracy_pct = accuracy_pct(pred, test.labels());
        row.util_propagated = up / std::max(1, test.size());
        row.util_output_only = uo / std::max(1, test.size());
        return row;
    }

    // Prototype type: enroll, build plan, prune, then evaluate each identity
    // on its own pruned model only.
    std::vector<int> pred_all, label_all;
    double up = 0.0, uo = 0.0, disp = 0.0;
    const int L = model.num_gated_layers();
    row.layer_dispersion.assign(L, 0.0);
    int counted = 0;
    for (int p = 0; p < test.num_identities(); ++p) {
        const auto idx = test.indices_of(p);
        if (idx.empty()) {
            if (omitted) omitted->push_back(p);
            continue;
        }
        IdentityResult ir;
        ir.identity = p;
        ir.examples = static_cast<int>(idx.size());
        std::vector<int> enroll_idx(idx.begin(), idx.begin() + std::min<std::size_t>(idx.size(), opt.enroll_size));
        Prototype proto;
        if (opt.forced_masks) {
            proto.identity.value = p;
            proto.tau = opt.tau;
            proto.sample_count = static_cast<int>(enroll_idx.size());
            for (int l = 0; l < L; ++l) {
                proto.hard_masks[l] = (*opt.forced_masks)[l];
                proto.soft_masks[l].assign((*opt.forced_masks)[l].begin(), (*opt.forced_masks)[l].end());
            }
        } else {
            proto = enroll(model, test.gather(enroll_idx), test.gather_identities(enroll_idx), opt.tau);
        }
        const PruningPlan plan = build_plan(model, proto);
        Provenance prov;
        prov.identity = p;
        prov.tau = proto.tau;
        const PrunedModel pruned = prune(model, plan, prov, opt.probes, opt.probe_seed);
        ir.certificate_deviation = pruned.certificate.max_abs_deviation;
        ir.util_propagated = utilization_rate(plan, model);
        ir.util_output_only = utilization_output_only(plan, model);

        // dispersion of this identity's test decisions around its prototype
        const auto decisions = collect_decisions(model, test.gather(idx));
        ir.layer_dispersion.resize(L);
        for (int l = 0; l < L; ++l) {
            ir.layer_dispersion[l] = dispersion(decisions.at(l), proto, l);
            row.layer_dispersion[l] += ir.layer_dispersion[l];
            ir.dispersion += ir.layer_dispersion[l] / L;
        }

        const auto before = model.forward_count();
        auto pred = detail::predict_batched(test, idx, opt.eval_batch,
                                            [&](const Tensor<float>& x) { return pruned.forward(x); });
        if (model.forward_count() != before)
            throw ContractViolation("prototype evaluation touched the full model after pruning");
        const auto labels = test.gather_labels(idx);
        ir.accuracy_pct = accuracy_pct(pred, labels);
        pred_all.insert(pred_all.end(), pred.begin(), pred.end());
        label_all.insert(label_all.end(), labels.begin(), labels.end());
        up += ir.util_propagated;
        uo += ir.util_output_only;
        disp += ir.dispersion;
        ++counted;
        row.identities.push_back(std::move(ir));
    }
    row.accuracy_pct = accuracy_pct(pred_all, label_all);
    if (counted) {
        row.util_propagated = up / counted;
        row.util_output_only = uo / counted;
        row.mean_dispersion = disp / counted;
        for (auto& v : row.layer_dispersion) v /= counted;
    }
    return row;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct ReferenceRow {
    const char* setting;
    const char* method;
    const char* type;
    const char* accuracy;
    const char* utilization;
};

/// Published full-scale results, printed for comparison only.
inline const std::vector<ReferenceRow>& reference_rows() {
    static const std::vector<ReferenceRow> rows{
        {"ResNet-56 CIFAR-10/100", "Vanilla", "N/A", "92.9 / 67.9", "100.0 / 100.0"},
        {"ResNet-56 CIFAR-10/100", "AIG", "Single", "92.1 / 67.8", "60.3 / 74.0"},
        {"ResNet-56 CIFAR-10/100", "PPP", "Single", "92.7 / 66.7", "40.2 / 52.0"},
        {"ResNet-56 CIFAR-10/100", "PPP", "Prototype", "94.4 / 68.7", "37.6 / 52.4"},
        {"ResNet-26 Keyword Spotting", "Vanilla", "N/A", "99.7", "100.0"},
        {"ResNet-26 Keyword Spotting", "PPP NoReg", "Single", "98.9", "49.3"},
        {"ResNet-26 Keyword Spotting", "PPP NoReg", "Prototype", "53.7", "32.2"},
        {"ResNet-26 Keyword Spotting", "PPP", "Single", "99.4", "37.8"},
        {"ResNet-26 Keyword Spotting", "PPP", "Prototype", "99.4", "35.4"},
    };
    return rows;
}

inline std::string format_report(const std::vector<MethodRow>& rows) {
    std::ostringstream os;
    os << std::fixed;
    os << "Desk-scale results\n";
    os << std::left << std::setw(10) << "method" << std::setw(11) << "type" << std::right << std::setw(10)
       << "acc(%)" << std::setw(12) << "util(prop)" << std::setw(12) << "util(out)" << std::setw(12)
       << "dispersion" << "\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(10) << r.method << std::setw(11) << r.type << std::right << std::setw(10)
           << std::setprecision(2) << r.accuracy_pct << std::setw(12) << std::setprecision(4) << r.util_propagated
           << std::setw(12) << r.util_output_only << std::setw(12);
        if (r.mean_dispersion) os << std::setprecision(4) << *r.mean_dispersion;
        else os << "-";
        os << "\n";
    }
    os << "\nReference rows: published full-scale results, NOT reproducible at desk scale\n";
    os << std::left << std::setw(28) << "setting" << std::setw(11) << "method" << std::setw(11) << "type"
       << std::setw(14) << "acc(%)" << "util(%)" << "\n";
    for (const auto& r : reference_rows())
        os << std::left << std::setw(28) << r.setting << std::setw(11) << r.method << std::setw(11) << r.type
           << std::setw(14) << r.accuracy << r.utilization << "\n";
    return os.str();
}

} // namespace ppp
