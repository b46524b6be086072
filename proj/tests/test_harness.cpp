#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "desk_fixture.hpp"
#include "ppp/ppp.hpp"

using namespace ppp;

namespace {

RunConfig small_run(RunMode mode, int epochs) {
    RunConfig c;
    c.mode = mode;
    c.schedule.epochs = epochs;
    c.data.synth.samples_per_identity = 40;
    return c;
}

std::vector<int> all_indices(const Dataset& d) {
    std::vector<int> v(d.size());
    std::iota(v.begin(), v.end(), 0);
    return v;
}

} // namespace

TEST(RunConfigFile, RoundTripsEveryField) {
    RunConfig c = small_run(RunMode::noreg, 3);
    c.seed = 42;
    c.loss.beta = 2.5;
    c.optimizer.lr_gate = 0.2;
    c.batch.identities_per_batch = 2;
    c.data.synth.layout = "partitioned";
    c.balanced_gate_init = false;
    const auto j = run_config_to_json(c);
    const auto back = run_config_from_json(j);
    EXPECT_EQ(run_config_to_json(back).dump(), j.dump());
    EXPECT_EQ(back.mode, RunMode::noreg);
    EXPECT_EQ(back.data.synth.layout, "partitioned");
}

TEST(RunConfigFile, RejectsUnknownKeysAtEveryLevel) {
    const auto j = run_config_to_json(RunConfig{});
    for (const std::string where : {"", "loss", "batch", "optimizer", "schedule", "data", "model"}) {
        auto bad = j;
        (where.empty() ? bad : bad[where])["lerning_rate"] = 1;
        EXPECT_THROW(run_config_from_json(bad), ConfigurationError) << where;
    }
    auto synth = j;
    synth["data"]["synthetic"]["noise"] = 1.0;
    EXPECT_THROW(run_config_from_json(synth), ConfigurationError);
}

TEST(RunConfigFile, RejectsInvalidValues) {
    auto j = run_config_to_json(RunConfig{});
    j["mode"] = "pruned";
    EXPECT_THROW(run_config_from_json(j), ConfigurationError);
    j = run_config_to_json(RunConfig{});
    j["loss"]["tau"] = 1.5;
    EXPECT_THROW(run_config_from_json(j), ConfigurationError);
    j = run_config_to_json(RunConfig{});
    j["batch"]["samples_per_identity"] = 1;
    EXPECT_THROW(run_config_from_json(j), ConfigurationError);
    j = run_config_to_json(RunConfig{});
    j["optimizer"]["momentum"] = 1.0;
    EXPECT_THROW(run_config_from_json(j), ConfigurationError);
    j = run_config_to_json(RunConfig{});
    j["seed"] = "one";
    EXPECT_THROW(run_config_from_json(j), ConfigurationError);
}

TEST(RunConfigFile, DefaultsFollowTheMethod) {
    const RunConfig c;
    EXPECT_EQ(c.loss.alpha, 10.0);
    EXPECT_EQ(c.loss.beta, 10.0);
    EXPECT_EQ(c.loss.tau, 0.7);
    EXPECT_EQ(c.loss.target_rate, 0.6);
    EXPECT_EQ(c.optimizer.lr_gate, 0.1);
    EXPECT_EQ(c.optimizer.lr_network, 0.01);
    EXPECT_EQ(c.model.widths, (std::vector<int>{16, 32, 64}));
    EXPECT_EQ(c.model.blocks_per_stage, 2);
}

TEST(RunConfigFile, NoRegOnlyDropsAlpha) {
    RunConfig p = small_run(RunMode::ppp, 2), n = p;
    n.mode = RunMode::noreg;
    EXPECT_EQ(n.effective_loss().alpha, 0.0);
    EXPECT_EQ(n.effective_loss().beta, p.effective_loss().beta);
    EXPECT_EQ(n.effective_loss().tau, p.effective_loss().tau);
    EXPECT_EQ(n.effective_loss().target_rate, p.effective_loss().target_rate);
    EXPECT_EQ(json(n.effective_model()).dump(), json(p.effective_model()).dump());
    n.mode = RunMode::vanilla;
    EXPECT_FALSE(n.effective_model().gated);
}

TEST(RunConfigFile, BalancedInitSetsTheHeadBias) {
    RunConfig c;
    EXPECT_NEAR(c.effective_model().gate.init_keep_logit, *balanced_keep_logit(0.7, 8), 0.0);
    c.balanced_gate_init = false;
    EXPECT_EQ(c.effective_model().gate.init_keep_logit, c.model.gate.init_keep_logit);
}

TEST(Train, ZeroWeightsReproduceTaskOnlyTrace) {
    // Reference: the gated network trained on the task loss alone, written
    // out step by step with the same batch order and gumbel stream.
    RunConfig cfg = small_run(RunMode::ppp, 2);
    cfg.loss.alpha = 0.0;
    cfg.loss.beta = 0.0;
    auto [train_set, test_set] = load_data(cfg);
    const auto result = train(cfg, train_set);

    const ModelSpec spec = cfg.effective_model();
    GatedResNet model(spec, cfg.seed);
    BatchComposition comp = cfg.batch;
    comp.seed = cfg.seed * 7919 + 17;
    IdentityBatchSampler sampler(train_set, comp);
    Rng gumbel(cfg.seed * 104729 + 3);
    Sgd opt(cfg.optimizer);
    std::vector<std::vector<std::vector<int>>> epochs;
    int total = 0;
    for (int e = 0; e < cfg.schedule.epochs; ++e) {
        epochs.push_back(sampler.epoch());
        total += static_cast<int>(epochs.back().size());
    }
    int step = 0;
    for (const auto& ep : epochs)
        for (const auto& idx : ep) {
            Tape tape;
            auto res = model.forward_train(train_set.gather(idx), GatePolicy::sample, gumbel, tape);
            Tensor<float> dlogits;
            const double task = cross_entropy(res.logits, train_set.gather_labels(idx), &dlogits);
            ASSERT_EQ(result.steps_log[step].loss.total, task) << "step " << step;
            model.zero_grad();
            model.backward(dlogits, tape);
            opt.step(model, 0.5 * (1.0 + std::cos(3.14159265358979323846 * step / total)));
            ++step;
        }
    EXPECT_EQ(step, result.steps);
    EXPECT_EQ(checkpoint_bytes(model, cfg, step), checkpoint_bytes(result.model, cfg, result.steps));
}

TEST(Train, IdenticalConfigsGiveBitwiseIdenticalCheckpoints) {
    for (RunMode mode : {RunMode::vanilla, RunMode::ppp}) {
        const RunConfig cfg = small_run(mode, 2);
        auto [train_set, test_set] = load_data(cfg);
        const auto a = train(cfg, train_set);
        const auto b = train(cfg, train_set);
        EXPECT_EQ(checkpoint_bytes(a.model, cfg, a.steps), checkpoint_bytes(b.model, cfg, b.steps)) << to_string(mode);
        RunConfig other = cfg;
        other.seed = 2;
        const auto c = train(other, train_set);
        EXPECT_NE(checkpoint_bytes(a.model, cfg, a.steps), checkpoint_bytes(c.model, cfg, c.steps));
    }
}

TEST(Train, LogsLossBreakdownAndKeepRate) {
    const RunConfig cfg = small_run(RunMode::ppp, 1);
    auto [train_set, test_set] = load_data(cfg);
    int observed = 0;
    const auto r = train(cfg, train_set, nullptr, [&](const EpochLog&) { ++observed; });
    EXPECT_EQ(observed, 1);
    ASSERT_FALSE(r.steps_log.empty());
    for (const auto& s : r.steps_log) {
        EXPECT_NEAR(s.loss.total, s.loss.task + 10.0 * s.loss.prototype + 10.0 * s.loss.target, 1e-9);
        EXPECT_GE(s.keep_rate, 0.0);
        EXPECT_LE(s.keep_rate, 1.0);
    }
}

TEST(Train, DivergenceAbortsWithDiagnostics) {
    RunConfig cfg = small_run(RunMode::vanilla, 3);
    cfg.optimizer.lr_network = 1e8;
    cfg.schedule.cosine = false;
    auto [train_set, test_set] = load_data(cfg);
    try {
        train(cfg, train_set);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite loss"), std::string::npos);
    }
}

TEST(Train, SpecDatasetMismatchIsConfigurationError) {
    RunConfig cfg = small_run(RunMode::vanilla, 1);
    auto [train_set, test_set] = load_data(cfg);
    cfg.model.num_classes = 5;
    EXPECT_THROW(train(cfg, train_set), ConfigurationError);
}

TEST(Train, VanillaReachesHighTrainAccuracy) {
    const auto cfg = fixture::short_run(RunMode::vanilla, 20);
    auto [train_set, test_set] = fixture::desk_data();
    const auto r = train(cfg, train_set);
    EXPECT_GE(r.epochs.back().train_accuracy, 95.0);
}

TEST(Checkpoint, RoundTripAndVersionCheck) {
    const RunConfig cfg = small_run(RunMode::ppp, 1);
    auto [train_set, test_set] = load_data(cfg);
    const auto r = train(cfg, train_set);
    const auto path = (std::filesystem::temp_directory_path() / "ppp_ckpt_roundtrip.bin").string();
    save_checkpoint(path, r.model, cfg, r.steps);
    const auto back = load_checkpoint(path);
    EXPECT_EQ(back.step, r.steps);
    EXPECT_EQ(run_config_to_json(back.config).dump(), run_config_to_json(cfg).dump());
    EXPECT_EQ(checkpoint_bytes(back.model, back.config, back.step), read_file(path));
    auto c = checkpoint_container(r.model, cfg, r.steps);
    c.version = GatedResNet::kFormatVersion + 1;
    write_file(path, serialize(c));
    EXPECT_THROW(load_checkpoint(path), IngestionError);
    std::filesystem::remove(path);
}

TEST(Evaluate, VanillaUtilizationIsExactlyOne) {
    const RunConfig cfg = small_run(RunMode::vanilla, 1);
    auto [train_set, test_set] = load_data(cfg);
    const auto r = train(cfg, train_set);
    const auto row = evaluate(r.model, test_set, EvalType::vanilla, {});
    EXPECT_EQ(row.util_propagated, 1.0);
    EXPECT_EQ(row.util_output_only, 1.0);
    EXPECT_EQ(row.method, "vanilla");
    EXPECT_THROW(evaluate(r.model, test_set, EvalType::prototype, {}), ConfigurationError);
}

TEST(Evaluate, ForcedAllOnesPrototypeMatchesAllGatesOn) {
    const auto& model = fixture::trained_ppp();
    auto [train_set, test_set] = fixture::desk_data();
    EvalOptions opt;
    opt.forced_masks = model.all_on_masks();
    const auto row = evaluate(model, test_set, EvalType::prototype, opt);
    const auto idx = all_indices(test_set);
    const auto pred = argmax_rows(model.forward(test_set.gather(idx), GatePolicy::all_on).logits);
    EXPECT_EQ(row.accuracy_pct, accuracy_pct(pred, test_set.labels()));
    EXPECT_EQ(row.util_propagated, 1.0);
    for (const auto& ir : row.identities) EXPECT_EQ(ir.certificate_deviation, 0.0);
}

TEST(Evaluate, PrototypeEvaluationNeverTouchesFullModelAfterPruning) {
    const auto& model = fixture::trained_ppp();
    auto [train_set, test_set] = fixture::desk_data();
    const auto before = model.forward_count();
    model.forward(test_set.gather({0, 1}), GatePolicy::eval);
    EXPECT_EQ(model.forward_count(), before + 1);
    EXPECT_NO_THROW(evaluate(model, test_set, EvalType::prototype, {}));
}

TEST(Evaluate, MissingIdentityIsOmittedAndListed) {
    const auto& model = fixture::trained_ppp();
    auto [train_set, test_set] = fixture::desk_data();
    std::vector<int> keep;
    for (int i = 0; i < test_set.size(); ++i)
        if (test_set[i].identity != 3) keep.push_back(i);
    std::vector<int> omitted;
    const auto row = evaluate(model, test_set.subset(keep), EvalType::prototype, {}, &omitted);
    EXPECT_EQ(omitted, std::vector<int>{3});
    EXPECT_EQ(row.identities.size(), 7u);
}

TEST(Evaluate, RepeatedEvaluationGivesByteIdenticalReports) {
    const auto& model = fixture::trained_ppp();
    auto [train_set, test_set] = fixture::desk_data();
    auto run = [&] {
        EvalReport r;
        r.rows.push_back(evaluate(model, test_set, EvalType::single, {}));
        r.rows.push_back(evaluate(model, test_set, EvalType::prototype, {}));
        return eval_report_bytes(r);
    };
    EXPECT_EQ(run(), run());
}

TEST(Report, PersistsAndReloadsIdentically) {
    EvalReport r;
    MethodRow row;
    row.method = "ppp";
    row.type = "prototype";
    row.accuracy_pct = 97.25;
    row.util_propagated = 0.5123456789012345;
    row.util_output_only = 0.61;
    row.mean_dispersion = 0.125;
    row.layer_dispersion = {0.1, 0.2};
    row.identities.push_back({4, 50, 96.0, 0.5, 0.6, 0.1, {0.1, 0.1}, 0.0});
    r.rows.push_back(row);
    MethodRow vanilla;
    vanilla.method = vanilla.type = "vanilla";
    r.rows.push_back(vanilla);
    r.omitted_identities = {7};
    r.metadata = {{"seed", 1}};
    const auto bytes = eval_report_bytes(r);
    const auto back = eval_report_from_json(json::parse(bytes));
    EXPECT_EQ(eval_report_bytes(back), bytes);
    EXPECT_FALSE(back.rows[1].mean_dispersion.has_value());
    EXPECT_THROW(eval_report_from_json(json{{"format", "other"}}), IngestionError);
}

TEST(Report, PrintsReferenceRowsAsNonReproducible) {
    MethodRow row;
    row.method = row.type = "vanilla";
    const auto text = format_report({row});
    EXPECT_NE(text.find("NOT reproducible"), std::string::npos);
    EXPECT_NE(text.find("94.4"), std::string::npos);
    EXPECT_NE(text.find("53.7"), std::string::npos);
}
