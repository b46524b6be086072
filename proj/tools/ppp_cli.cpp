// Command line front end: train, enroll, prune, eval, report, selftest.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "ppp/ppp.hpp"

using namespace ppp;
namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitPruningDefect = 3;

int exit_code_for(const Error& e) {
    if (dynamic_cast<const PruningDefect*>(&e)) return kExitPruningDefect;
    if (dynamic_cast<const ConfigurationError*>(&e)) return 4;
    if (dynamic_cast<const IngestionError*>(&e)) return 5;
    if (dynamic_cast<const ContractViolation*>(&e)) return 6;
    if (dynamic_cast<const InsufficientEnrollment*>(&e)) return 7;
    if (dynamic_cast<const DivergenceError*>(&e)) return 8;
    return 1;
}

struct Paths {
    fs::path root;

    std::string out(const std::string& given, const std::string& fallback) const {
        const fs::path p = given.empty() ? root / fallback : fs::path(given);
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        return p.string();
    }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// -- train --------------------------------------------------------------------

struct TrainArgs {
    std::string config, out, init;
    bool quiet = false;
};

int run_train(const TrainArgs& a, const Paths& paths) {
    const RunConfig cfg = run_config_from_json(read_json_file(a.config));
    auto [train_set, test_set] = load_data(cfg);
    std::optional<Checkpoint> backbone;
    const std::string init = a.init.empty() ? cfg.init_from : a.init;
    if (!init.empty()) backbone = load_checkpoint(init);
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = train(cfg, train_set, backbone ? &backbone->model : nullptr, [&](const EpochLog& e) {
        if (!a.quiet)
            std::cout << "epoch " << e.epoch << "  loss " << e.mean_loss << "  train acc " << e.train_accuracy
                      << "%  keep " << e.mean_keep_rate << "  (" << seconds_since(t0) << " s)\n";
    });
    const std::string path = paths.out(a.out, to_string(cfg.mode) + ".ckpt");
    save_checkpoint(path, r.model, cfg, r.steps);
    std::cout << "checkpoint " << path << " (" << r.steps << " steps)\n";
    return 0;
}

// -- enroll -------------------------------------------------------------------

struct EnrollArgs {
    std::string checkpoint, out;
    int identity = 0;
    int samples = 0;
    double tau = 0.0;
};

int run_enroll(const EnrollArgs& a, const Paths& paths) {
    const auto ck = load_checkpoint(a.checkpoint);
    auto [train_set, test_set] = load_data(ck.config);
    const auto idx = test_set.indices_of(a.identity);
    if (idx.empty()) throw InsufficientEnrollment("identity " + std::to_string(a.identity) + " has no held-out examples");
    const int n = a.samples > 0 ? a.samples : ck.config.enroll_size;
    const std::vector<int> use(idx.begin(), idx.begin() + std::min<std::size_t>(idx.size(), n));
    const double tau = a.tau > 0.0 ? a.tau : ck.config.loss.tau;
    const auto proto = enroll(ck.model, test_set.gather(use), test_set.gather_identities(use), tau);
    const std::string path = paths.out(a.out, "prototype_" + std::to_string(a.identity) + ".json");
    save_prototype(path, proto);
    std::cout << "prototype " << path << " (identity " << a.identity << ", " << use.size() << " samples)\n";
    return 0;
}

// -- prune --------------------------------------------------------------------

struct PruneArgs {
    std::string checkpoint, prototype, out;
    bool all_ones = false;
};

int run_prune(const PruneArgs& a, const Paths& paths) {
    const std::string bytes = read_file(a.checkpoint);
    const auto ck = checkpoint_from_bytes(bytes, a.checkpoint);
    if (a.all_ones == !a.prototype.empty())
        throw ConfigurationError("prune needs exactly one of --prototype or --all-ones");
    PruningPlan plan;
    Provenance prov;
    prov.source_digest = digest(bytes);
    prov.target_rate = ck.config.loss.target_rate;
    if (a.all_ones) {
        plan = full_plan(ck.model);
        prov.tau = ck.config.loss.tau;
    } else {
        const auto proto = load_prototype(a.prototype);
        plan = build_plan(ck.model, proto);
        prov.identity = proto.identity.value;
        prov.tau = proto.tau;
    }
    const auto pm = prune(ck.model, plan, prov);
    const std::string path = paths.out(a.out, "pruned_" + std::to_string(prov.identity) + ".bin");
    save_pruned(path, pm);
    std::cout << std::setprecision(3) << "certificate: probes " << pm.certificate.probes << ", max abs deviation "
              << pm.certificate.max_abs_deviation << ", tolerance " << pm.certificate.tolerance << "\n"
              << std::setprecision(6) << "utilization " << utilization_rate(plan, ck.model) << " (propagated), "
              << utilization_output_only(plan, ck.model) << " (output only)\n"
              << "pruned model " << path << "\n";
    return 0;
}

// -- eval ---------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, mode, out, method;
    int enroll_size = 0;
};

int run_eval(const EvalArgs& a, const Paths& paths) {
    const std::string bytes = read_file(a.checkpoint);
    const auto ck = checkpoint_from_bytes(bytes, a.checkpoint);
    auto [train_set, test_set] = load_data(ck.config);
    EvalOptions opt;
    opt.method = a.method.empty() ? to_string(ck.config.mode) : a.method;
    opt.enroll_size = a.enroll_size > 0 ? a.enroll_size : ck.config.enroll_size;
    opt.tau = ck.config.loss.tau;
    const auto t0 = std::chrono::steady_clock::now();
    EvalReport report;
    report.rows.push_back(evaluate(ck.model, test_set, eval_type_from_string(a.mode), opt, &report.omitted_identities));
    report.metadata = {{"checkpoint_digest", digest(bytes)},
                       {"mode", to_string(ck.config.mode)},
                       {"seed", ck.config.seed},
                       {"step", ck.step},
                       {"test_examples", test_set.size()},
                       {"enroll_size", opt.enroll_size},
                       {"tau", opt.tau},
                       {"probe_seed", opt.probe_seed}};
    const std::string path = paths.out(a.out, "eval_" + opt.method + "_" + a.mode + ".json");
    write_file(path, eval_report_bytes(report));
    std::cout << format_report(report.rows);
    if (!report.omitted_identities.empty()) {
        std::cout << "omitted identities (no test examples):";
        for (int p : report.omitted_identities) std::cout << " " << p;
        std::cout << "\n";
    }
    std::cout << "evaluation took " << seconds_since(t0) << " s; report " << path << "\n";
    return 0;
}

// -- report -------------------------------------------------------------------

struct ReportArgs {
    std::vector<std::string> inputs;
    std::string out;
};

int run_report(const ReportArgs& a, const Paths& paths) {
    EvalReport merged;
    json sources = json::array();
    for (const auto& in : a.inputs) {
        const auto r = eval_report_from_json(read_json_file(in));
        merged.rows.insert(merged.rows.end(), r.rows.begin(), r.rows.end());
        for (int p : r.omitted_identities)
            if (std::find(merged.omitted_identities.begin(), merged.omitted_identities.end(), p) ==
                merged.omitted_identities.end())
                merged.omitted_identities.push_back(p);
        sources.push_back(r.metadata);
    }
    merged.metadata = {{"sources", sources}};
    const std::string path = paths.out(a.out, "report.json");
    write_file(path, eval_report_bytes(merged));
    std::cout << format_report(merged.rows) << "report " << path << "\n";
    return 0;
}

// -- selftest -----------------------------------------------------------------

int run_selftest() {
    int failures = 0;
    auto check = [&](bool ok, const std::string& what) {
        std::cout << (ok ? "ok    " : "FAIL  ") << what << "\n";
        failures += ok ? 0 : 1;
    };

    // gate straight-through gradient on a small toy gate
    {
        GateConfig g;
        g.hidden_width = 4;
        GateModule<double> gate("selftest.gate", 3, 5, g);
        Rng rng(3);
        gate.init(rng);
        Tensor<double> probe(4, 3, 5, 5);
        fill_normal<double>(probe.span(), rng);
        check(straight_through_grad_check(gate, probe).max_rel_error <= 1e-3, "gate gradient check");
    }
    // regularized objective gradient
    check(total_loss_grad_check(LossGradCheckSetup{}) <= 1e-3, "loss gradient check");

    // loss hand values
    {
        BatchGateRecord r;
        r.identities = {0, 0};
        r.widths = {5};
        r.z = {{0, 0, 0, 0, 0, 0, 0, 0, 1, 1}};
        const auto b = total_loss(2.3, r, LossConfig{});
        check(b.prototype == 1.0 && std::abs(b.target - 0.16) < 1e-15 && std::abs(b.total - 13.9) < 1e-12,
              "loss hand values");
    }

    // pruning equivalence on an untrained desk-scale model
    {
        GatedResNet model(ModelSpec{}, 11);
        Rng rng(12);
        bool ok = true;
        for (int t = 0; t < 3 && ok; ++t) {
            MaskSet masks;
            for (int w : model.gated_widths()) {
                std::vector<int> m(w);
                for (auto& v : m) v = static_cast<int>(rng() % 2);
                m[rng() % w] = 1;
                masks.push_back(m);
            }
            try {
                ok = prune(model, plan_from_masks(model, masks)).certificate.max_abs_deviation <= 1e-5;
            } catch (const PruningDefect&) {
                ok = false;
            }
        }
        check(ok, "pruning equivalence on random masks");
        check(prune(model, full_plan(model)).certificate.max_abs_deviation == 0.0, "all-ones pruning is exact");
    }

    // synthetic data determinism and batch composition
    {
        SynthConfig c;
        c.samples_per_identity = 16;
        const auto a = synth_identity_dataset(c), b = synth_identity_dataset(c);
        check(a == b, "synthetic dataset determinism");
        IdentityBatchSampler s(a, {4, 4, 1});
        bool ok = true;
        for (const auto& batch : s.epoch()) {
            std::map<int, int> per;
            for (int i : batch) ++per[a[i].identity];
            ok = ok && per.size() == 4;
            for (const auto& [p, n] : per) ok = ok && n == 4;
        }
        check(ok, "batch composition");
    }

    std::cout << (failures ? std::to_string(failures) + " check(s) failed\n" : "all checks passed\n");
    return failures ? 9 : 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prototype-based personalized pruning: train gated networks, enroll identities, "
                 "prune, evaluate and report.\nExit codes: 0 ok, 2 usage, 3 PruningDefect, 4 ConfigurationError, "
                 "5 IngestionError, 6 ContractViolation, 7 InsufficientEnrollment, 8 DivergenceError, "
                 "9 selftest failure.\nDefault output directory: $PPP_ARTIFACT_ROOT, or the working directory."};
    app.require_subcommand(1);
    std::string root;
    if (const char* env = std::getenv("PPP_ARTIFACT_ROOT")) root = env;
    app.add_option("--artifacts", root, "Directory for default output paths (overrides PPP_ARTIFACT_ROOT)");

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "Train from a run configuration file and write a checkpoint");
    train_cmd->add_option("--config", ta.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", ta.out, "Checkpoint path (default <artifacts>/<mode>.ckpt)");
    train_cmd->add_option("--init", ta.init, "Backbone checkpoint seeding the network weights");
    train_cmd->add_flag("--quiet", ta.quiet, "No per-epoch log");

    EnrollArgs ea;
    auto* enroll_cmd = app.add_subcommand("enroll", "Compute an identity prototype from its held-out examples");
    enroll_cmd->add_option("--checkpoint", ea.checkpoint, "Gated checkpoint")->required()->check(CLI::ExistingFile);
    enroll_cmd->add_option("--identity", ea.identity, "Identity index")->required();
    enroll_cmd->add_option("--samples", ea.samples, "Enrollment batch size (default: config enroll_size)");
    enroll_cmd->add_option("--tau", ea.tau, "Binarization threshold (default: config tau)");
    enroll_cmd->add_option("--out", ea.out, "Prototype path (default <artifacts>/prototype_<id>.json)");

    PruneArgs pa;
    auto* prune_cmd = app.add_subcommand("prune", "Prune a checkpoint for one prototype and print the certificate");
    prune_cmd->add_option("--checkpoint", pa.checkpoint, "Gated checkpoint")->required()->check(CLI::ExistingFile);
    prune_cmd->add_option("--prototype", pa.prototype, "Prototype file")->check(CLI::ExistingFile);
    prune_cmd->add_flag("--all-ones", pa.all_ones, "Keep every channel instead of reading a prototype");
    prune_cmd->add_option("--out", pa.out, "Pruned model path (default <artifacts>/pruned_<id>.bin)");

    EvalArgs va;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on its held-out split");
    eval_cmd->add_option("--checkpoint", va.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--mode", va.mode, "Inference type")
        ->required()
        ->check(CLI::IsMember({"single", "prototype", "vanilla"}));
    eval_cmd->add_option("--method", va.method, "Row label (default: checkpoint mode)");
    eval_cmd->add_option("--enroll-size", va.enroll_size, "Enrollment examples per identity");
    eval_cmd->add_option("--out", va.out, "Machine-readable report (default <artifacts>/eval_<method>_<mode>.json)");

    ReportArgs ra;
    auto* report_cmd = app.add_subcommand("report", "Aggregate evaluation reports into one comparison table");
    report_cmd->add_option("inputs", ra.inputs, "Evaluation report files")->required()->check(CLI::ExistingFile);
    report_cmd->add_option("--out", ra.out, "Combined report (default <artifacts>/report.json)");

    app.add_subcommand("selftest", "Run the built-in property checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    const Paths paths{root.empty() ? fs::path(".") : fs::path(root)};
    try {
        if (*train_cmd) return run_train(ta, paths);
        if (*enroll_cmd) return run_enroll(ea, paths);
        if (*prune_cmd) return run_prune(pa, paths);
        if (*eval_cmd) return run_eval(va, paths);
        if (*report_cmd) return run_report(ra, paths);
        return run_selftest();
    } catch (const Error& e) {
        std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
