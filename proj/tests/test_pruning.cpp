#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "desk_fixture.hpp"
#include "ppp/ppp.hpp"

using namespace ppp;

namespace {

ModelSpec desk_spec() { return ModelSpec{}; }

// One stage of 8 channels on 4x4 inputs with 8 input channels, so every conv
// is 3x3 8->8 over 16 output positions.
ModelSpec square_spec() {
    ModelSpec s;
    s.in_channels = 8;
    s.image_size = 4;
    s.widths = {8};
    s.blocks_per_stage = 1;
    s.num_classes = 3;
    return s;
}

ModelSpec small_spec() {
    ModelSpec s;
    s.image_size = 8;
    s.widths = {4, 8};
    s.blocks_per_stage = 1;
    s.num_classes = 3;
    return s;
}

MaskSet random_masks(const GatedResNet& model, Rng& rng, double keep) {
    std::bernoulli_distribution on(keep);
    MaskSet m;
    for (int w : model.gated_widths()) {
        std::vector<int> mask(w);
        for (auto& v : mask) v = on(rng) ? 1 : 0;
        if (std::count(mask.begin(), mask.end(), 1) == 0) mask[rng() % w] = 1;
        m.push_back(mask);
    }
    return m;
}

// Gives every normalization layer non-trivial statistics so that pruned and
// masked paths are exercised with realistic values.
void randomize_norms(GatedResNet& model, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<float> u(0.5f, 1.5f), v(-0.5f, 0.5f);
    model.for_each_array([&](const std::string& name, std::vector<float>& a) {
        if (name.find("running_var") != std::string::npos || name.find("gamma") != std::string::npos)
            for (auto& x : a) x = u(rng);
        else if (name.find("running_mean") != std::string::npos || name.find("beta") != std::string::npos)
            for (auto& x : a) x = v(rng);
    });
}

Prototype prototype_from_masks(const MaskSet& masks) {
    Prototype p;
    p.identity.value = 0;
    p.sample_count = 1;
    for (std::size_t l = 0; l < masks.size(); ++l) {
        p.hard_masks[static_cast<int>(l)] = masks[l];
        p.soft_masks[static_cast<int>(l)] = std::vector<double>(masks[l].begin(), masks[l].end());
    }
    return p;
}

} // namespace

TEST(BuildPlan, AllOnesIsIdentity) {
    GatedResNet model(desk_spec(), 1);
    const auto plan = build_plan(model, prototype_from_masks(model.all_on_masks()));
    ASSERT_EQ(plan.layers.size(), 12u);
    for (const auto& l : plan.layers) {
        EXPECT_EQ(l.alive_out, iota_vec(l.full_out));
        EXPECT_EQ(l.alive_in, iota_vec(l.full_in));
        if (!l.scatter.empty()) EXPECT_EQ(l.scatter, iota_vec(l.full_out));
    }
}

TEST(BuildPlan, FirstConvMaskPropagatesToSecondConvInputs) {
    ModelSpec s = small_spec();
    GatedResNet model(s, 2);
    auto masks = model.all_on_masks();
    masks[0] = {1, 0, 1, 0};
    const auto plan = build_plan(model, prototype_from_masks(masks));
    EXPECT_EQ(plan.layers[0].alive_out, (std::vector<int>{0, 2}));
    EXPECT_EQ(plan.layers[1].alive_in.size(), 2u);
    EXPECT_EQ(plan.layers[1].alive_out.size(), 4u);
}

TEST(BuildPlan, AliveCountsEqualPopcounts) {
    GatedResNet model(desk_spec(), 3);
    Rng rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        const auto masks = random_masks(model, rng, 0.5);
        const auto plan = build_plan(model, prototype_from_masks(masks));
        for (std::size_t l = 0; l < masks.size(); ++l)
            EXPECT_EQ(static_cast<long>(plan.layers[l].alive_out.size()),
                      std::count(masks[l].begin(), masks[l].end(), 1));
    }
}

TEST(BuildPlan, DegenerateLayerKeepsOneChannel) {
    GatedResNet model(small_spec(), 4);
    auto masks = model.all_on_masks();
    auto proto = prototype_from_masks(masks);
    proto.hard_masks[1] = {0, 0, 0, 0};
    proto.soft_masks[1] = {0.2, 0.6, 0.1, 0.0};
    const auto plan = build_plan(model, proto);
    EXPECT_EQ(plan.layers[1].alive_out, (std::vector<int>{1}));
}

TEST(BuildPlan, LayerMismatchIsContractViolation) {
    GatedResNet model(small_spec(), 5);
    auto proto = prototype_from_masks(model.all_on_masks());
    proto.hard_masks.erase(3);
    proto.soft_masks.erase(3);
    EXPECT_THROW(build_plan(model, proto), ContractViolation);
    auto wide = prototype_from_masks(model.all_on_masks());
    wide.hard_masks[0].push_back(1);
    wide.soft_masks[0].push_back(1.0);
    EXPECT_THROW(build_plan(model, wide), ContractViolation);
}

TEST(Prune, AllOnesMatchesFullModelExactly) {
    GatedResNet model(desk_spec(), 6);
    randomize_norms(model, 6);
    const auto plan = full_plan(model);
    const auto pm = prune(model, plan);
    const auto x = probe_inputs(model.spec(), 100, 99);
    const auto full = model.forward(x, GatePolicy::fixed, &plan.masks).logits;
    const auto small = pm.forward(x);
    EXPECT_EQ(max_abs_diff<float>(full.span(), small.span()), 0.0);
    EXPECT_EQ(argmax_rows(full), argmax_rows(small));
    const auto cc = count_convs(plan, model, model.spec().image_size);
    EXPECT_EQ(pm.census().conv, cc.total);
}

TEST(Prune, FilterShapesFollowMask) {
    GatedResNet model(small_spec(), 7);
    auto masks = model.all_on_masks();
    masks[0] = {1, 0, 1, 0};
    const auto pm = prune(model, build_plan(model, prototype_from_masks(masks)));
    const auto& b = pm.blocks().front();
    EXPECT_EQ(b.conv1.out_channels(), 2);
    EXPECT_EQ(b.conv2.in_channels(), 2);
    EXPECT_EQ(b.conv2.out_channels(), 4);
    EXPECT_EQ(b.bn1.gamma.value.size(), 2u);
}

TEST(Prune, RandomMasksStayWithinCertificateTolerance) {
    GatedResNet model(desk_spec(), 8);
    randomize_norms(model, 8);
    Rng rng(20);
    for (int trial = 0; trial < 10; ++trial) {
        const auto plan = build_plan(model, prototype_from_masks(random_masks(model, rng, 0.4 + 0.05 * trial)));
        const auto pm = prune(model, plan);
        EXPECT_LE(pm.certificate.max_abs_deviation, 1e-5);
        EXPECT_EQ(pm.certificate.probes, 100);
        // Fresh inputs the certificate did not see.
        const auto x = probe_inputs(model.spec(), 20, 500 + trial);
        const auto full = model.forward(x, GatePolicy::fixed, &plan.masks).logits;
        EXPECT_LE(max_abs_diff<float>(full.span(), pm.forward(x).span()), 1e-5);
    }
}

TEST(Prune, TrainedModelPrototypesCertify) {
    const auto& model = fixture::trained_ppp();
    auto [train_set, test_set] = fixture::desk_data();
    for (int p = 0; p < test_set.num_identities(); ++p) {
        const auto idx = test_set.indices_of(p);
        const std::vector<int> first(idx.begin(), idx.begin() + std::min<std::size_t>(16, idx.size()));
        const auto proto = enroll(model, test_set.gather(first), test_set.gather_identities(first), 0.7);
        const auto pm = prune(model, build_plan(model, proto));
        EXPECT_LE(pm.certificate.max_abs_deviation, 1e-5) << "identity " << p;
    }
}

TEST(Prune, ContainsNoGateParameters) {
    GatedResNet model(desk_spec(), 9);
    long long gate_params = 0;
    model.for_each_array([&](const std::string& n, std::vector<float>& v) {
        if (n.find(".gate") != std::string::npos) gate_params += static_cast<long long>(v.size());
    });
    ASSERT_GT(gate_params, 0);
    Rng rng(1);
    const auto pm = prune(model, build_plan(model, prototype_from_masks(random_masks(model, rng, 0.5))));
    EXPECT_EQ(pm.census().gate, 0);
    EXPECT_FALSE(pm.spec().gated);
}

TEST(Prune, FileRoundTripReproducesLogits) {
    GatedResNet model(desk_spec(), 10);
    randomize_norms(model, 10);
    Rng rng(2);
    auto pm = prune(model, build_plan(model, prototype_from_masks(random_masks(model, rng, 0.6))),
                    Provenance{"abc123", 5, 0.7, 0.6});
    const auto path = (std::filesystem::temp_directory_path() / "ppp_pruned_roundtrip.bin").string();
    save_pruned(path, pm);
    const auto back = load_pruned(path);
    const auto x = probe_inputs(model.spec(), 30, 3);
    EXPECT_EQ(max_abs_diff<float>(pm.forward(x).span(), back.forward(x).span()), 0.0);
    EXPECT_EQ(back.provenance.identity, 5);
    EXPECT_EQ(back.provenance.source_digest, "abc123");
    EXPECT_EQ(back.certificate.max_abs_deviation, pm.certificate.max_abs_deviation);
    EXPECT_EQ(back.plan().masks, pm.plan().masks);
    std::filesystem::remove(path);
}

TEST(Prune, FutureVersionIsRejected) {
    GatedResNet model(small_spec(), 11);
    auto c = prune(model, full_plan(model)).to_container();
    c.version = PrunedModel::kFormatVersion + 1;
    const auto path = (std::filesystem::temp_directory_path() / "ppp_pruned_future.bin").string();
    write_file(path, serialize(c));
    EXPECT_THROW(load_pruned(path), IngestionError);
    std::filesystem::remove(path);
}

TEST(Utilization, AllAliveIsOne) {
    GatedResNet model(desk_spec(), 12);
    const auto plan = full_plan(model);
    EXPECT_EQ(utilization_rate(plan, model), 1.0);
    EXPECT_EQ(utilization_output_only(plan, model), 1.0);
}

TEST(Utilization, ChainedHalfExample) {
    // conv1 keeps 4 of 8 outputs, conv2 keeps all 8 outputs but sees 4 inputs:
    // each conv keeps half of its 8*8*9 weights.
    GatedResNet model(square_spec(), 13);
    auto masks = model.all_on_masks();
    masks[0] = {1, 1, 0, 1, 0, 0, 1, 0};
    const auto plan = build_plan(model, prototype_from_masks(masks));
    const auto cc = count_convs(plan, model, 4);
    const long long stem = 8 * 8 * 9;
    EXPECT_EQ(cc.total - stem, 2 * 576);
    EXPECT_DOUBLE_EQ(static_cast<double>(cc.alive_propagated - stem) / static_cast<double>(cc.total - stem), 0.5);
    EXPECT_DOUBLE_EQ(utilization_rate(plan, model), (576.0 + 288.0 + 288.0) / (3 * 576.0));
    EXPECT_DOUBLE_EQ(utilization_output_only(plan, model), (576.0 + 288.0 + 576.0) / (3 * 576.0));
}

TEST(Utilization, MonotoneInMasks) {
    GatedResNet model(desk_spec(), 14);
    Rng rng(30);
    std::bernoulli_distribution coin(0.5);
    for (int trial = 0; trial < 50; ++trial) {
        const auto a = random_masks(model, rng, 0.3);
        auto b = a;
        for (auto& layer : b)
            for (auto& v : layer) v = v || coin(rng);
        const auto pa = plan_from_masks(model, a), pb = plan_from_masks(model, b);
        EXPECT_LE(utilization_rate(pa, model), utilization_rate(pb, model));
        EXPECT_LE(utilization_output_only(pa, model), utilization_output_only(pb, model));
    }
}

TEST(Flops, SingleConvHandValues) {
    // Stem, conv1 and conv2 are each 3x3 8->8 over a 4x4 output: 8*8*9*16 = 9216.
    GatedResNet model(square_spec(), 15);
    EXPECT_EQ(flops_estimate(full_plan(model), model, 4), 3 * 9216);
    auto masks = model.all_on_masks();
    masks[0] = {1, 0, 1, 0, 1, 0, 1, 0};
    // Halving conv1 outputs halves conv1 and, through its inputs, conv2.
    EXPECT_EQ(flops_estimate(plan_from_masks(model, masks), model, 4), 9216 + 4608 + 4608);
}

TEST(Flops, DeskNetMatchesLayerTable) {
    GatedResNet model(desk_spec(), 16);
    Rng rng(40);
    for (int trial = 0; trial < 10; ++trial) {
        const auto masks = random_masks(model, rng, 0.5);
        const auto plan = plan_from_masks(model, masks);
        auto pop = [&](int l) { return static_cast<long long>(std::count(masks[l].begin(), masks[l].end(), 1)); };
        // Rows: out_alive, in_alive, kernel area, output side.
        struct Row { long long out, in, k2, side; };
        std::vector<Row> table = {
            {16, 3, 9, 16},
            {pop(0), 16, 9, 16}, {pop(1), pop(0), 9, 16},
            {pop(2), 16, 9, 16}, {pop(3), pop(2), 9, 16},
            {pop(4), 16, 9, 8}, {pop(5), pop(4), 9, 8}, {32, 16, 1, 8},
            {pop(6), 32, 9, 8}, {pop(7), pop(6), 9, 8},
            {pop(8), 32, 9, 4}, {pop(9), pop(8), 9, 4}, {64, 32, 1, 4},
            {pop(10), 64, 9, 4}, {pop(11), pop(10), 9, 4},
        };
        long long macs = 0, params = 0;
        for (const auto& r : table) {
            macs += r.out * r.in * r.k2 * r.side * r.side;
            params += r.out * r.in * r.k2;
        }
        EXPECT_EQ(flops_estimate(plan, model, 16), macs);
        EXPECT_DOUBLE_EQ(utilization_rate(plan, model), static_cast<double>(params) / 173488.0);
    }
}
