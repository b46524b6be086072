#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "oracles.hpp"
#include "ppp/ppp.hpp"

using namespace ppp;
using namespace ppp::oracle;

namespace {

BatchGateRecord record(std::vector<int> ids, std::vector<std::vector<std::vector<int>>> layers) {
    BatchGateRecord r;
    r.identities = std::move(ids);
    for (const auto& rows : layers) {
        r.widths.push_back(static_cast<int>(rows.front().size()));
        std::vector<double> z;
        for (const auto& row : rows) z.insert(z.end(), row.begin(), row.end());
        r.z.push_back(std::move(z));
    }
    return r;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

} // namespace

TEST(PrototypeLoss, ZeroWhenIdentitiesAgree) {
    auto r = record({1, 1, 2, 2}, {{{1, 0, 1}, {1, 0, 1}, {0, 0, 1}, {0, 0, 1}}});
    EXPECT_EQ(prototype_loss(r, 0.7), 0.0);
}

TEST(PrototypeLoss, HandExample) {
    auto r = record({5, 5}, {{{1, 1}, {0, 0}}});
    auto targets = prototype_targets(r, 0.7);
    EXPECT_EQ(targets[0].at(5), (std::vector<int>{0, 0}));
    EXPECT_EQ(prototype_loss(r, 0.7), 1.0);
}

TEST(PrototypeLoss, DividesByBatchNotIdentityCount) {
    // Identity 1 averages 2/3 on its last channel, below tau, so its two
    // samples that keep that channel each miss by one. Identity 2 matches.
    auto r = record({1, 1, 1, 2}, {{{1, 1, 0}, {1, 1, 1}, {1, 1, 1}, {0, 1, 0}}});
    EXPECT_DOUBLE_EQ(prototype_loss(r, 0.7), 2.0 / 4.0);
}

TEST(PrototypeLoss, MatchesTripleLoopOracle) {
    Rng rng(1234);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    for (int trial = 0; trial < 300; ++trial) {
        auto r = random_record(rng, trial % 2 == 0);
        const double tau = u(rng);
        const double want = oracle_prototype_loss(r, tau);
        const double got = prototype_loss(r, tau);
        if (want == 0.0) EXPECT_EQ(got, 0.0);
        else EXPECT_LE(rel(got, want), 1e-10) << "trial " << trial;
    }
}

TEST(PrototypeLoss, NonNegativeAndZeroOnlyAtPrototype) {
    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        auto r = random_record(rng, true);
        const double v = prototype_loss(r, 0.7);
        EXPECT_GE(v, 0.0);
        const auto targets = prototype_targets(r, 0.7);
        bool all_equal = true;
        for (int l = 0; l < r.layers(); ++l)
            for (int n = 0; n < r.batch(); ++n)
                for (int c = 0; c < r.widths[l]; ++c)
                    all_equal &= r.at(l, n, c) == targets[l].at(r.identities[n])[c];
        EXPECT_EQ(v == 0.0, all_equal);
    }
}

TEST(PrototypeLoss, InvariantUnderPermutationWithinIdentity) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        auto r = random_record(rng, true);
        const double base = prototype_loss(r, 0.7);
        // Swap two samples that share an identity.
        for (int a = 0; a < r.batch(); ++a)
            for (int b = a + 1; b < r.batch(); ++b)
                if (r.identities[a] == r.identities[b]) {
                    auto s = r;
                    for (int l = 0; l < s.layers(); ++l)
                        for (int c = 0; c < s.widths[l]; ++c)
                            std::swap(s.z[l][a * s.widths[l] + c], s.z[l][b * s.widths[l] + c]);
                    EXPECT_NEAR(prototype_loss(s, 0.7), base, 1e-12);
                }
    }
}

TEST(PrototypeLoss, RejectsIncompleteRecord) {
    auto r = record({1, 1}, {{{1, 0}, {0, 1}}});
    r.z[0].pop_back();
    EXPECT_THROW(prototype_loss(r, 0.7), ContractViolation);
}

TEST(TargetLoss, HandExamples) {
    auto ones = record({1, 2}, {{{1, 1, 1}, {1, 1, 1}}, {{1, 1}, {1, 1}}});
    auto zeros = record({1, 2}, {{{0, 0, 0}, {0, 0, 0}}, {{0, 0}, {0, 0}}});
    auto sixty = record({1, 2}, {{{1, 0, 1, 1, 0}, {0, 1, 1, 0, 1}}});
    EXPECT_NEAR(target_loss(ones, 0.6), 0.16, 1e-15);
    EXPECT_NEAR(target_loss(zeros, 0.6), 0.36, 1e-15);
    EXPECT_NEAR(target_loss(sixty, 0.6), 0.0, 1e-30);
}

TEST(TargetLoss, MatchesTripleLoopOracle) {
    Rng rng(4321);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (int trial = 0; trial < 300; ++trial) {
        auto r = random_record(rng, trial % 2 == 1);
        const double T = u(rng);
        const double want = oracle_target_loss(r, T);
        const double got = target_loss(r, T);
        if (want < 1e-300) EXPECT_LT(got, 1e-28);
        else EXPECT_LE(rel(got, want), 1e-10) << "trial " << trial;
    }
}

TEST(TargetLoss, InvariantUnderRelabelingAndPermutation) {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        auto r = random_record(rng, true);
        const double base = target_loss(r, 0.6);
        auto relabeled = r;
        for (auto& p : relabeled.identities) p = 100 - p;
        EXPECT_NEAR(target_loss(relabeled, 0.6), base, 1e-15);
        std::vector<int> order(r.batch());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        auto permuted = r;
        for (int n = 0; n < r.batch(); ++n) {
            permuted.identities[n] = r.identities[order[n]];
            for (int l = 0; l < r.layers(); ++l)
                for (int c = 0; c < r.widths[l]; ++c)
                    permuted.z[l][n * r.widths[l] + c] = r.at(l, order[n], c);
        }
        EXPECT_NEAR(target_loss(permuted, 0.6), base, 1e-12);
        EXPECT_NEAR(prototype_loss(permuted, 0.7), prototype_loss(r, 0.7), 1e-12);
    }
}

TEST(TotalLoss, ZeroWeightsReduceToTask) {
    auto r = record({1, 1}, {{{1, 1}, {0, 0}}});
    LossConfig cfg;
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    const auto b = total_loss(1.234, r, cfg);
    EXPECT_EQ(b.total, 1.234);
    EXPECT_EQ(b.task, 1.234);
}

TEST(TotalLoss, DefaultWeightsArithmetic) {
    // prototype loss 1.0 and keep rate 0.2, so target loss (0.6 - 0.2)^2 = 0.16
    auto r = record({3, 3}, {{{0, 0, 0, 0, 0}, {0, 0, 0, 1, 1}}});
    const auto b = total_loss(2.3, r, LossConfig{});
    EXPECT_DOUBLE_EQ(b.prototype, 1.0);
    EXPECT_NEAR(b.target, 0.16, 1e-15);
    EXPECT_NEAR(b.total, 13.9, 1e-12);
}

TEST(TotalLoss, ConfigValidation) {
    LossConfig c;
    EXPECT_NO_THROW(c.validate());
    c.alpha = -1;
    EXPECT_THROW(c.validate(), ConfigurationError);
    c = LossConfig{};
    c.target_rate = 0.0;
    EXPECT_THROW(c.validate(), ConfigurationError);
    c.target_rate = 1.0;
    EXPECT_NO_THROW(c.validate());
    c.target_rate = 1.01;
    EXPECT_THROW(c.validate(), ConfigurationError);
    c = LossConfig{};
    c.tau = 1.0;
    EXPECT_THROW(c.validate(), ConfigurationError);
}

TEST(Gradients, RegularizerHasNoTermThroughPrototype) {
    // With S frozen the gradient is exactly alpha*2(z-S)/(|C||B|) plus the
    // target term; changing z without moving S must change nothing else.
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        auto r = random_record(rng, false);
        auto hard = r;
        for (auto& layer : hard.z)
            for (auto& v : layer) v = v >= 0.5 ? 1.0 : 0.0;
        const auto targets = prototype_targets(hard, 0.7);
        LossConfig cfg;
        const auto g = regularizer_grad(r, targets, cfg);
        const double rate = mean_keep_rate(r);
        for (int l = 0; l < r.layers(); ++l)
            for (int n = 0; n < r.batch(); ++n)
                for (int c = 0; c < r.widths[l]; ++c) {
                    const double s = targets[l].at(r.identities[n])[c];
                    const double want = cfg.alpha * 2.0 * (r.at(l, n, c) - s) / (r.layers() * r.batch()) +
                                        cfg.beta * -2.0 * (cfg.target_rate - rate) /
                                            (r.layers() * r.batch() * static_cast<double>(r.widths[l]));
                    EXPECT_NEAR(g[l][n * r.widths[l] + c], want, 1e-12);
                }
    }
}

TEST(Gradients, TotalObjectiveMatchesFiniteDifferences) {
    for (double temp : {1.0, 0.5, 3.0}) {
        for (std::uint64_t seed : {11u, 12u, 13u}) {
            LossGradCheckSetup s;
            s.temperature = temp;
            s.seed = seed;
            EXPECT_LE(total_loss_grad_check(s), 1e-3) << "temperature " << temp << " seed " << seed;
        }
    }
    LossGradCheckSetup wide;
    wide.batch = 8;
    wide.identities = 3;
    wide.widths = {5, 2, 6};
    EXPECT_LE(total_loss_grad_check(wide), 1e-3);
}

TEST(BalancedInit, KeepProbabilityIsAFixedPointOfThePrototypeVote) {
    for (int n : {4, 8, 16, 32}) {
        const auto logit = balanced_keep_logit(0.7, n);
        ASSERT_TRUE(logit.has_value()) << n;
        const double p = 1.0 / (1.0 + std::exp(-*logit));
        // P(at least ceil(0.7 n) of n Bernoulli(p) draws are on), by enumeration.
        const int need = (7 * n + 9) / 10;
        double tail = 0.0;
        for (int mask = 0; mask < (n <= 16 ? 1 << n : 0); ++mask) {
            const int on = __builtin_popcount(static_cast<unsigned>(mask));
            if (on >= need) tail += std::pow(p, on) * std::pow(1 - p, n - on);
        }
        if (n <= 16) EXPECT_NEAR(tail, p, 1e-9) << n;
        EXPECT_GT(p, 0.5);
        EXPECT_LT(p, 0.9);
    }
    EXPECT_NEAR(*balanced_keep_logit(0.7, 8), 1.4025, 1e-4);
    EXPECT_FALSE(balanced_keep_logit(0.7, 2).has_value());
    EXPECT_FALSE(balanced_keep_logit(0.7, 1).has_value());
}
