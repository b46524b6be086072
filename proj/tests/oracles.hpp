#pragma once

// Scalar reference implementations shared by the unit tests and the
// acceptance binary. They use no library helpers beyond the record type.

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "ppp/losses.hpp"

namespace ppp::oracle {

inline BatchGateRecord random_record(Rng& rng, bool binary) {
    std::uniform_int_distribution<int> nlayers(1, 4), width(1, 9), batch(1, 12), nid(1, 5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    BatchGateRecord r;
    const int B = batch(rng), P = nid(rng);
    for (int i = 0; i < B; ++i) r.identities.push_back(static_cast<int>(rng() % P) * 3 + 1);
    const int L = nlayers(rng);
    for (int l = 0; l < L; ++l) {
        const int m = width(rng);
        r.widths.push_back(m);
        std::vector<double> z(static_cast<std::size_t>(B) * m);
        for (auto& v : z) v = binary ? (u(rng) < 0.6 ? 1.0 : 0.0) : u(rng);
        r.z.push_back(z);
    }
    return r;
}

// Scalar re-implementation: loops over layers, identities and samples with no
// shared helpers from the library.
inline double oracle_prototype_loss(const BatchGateRecord& r, double tau) {
    const int B = static_cast<int>(r.identities.size());
    std::set<int> ids(r.identities.begin(), r.identities.end());
    double total = 0.0;
    for (std::size_t l = 0; l < r.widths.size(); ++l) {
        const int m = r.widths[l];
        double layer = 0.0;
        for (int p : ids) {
            std::vector<double> mean(m, 0.0);
            int count = 0;
            for (int i = 0; i < B; ++i) {
                if (r.identities[i] != p) continue;
                ++count;
                for (int c = 0; c < m; ++c) mean[c] += (r.z[l][i * m + c] >= 0.5 ? 1.0 : 0.0);
            }
            for (int c = 0; c < m; ++c) mean[c] /= count;
            for (int i = 0; i < B; ++i) {
                if (r.identities[i] != p) continue;
                for (int c = 0; c < m; ++c) {
                    const double s = mean[c] >= tau ? 1.0 : 0.0;
                    const double d = r.z[l][i * m + c] - s;
                    layer += d * d;
                }
            }
        }
        total += layer / B;
    }
    return total / static_cast<double>(r.widths.size());
}

inline double oracle_target_loss(const BatchGateRecord& r, double T) {
    const int B = static_cast<int>(r.identities.size());
    std::set<int> ids(r.identities.begin(), r.identities.end());
    double rate = 0.0;
    for (std::size_t l = 0; l < r.widths.size(); ++l) {
        const int m = r.widths[l];
        double l1 = 0.0;
        for (int p : ids)
            for (int i = 0; i < B; ++i) {
                if (r.identities[i] != p) continue;
                for (int c = 0; c < m; ++c) l1 += std::abs(r.z[l][i * m + c]);
            }
        rate += l1 / (static_cast<double>(B) * m);
    }
    rate /= static_cast<double>(r.widths.size());
    return (T - rate) * (T - rate);
}

} // namespace ppp::oracle
