#pragma once

// Identity-labelled datasets (input, class, identity), the identity-aware
// minibatch sampler, the synthetic desk-scale generator and a CIFAR binary
// reader.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ppp/io.hpp"
#include "ppp/tensor.hpp"

namespace ppp {

struct Example {
    const float* input = nullptr; // channels * height * width values
    int class_label = 0;          // 0 .. K-1
    int identity = 0;             // 0 .. P-1
};

class Dataset {
public:
    Dataset() = default;
    Dataset(int channels, int height, int width, int num_classes, int num_identities)
        : channels_(channels), height_(height), width_(width), classes_(num_classes),
          identities_(num_identities) {}

    int channels() const { return channels_; }
    int height() const { return height_; }
    int width() const { return width_; }
    int num_classes() const { return classes_; }
    int num_identities() const { return identities_; }
    int size() const { return static_cast<int>(labels_.size()); }
    int example_size() const { return channels_ * height_ * width_; }

    void add(const float* input, int class_label, int identity) {
        expects(class_label >= 0 && class_label < classes_, "dataset: class label out of range");
        expects(identity >= 0 && identity < identities_, "dataset: identity out of range");
        pixels_.insert(pixels_.end(), input, input + example_size());
        labels_.push_back(class_label);
        ids_.push_back(identity);
    }

    Example operator[](int i) const {
        return {pixels_.data() + static_cast<std::size_t>(i) * example_size(), labels_[i], ids_[i]};
    }
    const std::vector<int>& labels() const { return labels_; }
    const std::vector<int>& identities() const { return ids_; }
    const std::vector<float>& pixels() const { return pixels_; }
    std::vector<float>& pixels() { return pixels_; }

    /// Indices of every example of one identity, in dataset order.
    std::vector<int> indices_of(int identity) const {
        std::vector<int> out;
        for (int i = 0; i < size(); ++i)
            if (ids_[i] == identity) out.push_back(i);
        return out;
    }

    Dataset subset(const std::vector<int>& idx) const {
        Dataset d(channels_, height_, width_, classes_, identities_);
        for (int i : idx) d.add((*this)[i].input, labels_[i], ids_[i]);
        return d;
    }

    Tensor<float> gather(const std::vector<int>& idx) const {
        Tensor<float> x(static_cast<int>(idx.size()), channels_, height_, width_);
        for (std::size_t j = 0; j < idx.size(); ++j)
            std::copy_n((*this)[idx[j]].input, example_size(), x.sample(static_cast<int>(j)));
        return x;
    }
    std::vector<int> gather_labels(const std::vector<int>& idx) const {
        std::vector<int> out;
        for (int i : idx) out.push_back(labels_[i]);
        return out;
    }
    std::vector<int> gather_identities(const std::vector<int>& idx) const {
        std::vector<int> out;
        for (int i : idx) out.push_back(ids_[i]);
        return out;
    }

    /// Counts per (class, identity).
    json manifest() const {
        std::map<std::pair<int, int>, int> counts;
        for (int i = 0; i < size(); ++i) ++counts[{labels_[i], ids_[i]}];
        json cells = json::array();
        for (const auto& [k, v] : counts) cells.push_back({{"class", k.first}, {"identity", k.second}, {"count", v}});
        return json{{"examples", size()},
                    {"num_classes", classes_},
                    {"num_identities", identities_},
                    {"shape", {channels_, height_, width_}},
                    {"counts", cells}};
    }

    bool operator==(const Dataset& o) const {
        return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_ &&
               classes_ == o.classes_ && identities_ == o.identities_ && pixels_ == o.pixels_ &&
               labels_ == o.labels_ && ids_ == o.ids_;
    }

private:
    int channels_ = 0, height_ = 0, width_ = 0, classes_ = 0, identities_ = 0;
    std::vector<float> pixels_;
    std::vector<int> labels_;
    std::vector<int> ids_;
};

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

struct SynthConfig {
    int num_classes = 4;
    int num_identities = 8;
    int samples_per_identity = 200;
    double noise_level = 0.6;
    int image_size = 16;
    int channels = 3;
    std::uint64_t seed = 1;
    double identity_strength = 1.0; // scale of the per-identity transform
    double phase_jitter = 3.0;      // std of the per-example grating phase, radians
    std::string layout = "spanning"; // spanning | partitioned, see synth_identity_dataset
};

inline void to_json(json& j, const SynthConfig& c) {
    j = json{{"num_classes", c.num_classes},     {"num_identities", c.num_identities},
             {"samples_per_identity", c.samples_per_identity},
             {"noise_level", c.noise_level},      {"image_size", c.image_size},
             {"channels", c.channels},            {"seed", c.seed},
             {"identity_strength", c.identity_strength}, {"phase_jitter", c.phase_jitter},
             {"layout", c.layout}};
}

inline void from_json(const json& j, SynthConfig& c) {
    static const std::vector<std::string> known{"num_classes", "num_identities", "samples_per_identity",
                                                "noise_level", "image_size", "channels", "seed",
                                                "identity_strength", "phase_jitter", "layout"};
    for (const auto& [k, v] : j.items())
        if (std::find(known.begin(), known.end(), k) == known.end())
            throw ConfigurationError("unknown data key '" + k + "'");
    c.num_classes = j.value("num_classes", c.num_classes);
    c.num_identities = j.value("num_identities", c.num_identities);
    c.samples_per_identity = j.value("samples_per_identity", c.samples_per_identity);
    c.noise_level = j.value("noise_level", c.noise_level);
    c.image_size = j.value("image_size", c.image_size);
    c.channels = j.value("channels", c.channels);
    c.seed = j.value("seed", c.seed);
    c.identity_strength = j.value("identity_strength", c.identity_strength);
    c.phase_jitter = j.value("phase_jitter", c.phase_jitter);
    c.layout = j.value("layout", c.layout);
}

/// Per-identity nuisance transform, recoverable from the generator seed.
struct IdentityTransform {
    std::vector<double> color_shift; // per channel
    double bias_fx = 0, bias_fy = 0, bias_phase = 0, bias_amp = 0;
    double rotation = 0;             // added to every class orientation
};

/// When K == P every identity owns exactly one class (identity p has class p).
/// Otherwise the layout decides:
///   spanning     every identity contributes an equal number of examples of
///                every class (samples_per_identity divisible by K)
///   partitioned  identities are split evenly over classes, identity p has
///                class p mod K (P divisible by K)
inline Dataset synth_identity_dataset(const SynthConfig& cfg,
                                      std::vector<IdentityTransform>* transforms = nullptr) {
    const int K = cfg.num_classes, P = cfg.num_identities;
    if (K < 1 || P < 1 || cfg.samples_per_identity < 1 || cfg.image_size < 2 || cfg.channels < 1)
        throw ConfigurationError("synthetic dataset: all counts must be positive");
    if (!(cfg.noise_level >= 0.0)) throw ConfigurationError("synthetic dataset: noise level must be >= 0");
    if (cfg.layout != "spanning" && cfg.layout != "partitioned")
        throw ConfigurationError("synthetic dataset: unknown layout '" + cfg.layout + "'");
    const bool class_is_identity = K == P;
    const bool spanning = !class_is_identity && cfg.layout == "spanning";
    if (spanning && cfg.samples_per_identity % K != 0)
        throw ConfigurationError("synthetic dataset: samples_per_identity (" +
                                 std::to_string(cfg.samples_per_identity) + ") must be divisible by K (" +
                                 std::to_string(K) + ") when identities span all classes");
    if (!class_is_identity && !spanning && P % K != 0)
        throw ConfigurationError("synthetic dataset: P (" + std::to_string(P) + ") must be divisible by K (" +
                                 std::to_string(K) + ") when identities are partitioned over classes");
    Rng rng(cfg.seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double pi = 3.14159265358979323846;
    const int S = cfg.image_size, C = cfg.channels;

    // Class templates: oriented gratings with a class-specific frequency,
    // orientation, phase and per-channel weighting. Every identity rotates all
    // of its gratings by its own angle, so reading the class of an image needs
    // the identity cue as well.
    struct Template {
        double fx, fy, phase;
        std::vector<double> chan;
    };
    std::vector<Template> templates(K);
    for (int k = 0; k < K; ++k) {
        const double theta = pi * k / K;
        const double freq = 1.5 + (k % 3);
        templates[k] = {freq * std::cos(theta), freq * std::sin(theta), 2 * pi * uni(rng), {}};
        for (int c = 0; c < C; ++c) templates[k].chan.push_back(0.6 + 0.8 * uni(rng));
    }
    std::vector<IdentityTransform> ident(P);
    for (int p = 0; p < P; ++p) {
        for (int c = 0; c < C; ++c) ident[p].color_shift.push_back(cfg.identity_strength * gauss(rng) * 0.8);
        ident[p].bias_fx = 0.5 + uni(rng);
        ident[p].bias_fy = 0.5 + uni(rng);
        ident[p].bias_phase = 2 * pi * uni(rng);
        ident[p].bias_amp = cfg.identity_strength * (0.4 + 0.4 * uni(rng));
        ident[p].rotation = cfg.identity_strength * pi * uni(rng);
    }
    if (transforms) *transforms = ident;

    Dataset d(C, S, S, K, P);
    std::vector<float> img(static_cast<std::size_t>(C) * S * S);
    for (int p = 0; p < P; ++p)
        for (int i = 0; i < cfg.samples_per_identity; ++i) {
            const int k = spanning ? i % K : p % K;
            const auto& t = templates[k];
            const auto& id = ident[p];
            const double jitter = cfg.phase_jitter * gauss(rng);
            const double contrast = 0.8 + 0.4 * uni(rng);
            const double fx = std::cos(id.rotation) * t.fx - std::sin(id.rotation) * t.fy;
            const double fy = std::sin(id.rotation) * t.fx + std::cos(id.rotation) * t.fy;
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < S; ++y)
                    for (int x = 0; x < S; ++x) {
                        const double u = static_cast<double>(x) / S, v = static_cast<double>(y) / S;
                        double val = contrast * t.chan[c] * std::sin(2 * pi * (fx * u + fy * v) + t.phase + jitter);
                        val += id.color_shift[c];
                        val += id.bias_amp * std::cos(2 * pi * (id.bias_fx * u + id.bias_fy * v) + id.bias_phase);
                        val += cfg.noise_level * gauss(rng);
                        img[(static_cast<std::size_t>(c) * S + y) * S + x] = static_cast<float>(val);
                    }
            d.add(img.data(), k, p);
        }
    return d;
}

/// Splits every identity's examples: the last `holdout` fraction goes to test.
inline std::pair<Dataset, Dataset> split_by_identity(const Dataset& d, double holdout = 0.25) {
    std::vector<int> train, test;
    for (int p = 0; p < d.num_identities(); ++p) {
        const auto idx = d.indices_of(p);
        const int n_test = static_cast<int>(std::round(holdout * idx.size()));
        const int cut = static_cast<int>(idx.size()) - n_test;
        train.insert(train.end(), idx.begin(), idx.begin() + cut);
        test.insert(test.end(), idx.begin() + cut, idx.end());
    }
    return {d.subset(train), d.subset(test)};
}

// ---------------------------------------------------------------------------
// Identity-aware minibatches
// ---------------------------------------------------------------------------

struct BatchComposition {
    int identities_per_batch = 4;
    int samples_per_identity = 8;
    std::uint64_t seed = 0;

    int batch_size() const { return identities_per_batch * samples_per_identity; }
};

/// Draws batches of `identities_per_batch` distinct identities with
/// `samples_per_identity` examples each, without replacement within an epoch.
/// Identities with the most remaining examples are served first (ties broken
/// at random), which keeps per-identity batch counts balanced.
class IdentityBatchSampler {
public:
    IdentityBatchSampler(const Dataset& data, BatchComposition comp) : comp_(comp), rng_(comp.seed) {
        if (comp.identities_per_batch < 1 || comp.samples_per_identity < 1)
            throw ConfigurationError("batch composition counts must be positive");
        for (int p = 0; p < data.num_identities(); ++p) {
            auto idx = data.indices_of(p);
            if (idx.empty()) continue;
            if (static_cast<int>(idx.size()) < comp.samples_per_identity)
                throw ConfigurationError("identity " + std::to_string(p) + " has " + std::to_string(idx.size()) +
                                         " examples, fewer than samples_per_identity = " +
                                         std::to_string(comp.samples_per_identity));
            pools_.push_back({p, std::move(idx)});
        }
        if (static_cast<int>(pools_.size()) < comp.identities_per_batch)
            throw ConfigurationError("dataset has fewer identities than identities_per_batch");
    }

    const BatchComposition& composition() const { return comp_; }

    /// Index lists of one epoch.
    std::vector<std::vector<int>> epoch() {
        struct Live {
            int identity;
            std::vector<int> idx;
            std::size_t next = 0;
        };
        std::vector<Live> live;
        for (const auto& [p, idx] : pools_) {
            Live l{p, idx, 0};
            std::shuffle(l.idx.begin(), l.idx.end(), rng_);
            live.push_back(std::move(l));
        }
        const std::size_t spi = comp_.samples_per_identity;
        std::vector<std::vector<int>> batches;
        for (;;) {
            std::vector<std::pair<std::size_t, std::uint64_t>> ranked; // (chunks left, tiebreak)
            std::vector<int> order;
            for (std::size_t i = 0; i < live.size(); ++i) {
                const std::size_t left = (live[i].idx.size() - live[i].next) / spi;
                if (left > 0) order.push_back(static_cast<int>(i));
                ranked.push_back({left, rng_()});
            }
            if (static_cast<int>(order.size()) < comp_.identities_per_batch) break;
            std::sort(order.begin(), order.end(), [&](int a, int b) {
                if (ranked[a].first != ranked[b].first) return ranked[a].first > ranked[b].first;
                return ranked[a].second < ranked[b].second;
            });
            order.resize(comp_.identities_per_batch);
            std::sort(order.begin(), order.end());
            std::vector<int> batch;
            for (int i : order) {
                auto& l = live[i];
                batch.insert(batch.end(), l.idx.begin() + l.next, l.idx.begin() + l.next + spi);
                l.next += spi;
            }
            batches.push_back(std::move(batch));
        }
        return batches;
    }

private:
    BatchComposition comp_;
    Rng rng_;
    std::vector<std::pair<int, std::vector<int>>> pools_;
};

// ---------------------------------------------------------------------------
// CIFAR binary archives (the "binary version" layout)
// ---------------------------------------------------------------------------

struct CifarOptions {
    bool cifar100 = false;
    int subset = 0; // 0 = all; otherwise class-stratified first-n selection
};

/// Reads `data_batch_{1..5}.bin` / `test_batch.bin` (CIFAR-10) or
/// `train.bin` / `test.bin` (CIFAR-100, fine labels) from `dir`. Identity is
/// the class label. Channels are standardized with train-split statistics.
inline Dataset image_dataset_loader(const std::string& dir, const std::string& split, CifarOptions opt = {}) {
    if (split != "train" && split != "test") throw ConfigurationError("split must be 'train' or 'test'");
    const int K = opt.cifar100 ? 100 : 10;
    const int label_bytes = opt.cifar100 ? 2 : 1;
    const int pix = 3 * 32 * 32;
    auto files_for = [&](const std::string& s) {
        std::vector<std::string> f;
        if (opt.cifar100) f.push_back(dir + "/" + s + ".bin");
        else if (s == "train")
            for (int i = 1; i <= 5; ++i) f.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
        else f.push_back(dir + "/test_batch.bin");
        return f;
    };
    auto read_split = [&](const std::string& s) {
        Dataset d(3, 32, 32, K, K);
        std::vector<float> img(pix);
        for (const auto& path : files_for(s)) {
            const std::string bytes = read_file(path);
            const std::size_t rec = label_bytes + pix;
            if (bytes.empty() || bytes.size() % rec != 0)
                throw IngestionError("'" + path + "': size " + std::to_string(bytes.size()) +
                                     " is not a multiple of the record size " + std::to_string(rec));
            for (std::size_t off = 0; off < bytes.size(); off += rec) {
                const int label = static_cast<unsigned char>(bytes[off + label_bytes - 1]);
                if (label >= K) throw IngestionError("'" + path + "': label " + std::to_string(label) + " out of range");
                for (int i = 0; i < pix; ++i)
                    img[i] = static_cast<unsigned char>(bytes[off + label_bytes + i]) / 255.0f;
                d.add(img.data(), label, label);
            }
        }
        return d;
    };
    Dataset train = read_split("train");
    Dataset out = split == "train" ? train : read_split("test");

    // per-channel standardization with training statistics
    const int plane = 32 * 32;
    for (int c = 0; c < 3; ++c) {
        double s = 0, sq = 0;
        for (int i = 0; i < train.size(); ++i) {
            const float* p = train[i].input + c * plane;
            for (int j = 0; j < plane; ++j) {
                s += p[j];
                sq += double(p[j]) * p[j];
            }
        }
        const double n = double(train.size()) * plane;
        const double mean = s / n, std = std::sqrt(std::max(sq / n - mean * mean, 1e-12));
        for (int i = 0; i < out.size(); ++i) {
            float* p = out.pixels().data() + static_cast<std::size_t>(i) * out.example_size() + c * plane;
            for (int j = 0; j < plane; ++j) p[j] = static_cast<float>((p[j] - mean) / std);
        }
    }
    if (opt.subset > 0 && opt.subset < out.size()) {
        std::vector<int> per_class(K, opt.subset / K);
        for (int k = 0; k < opt.subset % K; ++k) ++per_class[k];
        std::vector<int> keep;
        for (int i = 0; i < out.size(); ++i)
            if (per_class[out.labels()[i]] > 0) {
                --per_class[out.labels()[i]];
                keep.push_back(i);
            }
        out = out.subset(keep);
    }
    return out;
}

} // namespace ppp
