#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "daso/common.hpp"
#include "daso/rng.hpp"

namespace daso {

/// Synthetic long-tailed Gaussian-mixture task description.
struct DatasetSpec {
    int num_classes = 5;        // K
    int input_dim = 2;          // d
    int head_labeled = 200;     // N1
    int head_unlabeled = 1000;  // M1
    double gamma_l = 50.0;      // labeled imbalance ratio, >= 1
    double gamma_u = 50.0;      // unlabeled ratio; < 1 means reversed ordering
    double separation = 1.0;    // class-mean spacing scale
    double noise_sigma = 0.45;  // within-class std
    int test_per_class = 200;

    void validate() const {
        if (num_classes < 2) throw ConfigError("dataset.K: need at least 2 classes");
        if (input_dim < 1) throw ConfigError("dataset.d: need at least 1 dimension");
        if (input_dim < 2 && input_dim < num_classes) throw ConfigError("dataset.d: d=1 supports only K<=1 spread means; use d >= 2");
        if (head_labeled < 1) throw ConfigError("dataset.N1: must be positive");
        if (head_unlabeled < 1) throw ConfigError("dataset.M1: must be positive");
        if (!(gamma_l >= 1.0)) throw ConfigError("dataset.gamma_l: must be >= 1");
        if (!(gamma_u > 0.0)) throw ConfigError("dataset.gamma_u: must be positive");
        if (!(separation > 0.0)) throw ConfigError("dataset.separation: must be positive");
        if (noise_sigma < 0.0) throw ConfigError("dataset.noise_sigma: must be non-negative");
        if (test_per_class < 1) throw ConfigError("dataset.test_per_class: must be positive");
    }
};

struct LabeledExample {
    Vec x;
    int y = 0;  // class index in [0, K)
};

/// Generated splits. unlabeled_true_labels exists for diagnostics only and is
/// consumed exclusively by the metrics module; no training-path type sees it.
struct DatasetBundle {
    std::vector<LabeledExample> labeled;
    std::vector<Vec> unlabeled;
    std::vector<int> unlabeled_true_labels;
    std::vector<LabeledExample> test;
    std::vector<int> labeled_counts;    // N_k, non-increasing
    std::vector<int> unlabeled_counts;  // M_k
    std::vector<Vec> class_means;
};

/// Per-class counts of an exponentially decaying long tail:
/// counts_k = floor(head * gamma^(-(k-1)/(K-1))), counts_1 = head.
inline std::vector<int> longtail_counts(int head, double gamma, int num_classes) {
    if (head < 1) throw ConfigError("longtail_counts: head must be positive");
    if (!(gamma > 0.0)) throw ConfigError("longtail_counts: gamma must be positive");
    if (num_classes < 2) throw ConfigError("longtail_counts: need at least 2 classes");
    std::vector<int> counts(num_classes);
    counts[0] = head;
    for (int k = 1; k < num_classes; ++k) {
        double exact = head * std::pow(gamma, -static_cast<double>(k) / (num_classes - 1));
        counts[k] = static_cast<int>(std::floor(exact));
        if (counts[k] < 1) throw ConfigError("longtail_counts: tail class rounds to zero (head=" + std::to_string(head) + ", gamma=" + fmt_double(gamma) + ")");
    }
    return counts;
}

namespace detail {

inline std::vector<Vec> class_means(int num_classes, int dim, double separation) {
    std::vector<Vec> means(num_classes, Vec(dim, 0.0));
    if (dim >= num_classes) {
        for (int k = 0; k < num_classes; ++k) means[k][k] = separation;
    } else {
        // fewer dims than classes: maximally spread angles on the first-two-axes circle
        for (int k = 0; k < num_classes; ++k) {
            double angle = 2.0 * 3.141592653589793238462643383279 * k / num_classes;
            means[k][0] = separation * std::cos(angle);
            means[k][1] = separation * std::sin(angle);
        }
    }
    return means;
}

inline Vec sample_around(const Vec& mean, double sigma, Rng& rng) {
    Vec x(mean.size());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = mean[i] + sigma * rng.gaussian();
    return x;
}

}  // namespace detail

/// Draws the three splits. gamma_u < 1 encodes the reversed setting: counts of
/// the 1/gamma_u tail are assigned in reverse so the nominal tail class gets
/// the most unlabeled samples.
inline DatasetBundle generate_dataset(const DatasetSpec& spec, std::uint64_t seed) {
    spec.validate();
    DatasetBundle b;
    b.class_means = detail::class_means(spec.num_classes, spec.input_dim, spec.separation);
    b.labeled_counts = longtail_counts(spec.head_labeled, spec.gamma_l, spec.num_classes);
    if (spec.gamma_u >= 1.0) {
        b.unlabeled_counts = longtail_counts(spec.head_unlabeled, spec.gamma_u, spec.num_classes);
    } else {
        b.unlabeled_counts = longtail_counts(spec.head_unlabeled, 1.0 / spec.gamma_u, spec.num_classes);
        std::reverse(b.unlabeled_counts.begin(), b.unlabeled_counts.end());
    }

    Rng rng(derive_seed(seed, "dataset"));
    for (int k = 0; k < spec.num_classes; ++k) {
        for (int i = 0; i < b.labeled_counts[k]; ++i) b.labeled.push_back({detail::sample_around(b.class_means[k], spec.noise_sigma, rng), k});
    }
    for (int k = 0; k < spec.num_classes; ++k) {
        for (int i = 0; i < b.unlabeled_counts[k]; ++i) {
            b.unlabeled.push_back(detail::sample_around(b.class_means[k], spec.noise_sigma, rng));
            b.unlabeled_true_labels.push_back(k);
        }
    }
    for (int k = 0; k < spec.num_classes; ++k) {
        for (int i = 0; i < spec.test_per_class; ++i) b.test.push_back({detail::sample_around(b.class_means[k], spec.noise_sigma, rng), k});
    }
    return b;
}

/// Feature-space stand-ins for weak/strong input augmentation.
struct AugmentSpec {
    double weak_sigma = 0.1;
    double strong_sigma = 0.3;
    double strong_drop_prob = 0.1;

    void validate() const {
        if (weak_sigma < 0.0 || strong_sigma < 0.0) throw ConfigError("augment: sigmas must be non-negative");
        if (weak_sigma > strong_sigma) throw ConfigError("augment.weak_sigma: must not exceed strong_sigma");
        if (!(strong_drop_prob >= 0.0 && strong_drop_prob < 1.0)) throw ConfigError("augment.strong_drop_prob: must be in [0, 1)");
    }
};

enum class AugMode { Weak, Strong };

/// Weak: additive gaussian noise. Strong: larger noise plus per-coordinate
/// zeroing with strong_drop_prob.
inline Vec augment(const Vec& x, const AugmentSpec& spec, AugMode mode, Rng& rng) {
    Vec out(x.size());
    if (mode == AugMode::Weak) {
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + spec.weak_sigma * rng.gaussian();
    } else {
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + spec.strong_sigma * rng.gaussian();
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (rng.uniform() < spec.strong_drop_prob) out[i] = 0.0;
        }
    }
    return out;
}

inline Vec augment(const Vec& x, const AugmentSpec& spec, AugMode mode, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "augment"));
    return augment(x, spec, mode, rng);
}

// --- CSV dump/load: one row per sample (split, class, coordinates); class
// --- means are stored as their own split so a dump round-trips exactly.

inline void dump_dataset_csv(const DatasetBundle& b, std::ostream& os) {
    auto row = [&os](const char* split, int cls, const Vec& x) {
        os << split << ',' << cls;
        for (double v : x) os << ',' << fmt_double(v);
        os << '\n';
    };
    os << "split,class,coords...\n";
    for (std::size_t k = 0; k < b.class_means.size(); ++k) row("mean", static_cast<int>(k), b.class_means[k]);
    for (const auto& e : b.labeled) row("labeled", e.y, e.x);
    for (std::size_t i = 0; i < b.unlabeled.size(); ++i) row("unlabeled", b.unlabeled_true_labels[i], b.unlabeled[i]);
    for (const auto& e : b.test) row("test", e.y, e.x);
}

inline DatasetBundle load_dataset_csv(std::istream& is) {
    DatasetBundle b;
    std::string line;
    if (!std::getline(is, line)) throw InputError("dataset csv: empty stream");
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string split, field;
        if (!std::getline(ss, split, ',')) throw InputError("dataset csv: bad row");
        if (!std::getline(ss, field, ',')) throw InputError("dataset csv: missing class");
        int cls = std::stoi(field);
        Vec x;
        while (std::getline(ss, field, ',')) x.push_back(std::stod(field));
        if (split == "mean") {
            if (static_cast<int>(b.class_means.size()) != cls) throw InputError("dataset csv: means out of order");
            b.class_means.push_back(std::move(x));
        } else if (split == "labeled") {
            b.labeled.push_back({std::move(x), cls});
        } else if (split == "unlabeled") {
            b.unlabeled.push_back(std::move(x));
            b.unlabeled_true_labels.push_back(cls);
        } else if (split == "test") {
            b.test.push_back({std::move(x), cls});
        } else {
            throw InputError("dataset csv: unknown split '" + split + "'");
        }
    }
    int k = static_cast<int>(b.class_means.size());
    if (k == 0) throw InputError("dataset csv: no class means");
    b.labeled_counts.assign(k, 0);
    b.unlabeled_counts.assign(k, 0);
    for (const auto& e : b.labeled) b.labeled_counts.at(e.y)++;
    for (int y : b.unlabeled_true_labels) b.unlabeled_counts.at(y)++;
    return b;
}

}  // namespace daso
