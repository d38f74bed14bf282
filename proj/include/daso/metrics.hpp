#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "daso/common.hpp"
#include "daso/datagen.hpp"
#include "daso/nn.hpp"

namespace daso {

/// One pseudo-label decision for a diagnosed unlabeled sample: the hard
/// predicted class and whether the confidence mask admitted it.
struct PLDecision {
    int predicted = 0;
    bool masked = false;
};

/// Per-class pseudo-label quality against the hidden ground truth, computed
/// over mask-passing samples. Precision of a class nobody predicted is
/// undefined (nullopt), deliberately distinct from zero.
struct PLQualityReport {
    std::vector<double> recall;
    std::vector<std::optional<double>> precision;
    std::vector<std::optional<double>> rel_size;  // predicted count / true count, masked samples
    double coverage = 0.0;                        // fraction of samples with mask = 1
    // raw counts, for micro-averaged group metrics
    std::vector<long> true_masked;     // masked samples per true class
    std::vector<long> predicted;       // masked predictions per class
    std::vector<long> correct;         // masked & correct per true class
};

inline PLQualityReport pl_quality(const std::vector<PLDecision>& decisions, const std::vector<int>& hidden_labels, int num_classes) {
    if (decisions.size() != hidden_labels.size()) throw InputError("pl_quality: decisions/labels misaligned");
    PLQualityReport r;
    r.true_masked.assign(num_classes, 0);
    r.predicted.assign(num_classes, 0);
    r.correct.assign(num_classes, 0);
    long masked_total = 0;
    for (std::size_t i = 0; i < decisions.size(); ++i) {
        int truth = hidden_labels[i];
        if (truth < 0 || truth >= num_classes) throw InputError("pl_quality: hidden label out of range");
        const PLDecision& d = decisions[i];
        if (d.predicted < 0 || d.predicted >= num_classes) throw InputError("pl_quality: prediction out of range");
        if (!d.masked) continue;
        ++masked_total;
        ++r.true_masked[truth];
        ++r.predicted[d.predicted];
        if (d.predicted == truth) ++r.correct[truth];
    }
    r.coverage = decisions.empty() ? 0.0 : static_cast<double>(masked_total) / static_cast<double>(decisions.size());
    r.recall.assign(num_classes, 0.0);
    r.precision.assign(num_classes, std::nullopt);
    r.rel_size.assign(num_classes, std::nullopt);
    for (int k = 0; k < num_classes; ++k) {
        if (r.true_masked[k] > 0) {
            r.recall[k] = static_cast<double>(r.correct[k]) / static_cast<double>(r.true_masked[k]);
            r.rel_size[k] = static_cast<double>(r.predicted[k]) / static_cast<double>(r.true_masked[k]);
        }
        if (r.predicted[k] > 0) r.precision[k] = static_cast<double>(r.correct[k]) / static_cast<double>(r.predicted[k]);
    }
    return r;
}

/// Number of minority classes: the smallest ceil(0.2 K) classes. Class counts
/// are non-increasing by construction, so these are the last indices.
inline int minority_group_size(int num_classes) {
    return (num_classes + 4) / 5;
}

/// Micro-averaged recall over the minority group (correct / true-masked).
inline double minority_recall(const PLQualityReport& r, int num_classes) {
    int g = minority_group_size(num_classes);
    long correct = 0, truth = 0;
    for (int k = num_classes - g; k < num_classes; ++k) {
        correct += r.correct[k];
        truth += r.true_masked[k];
    }
    return truth == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth);
}

/// Micro-averaged precision over the minority group. With zero predictions in
/// the group there are no false positives, so this reports 1.
inline double minority_precision(const PLQualityReport& r, int num_classes) {
    int g = minority_group_size(num_classes);
    long correct = 0, predicted = 0;
    for (int k = num_classes - g; k < num_classes; ++k) {
        correct += r.correct[k];
        predicted += r.predicted[k];
    }
    return predicted == 0 ? 1.0 : static_cast<double>(correct) / static_cast<double>(predicted);
}

struct EvalReport {
    std::vector<double> per_class_acc;
    double overall_acc = 0.0;
    double balanced_acc = 0.0;  // macro average
    double minority_acc = 0.0;  // macro over the smallest 20% of classes
    std::vector<std::vector<long>> confusion;  // [true][pred]
};

/// Test accuracy of the linear classifier, by default on EMA-encoded features.
inline EvalReport evaluate(const ModelParams& model, const std::vector<LabeledExample>& test, bool use_ema) {
    if (test.empty()) throw InputError("evaluate: empty test split");
    int num_classes = static_cast<int>(model.num_classes());
    EvalReport r;
    r.confusion.assign(num_classes, std::vector<long>(num_classes, 0));
    std::vector<long> per_class_total(num_classes, 0);
    long correct_total = 0;
    for (const auto& e : test) {
        if (e.y < 0 || e.y >= num_classes) throw InputError("evaluate: test label out of range");
        ForwardTape t = forward(model, e.x, use_ema);
        int pred = static_cast<int>(argmax(t.logits));
        ++r.confusion[e.y][pred];
        ++per_class_total[e.y];
        if (pred == e.y) ++correct_total;
    }
    r.per_class_acc.assign(num_classes, 0.0);
    double macro = 0.0;
    for (int k = 0; k < num_classes; ++k) {
        if (per_class_total[k] == 0) throw InputError("evaluate: test split missing class " + std::to_string(k));
        r.per_class_acc[k] = static_cast<double>(r.confusion[k][k]) / static_cast<double>(per_class_total[k]);
        macro += r.per_class_acc[k];
    }
    r.overall_acc = static_cast<double>(correct_total) / static_cast<double>(test.size());
    r.balanced_acc = macro / num_classes;
    int g = minority_group_size(num_classes);
    double tail = 0.0;
    for (int k = num_classes - g; k < num_classes; ++k) tail += r.per_class_acc[k];
    r.minority_acc = tail / g;
    return r;
}

/// Median of the final min(k, size) history entries; an even count averages
/// the middle two.
inline double median_last_k(const std::vector<double>& history, int k) {
    if (history.empty()) throw InputError("median_last_k: empty history");
    if (k < 1) throw InputError("median_last_k: k must be positive");
    std::size_t n = std::min<std::size_t>(history.size(), static_cast<std::size_t>(k));
    std::vector<double> tail(history.end() - n, history.end());
    std::sort(tail.begin(), tail.end());
    if (n % 2 == 1) return tail[n / 2];
    return 0.5 * (tail[n / 2 - 1] + tail[n / 2]);
}

}  // namespace daso
