#pragma once

#include <deque>
#include <optional>
#include <vector>

#include "daso/common.hpp"
#include "daso/nn.hpp"

namespace daso {

/// A batch of encoder features destined for the prototype queues. The
/// provenance flag records which encoder produced them; the bank asserts it
/// against its own configuration on enqueue.
struct FeatureBatch {
    std::vector<Vec> features;
    std::vector<int> labels;
    bool from_ema_encoder = false;
};

/// Per-class FIFO feature queues with derived prototypes and the
/// temperature-scaled cosine-similarity classifier.
///
/// Balanced mode gives every class the same capacity so prototype quality is
/// decoupled from label frequency; the unbalanced ablation sets per-class
/// capacities proportional to the class counts.
class PrototypeBank {
public:
    PrototypeBank(int num_classes, std::size_t capacity, double temperature, bool require_ema_features = true)
        : queues_(num_classes), capacity_(num_classes, capacity), temperature_(temperature), require_ema_(require_ema_features) {
        if (num_classes < 2) throw ConfigError("bank: need at least 2 classes");
        if (capacity == 0) throw ConfigError("bank.L: capacity must be positive");
        if (!(temperature_ > 0.0)) throw ConfigError("bank.T_proto: must be positive");
    }

    int num_classes() const { return static_cast<int>(queues_.size()); }
    double temperature() const { return temperature_; }
    bool requires_ema_features() const { return require_ema_; }
    std::size_t capacity(int k) const { return capacity_.at(k); }
    std::size_t queue_size(int k) const { return queues_.at(k).size(); }

    /// Unbalanced-queue ablation: per-class capacities (each >= 1).
    void set_capacities(std::vector<std::size_t> caps) {
        if (caps.size() != queues_.size()) throw ShapeError("bank: capacity list size mismatch");
        for (std::size_t c : caps) {
            if (c == 0) throw ConfigError("bank: every queue capacity must be >= 1");
        }
        capacity_ = std::move(caps);
        for (std::size_t k = 0; k < queues_.size(); ++k) trim(static_cast<int>(k));
        cache_valid_ = false;
    }

    void enqueue_labeled(const FeatureBatch& batch) {
        if (batch.features.size() != batch.labels.size()) throw InputError("bank: features/labels misaligned");
        if (batch.from_ema_encoder != require_ema_) {
            throw ContractError(require_ema_ ? "bank: features lack EMA-encoder provenance" : "bank: expected live-encoder features");
        }
        if (batch.features.empty()) return;
        for (std::size_t i = 0; i < batch.features.size(); ++i) {
            int k = batch.labels[i];
            if (k < 0 || k >= num_classes()) throw InputError("bank: label " + std::to_string(k) + " out of range");
            queues_[k].push_back(batch.features[i]);
            trim(k);
        }
        cache_valid_ = false;
    }

    bool warm() const {
        for (const auto& q : queues_) {
            if (q.empty()) return false;
        }
        return true;
    }

    /// c_k = mean of queue k; empty queues yield an absent prototype.
    const std::vector<std::optional<Vec>>& prototypes() const {
        if (!cache_valid_) {
            cache_.assign(queues_.size(), std::nullopt);
            for (std::size_t k = 0; k < queues_.size(); ++k) {
                const auto& q = queues_[k];
                if (q.empty()) continue;
                Vec mean(q.front().size(), 0.0);
                for (const Vec& f : q) {
                    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += f[i];
                }
                for (double& v : mean) v /= static_cast<double>(q.size());
                cache_[k] = std::move(mean);
            }
            cache_valid_ = true;
        }
        return cache_;
    }

    /// Temperature-scaled cosine similarities of a query feature to every
    /// prototype: sims_k = cos(z, c_k) / T. Requires every prototype present
    /// and non-degenerate (cosine is undefined at zero norm).
    Vec semantic_sims(const Vec& z) const {
        const auto& protos = prototypes();
        double zn = norm2(z);
        if (zn == 0.0) throw DegenerateFeatureError("semantic_sims: zero-norm query feature");
        Vec sims(protos.size());
        for (std::size_t k = 0; k < protos.size(); ++k) {
            if (!protos[k].has_value()) throw WarmupError("semantic_sims: prototype for class " + std::to_string(k) + " absent (warm-up incomplete)");
            double cn = norm2(*protos[k]);
            if (cn == 0.0) throw DegenerateFeatureError("semantic_sims: zero-norm prototype for class " + std::to_string(k));
            sims[k] = dot(z, *protos[k]) / (zn * cn) / temperature_;
        }
        return sims;
    }

    /// Semantic class probabilities: q = softmax_k(cos(z, c_k) / T).
    Vec semantic_probs(const Vec& z) const { return softmax(semantic_sims(z)); }

    const std::deque<Vec>& queue(int k) const { return queues_.at(k); }

private:
    void trim(int k) {
        while (queues_[k].size() > capacity_[k]) queues_[k].pop_front();
    }

    std::vector<std::deque<Vec>> queues_;
    std::vector<std::size_t> capacity_;
    double temperature_;
    bool require_ema_;
    mutable std::vector<std::optional<Vec>> cache_;
    mutable bool cache_valid_ = false;
};

}  // namespace daso
