#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <vector>

#include "daso/common.hpp"

namespace daso {

enum class TrackerMode { Segment, Window };

/// Tracks the empirical class distribution m_hat of recent pseudo-label
/// predictions. Segment mode (default) accumulates hard predictions over
/// non-overlapping segments of segment_len training steps and snapshots the
/// normalized counts; window mode keeps a sliding window of the last
/// window_len steps and renormalizes every step.
class PseudoLabelTracker {
public:
    PseudoLabelTracker(int num_classes, int segment_len, TrackerMode mode = TrackerMode::Segment, int window_len = 500)
        : counts_(num_classes, 0),
          m_hat_(num_classes, 1.0 / num_classes),
          segment_len_(segment_len),
          mode_(mode),
          window_len_(window_len) {
        if (num_classes < 2) throw ConfigError("tracker: need at least 2 classes");
        if (segment_len < 1) throw ConfigError("tracker.segment_len: must be positive");
        if (mode == TrackerMode::Window && window_len < 1) throw ConfigError("tracker.window_len: must be positive");
    }

    /// Records one training step's hard predictions. Returns true when a
    /// segment snapshot was taken this step (segment mode only).
    bool record_predictions(const std::vector<int>& hard_preds) {
        for (int k : hard_preds) {
            if (k < 0 || k >= num_classes()) throw InputError("tracker: prediction " + std::to_string(k) + " out of range");
        }
        if (mode_ == TrackerMode::Window) {
            window_.emplace_back(hard_preds);
            for (int k : hard_preds) ++counts_[k];
            if (static_cast<int>(window_.size()) > window_len_) {
                for (int k : window_.front()) --counts_[k];
                window_.pop_front();
            }
            normalize_into_m_hat();
            return false;
        }
        for (int k : hard_preds) ++counts_[k];
        if (++steps_in_segment_ < segment_len_) return false;
        normalize_into_m_hat();
        counts_.assign(counts_.size(), 0);
        steps_in_segment_ = 0;
        return true;
    }

    const Vec& m_hat() const { return m_hat_; }
    int num_classes() const { return static_cast<int>(counts_.size()); }
    int steps_in_segment() const { return steps_in_segment_; }

private:
    void normalize_into_m_hat() {
        std::int64_t total = std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
        if (total == 0) return;  // nothing confident: keep the previous estimate
        for (std::size_t k = 0; k < counts_.size(); ++k) m_hat_[k] = static_cast<double>(counts_[k]) / static_cast<double>(total);
    }

    std::vector<std::int64_t> counts_;
    Vec m_hat_;
    int segment_len_;
    int steps_in_segment_ = 0;
    TrackerMode mode_;
    int window_len_;
    std::deque<std::vector<int>> window_;
};

/// Distribution-aware blend weights:
/// upsilon_k = m_hat_k^(1/T_dist) / max_j m_hat_j^(1/T_dist).
/// An m_hat entry of exactly 0 maps to upsilon 0; every argmax of m_hat maps
/// to exactly 1.
inline Vec blend_weights(const Vec& m_hat, double t_dist) {
    if (!(t_dist > 0.0)) throw ConfigError("blend_weights: T_dist must be positive");
    check_prob_vector(m_hat, "blend_weights m_hat");
    Vec u(m_hat.size());
    double mx = 0.0;
    for (std::size_t k = 0; k < m_hat.size(); ++k) {
        u[k] = m_hat[k] == 0.0 ? 0.0 : std::pow(m_hat[k], 1.0 / t_dist);
        if (u[k] > mx) mx = u[k];
    }
    if (mx == 0.0) throw ContractError("blend_weights: all m_hat entries zero");
    for (double& v : u) v /= mx;
    return u;
}

/// Convex pseudo-label blend: with k' the argmax of the linear pseudo-label
/// (ties to the lowest index),
///   p' = (1 - upsilon_{k'}) * p_hat + upsilon_{k'} * q_hat.
inline Vec blend(const Vec& p_hat, const Vec& q_hat, const Vec& upsilon) {
    if (p_hat.size() != q_hat.size() || p_hat.size() != upsilon.size()) throw ShapeError("blend: size mismatch");
    check_prob_vector(p_hat, "blend p_hat");
    check_prob_vector(q_hat, "blend q_hat");
    for (double u : upsilon) {
        if (!(u >= 0.0 && u <= 1.0)) throw ContractError("blend: upsilon entry outside [0, 1]");
    }
    double u = upsilon[argmax(p_hat)];
    Vec out(p_hat.size());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = (1.0 - u) * p_hat[k] + u * q_hat[k];
    return out;
}

}  // namespace daso
