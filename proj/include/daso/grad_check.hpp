#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "daso/nn.hpp"
#include "daso/rng.hpp"

namespace daso {

/// Loss evaluator for finite differencing. The optional key output must fold
/// in the ReLU pattern of every forward pass the evaluation performs, so the
/// checker can detect when a perturbation crossed a kink.
using LossEval = std::function<double(const ModelParams&, std::uint64_t* relu_key)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t coords_checked = 0;
    std::size_t kinks_skipped = 0;
};

namespace detail {

struct Coord {
    // tensor: 0..n-1 encoder weights, n..2n-1 encoder biases, then classifier w, b
    std::size_t tensor;
    std::size_t index;
};

inline std::vector<double>* coord_tensor(ModelParams& m, std::size_t tensor) {
    std::size_t n = m.encoder.size();
    if (tensor < n) return &m.encoder[tensor].w.a;
    if (tensor < 2 * n) return &m.encoder[tensor - n].b;
    if (tensor == 2 * n) return &m.classifier.w.a;
    return &m.classifier.b;
}

inline const std::vector<double>* coord_tensor(const Grads& g, std::size_t tensor) {
    std::size_t n = g.encoder.size();
    if (tensor < n) return &g.encoder[tensor].w.a;
    if (tensor < 2 * n) return &g.encoder[tensor - n].b;
    if (tensor == 2 * n) return &g.classifier.w.a;
    return &g.classifier.b;
}

inline std::vector<Coord> all_coords(const ModelParams& m) {
    std::vector<Coord> cs;
    std::size_t n = m.encoder.size();
    ModelParams& mm = const_cast<ModelParams&>(m);
    for (std::size_t t = 0; t < 2 * n + 2; ++t) {
        std::size_t len = coord_tensor(mm, t)->size();
        for (std::size_t i = 0; i < len; ++i) cs.push_back({t, i});
    }
    return cs;
}

}  // namespace detail

/// Compares analytic gradients against central finite differences of `loss`
/// over up to max_samples parameter coordinates (all of them when the model is
/// small enough). Returns the max of |analytic - fd| / max(1, |fd|).
///
/// A coordinate whose +/- eps evaluations land in different ReLU regions is
/// resampled; after 10 such failures the check aborts, since the loss is then
/// not reliably differentiable where we are probing it.
inline GradCheckReport finite_diff_check(const ModelParams& params, const LossEval& loss, const Grads& analytic, double eps, std::size_t max_samples, Rng& rng) {
    if (!(eps > 0.0)) throw ConfigError("finite_diff_check: eps must be positive");
    std::vector<detail::Coord> coords = detail::all_coords(params);
    bool exhaustive = coords.size() <= max_samples;

    GradCheckReport report;
    std::size_t kink_failures = 0;
    std::size_t planned = exhaustive ? coords.size() : max_samples;

    for (std::size_t step = 0; step < planned; ++step) {
        detail::Coord c = exhaustive ? coords[step] : coords[rng.uniform_index(coords.size())];

        ModelParams probe = params;
        std::vector<double>* tensor = detail::coord_tensor(probe, c.tensor);
        double base = (*tensor)[c.index];

        std::uint64_t key_plus = 0, key_minus = 0;
        (*tensor)[c.index] = base + eps;
        double loss_plus = loss(probe, &key_plus);
        (*tensor)[c.index] = base - eps;
        double loss_minus = loss(probe, &key_minus);

        if (key_plus != key_minus) {
            ++report.kinks_skipped;
            if (++kink_failures >= 10) throw NumericError("finite_diff_check: 10 perturbations crossed ReLU kinks; loss not differentiable near these parameters");
            if (!exhaustive) --step;  // resample a different coordinate
            continue;
        }

        double fd = (loss_plus - loss_minus) / (2.0 * eps);
        double a = (*detail::coord_tensor(analytic, c.tensor))[c.index];
        double rel = std::abs(a - fd) / std::max(1.0, std::abs(fd));
        if (rel > report.max_rel_err) report.max_rel_err = rel;
        ++report.coords_checked;
    }
    return report;
}

}  // namespace daso
