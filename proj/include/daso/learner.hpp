#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "daso/blend.hpp"
#include "daso/common.hpp"
#include "daso/datagen.hpp"
#include "daso/grad_check.hpp"
#include "daso/metrics.hpp"
#include "daso/nn.hpp"
#include "daso/proto_bank.hpp"
#include "daso/rng.hpp"

namespace daso {

enum class LearnerMode { FixmatchDaso, Fixmatch, Pseudolabel, Meanteacher, BlendConst };

inline const char* to_string(LearnerMode m) {
    switch (m) {
        case LearnerMode::FixmatchDaso: return "fixmatch_daso";
        case LearnerMode::Fixmatch: return "fixmatch";
        case LearnerMode::Pseudolabel: return "pseudolabel";
        case LearnerMode::Meanteacher: return "meanteacher";
        case LearnerMode::BlendConst: return "blend_const";
    }
    return "?";
}

inline LearnerMode learner_mode_from_string(const std::string& s) {
    if (s == "fixmatch_daso") return LearnerMode::FixmatchDaso;
    if (s == "fixmatch") return LearnerMode::Fixmatch;
    if (s == "pseudolabel") return LearnerMode::Pseudolabel;
    if (s == "meanteacher") return LearnerMode::Meanteacher;
    if (s == "blend_const") return LearnerMode::BlendConst;
    throw ConfigError("loss.mode: unknown learner mode '" + s + "'");
}

struct LossConfig {
    double lambda_u = 1.0;
    double lambda_align = 1.0;
    double tau = 0.95;
    long pretrain_steps = 5000;  // blending and alignment stay off before this step
    bool la_enabled = false;
    double la_tau = 1.0;
    std::vector<double> la_counts;  // per-class labeled counts; filled at run start
    LearnerMode mode = LearnerMode::FixmatchDaso;
    double blend_const_v = 0.5;
    double ramp_frac = 0.0;  // >0: lambda_u ramps linearly over this fraction of total steps
    bool mask_on_blended = true;         // false: threshold the linear pseudo-label instead
    bool tracker_count_masked_only = true;

    void validate() const {
        if (lambda_u < 0.0 || lambda_align < 0.0) throw ConfigError("loss.lambda_u/lambda_align: must be non-negative");
        if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("loss.tau: must be in (0, 1]");
        if (pretrain_steps < 0) throw ConfigError("loss.pretrain_steps: must be non-negative");
        if (ramp_frac < 0.0 || ramp_frac > 1.0) throw ConfigError("loss.ramp_frac: must be in [0, 1]");
        if (mode == LearnerMode::BlendConst && !(blend_const_v >= 0.0 && blend_const_v <= 1.0)) throw ConfigError("loss.blend_const_v: must be in [0, 1]");
    }
};

/// Thresholded consistency loss: the target supervises the strong-view
/// prediction only when the confidence clears tau.
struct MaskedUnsupLoss {
    double loss = 0.0;
    double mask = 0.0;
};

inline MaskedUnsupLoss unsup_loss_fixmatch(const Vec& target, const Vec& logits_strong, double confidence, double tau) {
    check_prob_vector(target, "unsup_loss target");
    MaskedUnsupLoss r;
    r.mask = confidence >= tau ? 1.0 : 0.0;
    if (r.mask > 0.0) r.loss = softmax_ce(target, logits_strong).loss;
    return r;
}

/// Cross-entropy between the weak-view semantic assignment (target) and the
/// strong-view semantic assignment. Gradients, where taken, flow into the
/// strong feature only; prototypes are constants.
inline double align_loss(const Vec& q_weak, const Vec& z_strong, const PrototypeBank& bank) {
    check_prob_vector(q_weak, "align_loss target");
    return softmax_ce(q_weak, bank.semantic_sims(z_strong)).loss;
}

/// Train-time logit adjustment for the labeled loss: logit_k += la_tau * log n_k.
inline Vec adjust_logits_la(const Vec& logits, const std::vector<double>& n_counts, double la_tau) {
    if (n_counts.size() != logits.size()) throw ShapeError("adjust_logits_la: counts/logits size mismatch");
    Vec out(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) {
        if (!(n_counts[k] >= 1.0)) throw ConfigError("loss.la: class count must be >= 1");
        out[k] = logits[k] + la_tau * std::log(n_counts[k]);
    }
    return out;
}

// --- Composite objective -----------------------------------------------------
// One structure describes everything a step's loss depends on, with every
// pseudo-label target frozen in as a constant. loss_and_grads computes the
// analytic gradients; composite_loss evaluates the value only and is what the
// finite-difference checker probes.

struct UnsupTerm {
    Vec pred_input;    // view whose prediction takes gradients
    Vec target;        // frozen pseudo-label target (probability vector)
    double mask = 1.0;
    bool mse = false;  // meanteacher uses squared probability distance
    bool align_active = false;
    Vec align_target;  // frozen semantic target
};

struct CompositeBatch {
    std::vector<Vec> labeled_x;
    std::vector<int> labeled_y;
    std::vector<UnsupTerm> unsup;
    const PrototypeBank* bank = nullptr;  // needed only when some term aligns
    double lambda_u = 1.0;                // effective weight (ramp already applied)
    double lambda_align = 1.0;
    bool la_enabled = false;
    double la_tau = 1.0;
    std::vector<double> la_counts;
};

struct CompositeResult {
    double total = 0.0;
    double cls = 0.0;
    double unsup = 0.0;
    double align = 0.0;
    Grads grads;
};

namespace detail {

inline Vec onehot(int y, std::size_t k) {
    Vec v(k, 0.0);
    if (y < 0 || y >= static_cast<int>(k)) throw InputError("label " + std::to_string(y) + " out of range");
    v[y] = 1.0;
    return v;
}

/// d(sum_k (softmax(l)_k - t_k)^2)/dlogits via the softmax Jacobian.
inline Vec mse_prob_dlogits(const Vec& probs, const Vec& target) {
    Vec g(probs.size());
    double inner = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        g[k] = 2.0 * (probs[k] - target[k]);
        inner += g[k] * probs[k];
    }
    Vec dl(probs.size());
    for (std::size_t k = 0; k < probs.size(); ++k) dl[k] = probs[k] * (g[k] - inner);
    return dl;
}

/// Gradient of CE(align_target, softmax(cos(z, C)/T)) with respect to z.
/// dsims is softmax(sims) - target, produced by softmax_ce.
inline Vec align_dz(const Vec& z, const PrototypeBank& bank, const Vec& dsims) {
    const auto& protos = bank.prototypes();
    double zn = norm2(z);
    Vec dz(z.size(), 0.0);
    for (std::size_t k = 0; k < protos.size(); ++k) {
        const Vec& c = *protos[k];
        double cn = norm2(c);
        double d = dot(z, c);
        double coef = dsims[k] / bank.temperature();
        for (std::size_t i = 0; i < z.size(); ++i) {
            dz[i] += coef * (c[i] / (zn * cn) - d * z[i] / (zn * zn * zn * cn));
        }
    }
    return dz;
}

inline void check_finite(double v, const char* term) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + term);
}

}  // namespace detail

inline CompositeResult loss_and_grads(const ModelParams& m, const CompositeBatch& batch) {
    if (batch.labeled_x.size() != batch.labeled_y.size()) throw InputError("loss_and_grads: labeled batch misaligned");
    CompositeResult r;
    r.grads = Grads::zeros_like(m);
    std::size_t k = m.num_classes();

    if (!batch.labeled_x.empty()) {
        double scale = 1.0 / static_cast<double>(batch.labeled_x.size());
        for (std::size_t i = 0; i < batch.labeled_x.size(); ++i) {
            ForwardTape tape = forward(m, batch.labeled_x[i], false);
            Vec logits = batch.la_enabled ? adjust_logits_la(tape.logits, batch.la_counts, batch.la_tau) : tape.logits;
            SoftmaxCeResult ce = softmax_ce(detail::onehot(batch.labeled_y[i], k), logits);
            detail::check_finite(ce.loss, "L_cls");
            r.cls += scale * ce.loss;
            for (double& g : ce.dlogits) g *= scale;
            backward(m, tape, &ce.dlogits, nullptr, 1.0, r.grads);
        }
    }

    if (!batch.unsup.empty()) {
        double scale = 1.0 / static_cast<double>(batch.unsup.size());
        for (const UnsupTerm& term : batch.unsup) {
            ForwardTape tape = forward(m, term.pred_input, false);
            Vec dlogits;
            bool have_dlogits = false;

            if (term.mse) {
                Vec probs = softmax(tape.logits);
                double loss = 0.0;
                for (std::size_t j = 0; j < probs.size(); ++j) loss += (probs[j] - term.target[j]) * (probs[j] - term.target[j]);
                detail::check_finite(loss, "L_u (consistency)");
                r.unsup += scale * term.mask * loss;
                if (batch.lambda_u != 0.0 && term.mask > 0.0) {
                    dlogits = detail::mse_prob_dlogits(probs, term.target);
                    for (double& g : dlogits) g *= batch.lambda_u * term.mask * scale;
                    have_dlogits = true;
                }
            } else if (term.mask > 0.0) {
                SoftmaxCeResult ce = softmax_ce(term.target, tape.logits);
                detail::check_finite(ce.loss, "L_u (pseudo-label)");
                r.unsup += scale * term.mask * ce.loss;
                if (batch.lambda_u != 0.0) {
                    dlogits = std::move(ce.dlogits);
                    for (double& g : dlogits) g *= batch.lambda_u * term.mask * scale;
                    have_dlogits = true;
                }
            }

            Vec dz;
            bool have_dz = false;
            if (term.align_active) {
                if (batch.bank == nullptr) throw ContractError("loss_and_grads: align term without a prototype bank");
                const Vec& z = tape.feature();
                if (norm2(z) != 0.0) {  // a fully dead feature contributes nothing
                    SoftmaxCeResult ce = softmax_ce(term.align_target, batch.bank->semantic_sims(z));
                    detail::check_finite(ce.loss, "L_align");
                    r.align += scale * ce.loss;
                    if (batch.lambda_align != 0.0) {
                        dz = detail::align_dz(z, *batch.bank, ce.dlogits);
                        for (double& g : dz) g *= batch.lambda_align * scale;
                        have_dz = true;
                    }
                }
            }

            if (have_dlogits || have_dz) backward(m, tape, have_dlogits ? &dlogits : nullptr, have_dz ? &dz : nullptr, 1.0, r.grads);
        }
    }

    r.total = r.cls + batch.lambda_u * r.unsup + batch.lambda_align * r.align;
    detail::check_finite(r.total, "total loss");
    return r;
}

/// Value-only evaluation of the same composite, for finite differencing.
/// relu_key, when supplied, accumulates the ReLU region of every forward pass.
inline double composite_loss(const ModelParams& m, const CompositeBatch& batch, std::uint64_t* relu_key = nullptr) {
    double cls = 0.0, unsup = 0.0, align = 0.0;
    std::size_t k = m.num_classes();
    auto fold = [&relu_key](const ForwardTape& t) {
        if (relu_key != nullptr) *relu_key = relu_pattern_key(t, *relu_key);
    };

    if (!batch.labeled_x.empty()) {
        double scale = 1.0 / static_cast<double>(batch.labeled_x.size());
        for (std::size_t i = 0; i < batch.labeled_x.size(); ++i) {
            ForwardTape tape = forward(m, batch.labeled_x[i], false);
            fold(tape);
            Vec logits = batch.la_enabled ? adjust_logits_la(tape.logits, batch.la_counts, batch.la_tau) : tape.logits;
            cls += scale * softmax_ce(detail::onehot(batch.labeled_y[i], k), logits).loss;
        }
    }
    if (!batch.unsup.empty()) {
        double scale = 1.0 / static_cast<double>(batch.unsup.size());
        for (const UnsupTerm& term : batch.unsup) {
            ForwardTape tape = forward(m, term.pred_input, false);
            fold(tape);
            if (term.mse) {
                Vec probs = softmax(tape.logits);
                double loss = 0.0;
                for (std::size_t j = 0; j < probs.size(); ++j) loss += (probs[j] - term.target[j]) * (probs[j] - term.target[j]);
                unsup += scale * term.mask * loss;
            } else if (term.mask > 0.0) {
                unsup += scale * term.mask * softmax_ce(term.target, tape.logits).loss;
            }
            if (term.align_active && norm2(tape.feature()) != 0.0) {
                align += scale * softmax_ce(term.align_target, batch.bank->semantic_sims(tape.feature())).loss;
            }
        }
    }
    return cls + batch.lambda_u * unsup + batch.lambda_align * align;
}

// --- Training step -----------------------------------------------------------

struct LabeledBatch {
    std::vector<Vec> x;
    std::vector<int> y;
};

/// Unlabeled batches carry inputs only; ground truth stays behind the
/// metrics-module diagnostic interface.
struct UnlabeledBatch {
    std::vector<Vec> u;
};

struct StepMetrics {
    long step = 0;
    double loss_cls = 0.0;
    double loss_u = 0.0;
    double loss_align = 0.0;
    double loss_total = 0.0;
    double mask_rate = 0.0;
    Vec m_hat;
    Vec upsilon;
    bool blending_active = false;
    bool tracker_snapshot = false;
};

struct TrainState {
    ModelParams model;
    OptState opt;
    PrototypeBank bank;
    PseudoLabelTracker tracker;
    Rng aug_rng;
    long step = 0;        // single clock for the pre-train gate and tracker segments
    long total_steps = 0;
    double t_dist = 1.5;
    double ema_rho = 0.999;
};

namespace detail {

inline bool mode_blends(LearnerMode) { return true; }  // every mode routes targets through blend()

inline bool mode_aligns(LearnerMode m) {
    // meanteacher/pseudolabel have no strong view, and plain fixmatch is the
    // no-alignment baseline by definition
    return m == LearnerMode::FixmatchDaso || m == LearnerMode::BlendConst;
}

inline Vec effective_upsilon(LearnerMode mode, double blend_const_v, const Vec& m_hat, double t_dist) {
    switch (mode) {
        case LearnerMode::Fixmatch: return Vec(m_hat.size(), 0.0);
        case LearnerMode::BlendConst: return Vec(m_hat.size(), blend_const_v);
        default: return blend_weights(m_hat, t_dist);
    }
}

/// Linear ramp multiplier for lambda_u: 0 disables ramping.
inline double ramp_factor(double ramp_frac, long step, long total_steps) {
    if (ramp_frac <= 0.0 || total_steps <= 0) return 1.0;
    return std::min(1.0, static_cast<double>(step) / (ramp_frac * static_cast<double>(total_steps)));
}

inline std::optional<Vec> try_semantic_probs(const PrototypeBank& bank, const Vec& z) {
    if (!bank.warm()) return std::nullopt;
    if (norm2(z) == 0.0) return std::nullopt;
    try {
        return bank.semantic_probs(z);
    } catch (const DegenerateFeatureError&) {
        return std::nullopt;  // zero-norm prototype; treated like warm-up incomplete
    }
}

struct PseudoLabelOutcome {
    Vec target;        // final pseudo-label p'
    double soft_conf;  // max of the linear (soft) pseudo-label
    bool blended = false;
};

inline PseudoLabelOutcome make_pseudo_label(const Vec& p_base, const std::optional<Vec>& q_hat, const Vec& upsilon, bool gate_open) {
    PseudoLabelOutcome out;
    out.soft_conf = max_entry(p_base);
    if (gate_open && q_hat.has_value()) {
        out.target = blend(p_base, *q_hat, upsilon);
        out.blended = true;
    } else {
        out.target = p_base;
    }
    return out;
}

}  // namespace detail

/// One full training step: refresh the prototype bank from the labeled batch,
/// generate (and, past the pre-train gate, blend) pseudo-labels per unlabeled
/// sample, take one SGD step on the composite objective, update the EMA
/// encoder and the pseudo-label tracker.
inline StepMetrics train_step(TrainState& state, const LabeledBatch& labeled, const UnlabeledBatch& unlabeled, const LossConfig& cfg, const AugmentSpec& aug) {
    cfg.validate();
    aug.validate();
    if (labeled.x.size() != labeled.y.size()) throw InputError("train_step: labeled batch misaligned");

    // (1) encoder features of the labeled batch into the balanced queues
    FeatureBatch feats;
    feats.from_ema_encoder = state.bank.requires_ema_features();
    for (std::size_t i = 0; i < labeled.x.size(); ++i) {
        feats.features.push_back(forward(state.model, labeled.x[i], feats.from_ema_encoder).feature());
        feats.labels.push_back(labeled.y[i]);
    }
    state.bank.enqueue_labeled(feats);

    // (2) gates and blend weights for this step
    bool gate_open = state.step >= cfg.pretrain_steps && state.bank.warm();
    bool align_on = detail::mode_aligns(cfg.mode) && cfg.lambda_align > 0.0 && gate_open;
    Vec upsilon = detail::effective_upsilon(cfg.mode, cfg.blend_const_v, state.tracker.m_hat(), state.t_dist);

    // (3) pseudo-labels and unsupervised terms
    CompositeBatch batch;
    batch.labeled_x = labeled.x;
    batch.labeled_y = labeled.y;
    batch.bank = &state.bank;
    batch.lambda_align = align_on ? cfg.lambda_align : 0.0;
    batch.la_enabled = cfg.la_enabled;
    batch.la_tau = cfg.la_tau;
    batch.la_counts = cfg.la_counts;
    batch.lambda_u = cfg.lambda_u * detail::ramp_factor(cfg.ramp_frac, state.step, state.total_steps);

    std::vector<int> tracked_preds;
    double masked = 0.0;
    for (const Vec& u : unlabeled.u) {
        UnsupTerm term;
        std::optional<Vec> q_hat;
        detail::PseudoLabelOutcome pl;

        if (cfg.mode == LearnerMode::Meanteacher) {
            Vec view = augment(u, aug, AugMode::Weak, state.aug_rng);
            ForwardTape live = forward(state.model, view, false);
            Vec teacher = softmax(forward(state.model, view, true).logits);
            q_hat = detail::try_semantic_probs(state.bank, live.feature());
            pl = detail::make_pseudo_label(teacher, q_hat, upsilon, gate_open);
            term.pred_input = view;
            term.mask = 1.0;  // consistency loss has no confidence threshold
            term.mse = true;
        } else if (cfg.mode == LearnerMode::Pseudolabel) {
            ForwardTape live = forward(state.model, u, false);
            Vec p_soft = softmax(live.logits);
            Vec hard = detail::onehot(static_cast<int>(argmax(p_soft)), p_soft.size());
            q_hat = detail::try_semantic_probs(state.bank, live.feature());
            pl = detail::make_pseudo_label(hard, q_hat, upsilon, gate_open);
            pl.soft_conf = max_entry(p_soft);
            // a blended one-hot keeps max ~1, so the threshold always reads
            // the soft linear confidence in this mode
            term.pred_input = u;
            term.mask = pl.soft_conf >= cfg.tau ? 1.0 : 0.0;
        } else {
            Vec weak = augment(u, aug, AugMode::Weak, state.aug_rng);
            Vec strong = augment(u, aug, AugMode::Strong, state.aug_rng);
            ForwardTape weak_tape = forward(state.model, weak, false);
            Vec p_lin = softmax(weak_tape.logits);
            if (gate_open || align_on) q_hat = detail::try_semantic_probs(state.bank, weak_tape.feature());
            pl = detail::make_pseudo_label(p_lin, q_hat, upsilon, gate_open);
            double conf = cfg.mask_on_blended ? max_entry(pl.target) : pl.soft_conf;
            term.pred_input = strong;
            term.mask = conf >= cfg.tau ? 1.0 : 0.0;
            if (align_on && q_hat.has_value()) {
                term.align_active = true;
                term.align_target = *q_hat;
            }
        }

        term.target = pl.target;
        masked += term.mask;
        int hard_pred = static_cast<int>(argmax(term.target));
        if (term.mask > 0.0 || !cfg.tracker_count_masked_only) tracked_preds.push_back(hard_pred);
        batch.unsup.push_back(std::move(term));
    }

    // (4-5) one SGD step, then the EMA shadow
    CompositeResult res = loss_and_grads(state.model, batch);
    sgd_step(state.model, res.grads, state.opt);
    ema_update(state.model, state.ema_rho);

    // (6) feed the tracker with this step's final pseudo-label predictions
    StepMetrics metrics;
    metrics.m_hat = state.tracker.m_hat();
    metrics.tracker_snapshot = state.tracker.record_predictions(tracked_preds);
    metrics.step = state.step;
    metrics.loss_cls = res.cls;
    metrics.loss_u = res.unsup;
    metrics.loss_align = res.align;
    metrics.loss_total = res.total;
    metrics.mask_rate = unlabeled.u.empty() ? 0.0 : masked / static_cast<double>(unlabeled.u.size());
    metrics.upsilon = upsilon;
    metrics.blending_active = gate_open;
    state.step += 1;
    return metrics;
}

/// Mask-and-argmax pseudo-label decisions over a set of unlabeled inputs,
/// using the current model without augmentation. This is the diagnostic twin
/// of the training-time pseudo-label path; the metrics module compares its
/// output against the hidden ground truth.
inline std::vector<PLDecision> pseudo_label_decisions(const TrainState& state, const LossConfig& cfg, const std::vector<Vec>& unlabeled) {
    bool gate_open = state.step >= cfg.pretrain_steps && state.bank.warm();
    Vec upsilon = detail::effective_upsilon(cfg.mode, cfg.blend_const_v, state.tracker.m_hat(), state.t_dist);
    std::vector<PLDecision> out;
    out.reserve(unlabeled.size());
    for (const Vec& u : unlabeled) {
        ForwardTape live = forward(state.model, u, false);
        std::optional<Vec> q_hat = detail::try_semantic_probs(state.bank, live.feature());
        PLDecision d;
        if (cfg.mode == LearnerMode::Meanteacher) {
            Vec teacher = softmax(forward(state.model, u, true).logits);
            auto pl = detail::make_pseudo_label(teacher, q_hat, upsilon, gate_open);
            d.predicted = static_cast<int>(argmax(pl.target));
            d.masked = true;
        } else if (cfg.mode == LearnerMode::Pseudolabel) {
            Vec p_soft = softmax(live.logits);
            Vec hard = detail::onehot(static_cast<int>(argmax(p_soft)), p_soft.size());
            auto pl = detail::make_pseudo_label(hard, q_hat, upsilon, gate_open);
            d.predicted = static_cast<int>(argmax(pl.target));
            d.masked = max_entry(p_soft) >= cfg.tau;
        } else {
            Vec p_lin = softmax(live.logits);
            auto pl = detail::make_pseudo_label(p_lin, q_hat, upsilon, gate_open);
            double conf = cfg.mask_on_blended ? max_entry(pl.target) : max_entry(p_lin);
            d.predicted = static_cast<int>(argmax(pl.target));
            d.masked = conf >= cfg.tau;
        }
        out.push_back(d);
    }
    return out;
}

}  // namespace daso
