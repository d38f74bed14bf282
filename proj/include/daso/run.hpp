#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "daso/config.hpp"
#include "daso/datagen.hpp"
#include "daso/learner.hpp"
#include "daso/metrics.hpp"

namespace daso {

/// One evaluation-cadence record: EMA-model test metrics, pseudo-label quality
/// over the full unlabeled split (masked and unmasked variants), and the loss
/// means since the previous evaluation.
struct EvalPoint {
    long step = 0;
    EvalReport eval;
    PLQualityReport pl_masked;
    PLQualityReport pl_all;
    double mean_loss_cls = 0.0;
    double mean_loss_u = 0.0;
    double mean_loss_align = 0.0;
    double mean_loss_total = 0.0;
    double mean_mask_rate = 0.0;
    Vec m_hat;
    Vec upsilon;
};

struct TrackerSnapshot {
    long step = 0;
    Vec m_hat;
    Vec upsilon;
};

struct RunSummary {
    double balanced_acc_median20 = 0.0;
    std::vector<double> per_class_acc;  // median over the last 20 evaluations, per class
    double minority_acc_median20 = 0.0;
    // minority-group pseudo-label quality, micro-averaged, median over the
    // last 20 evaluations; the headline pair covers all predictions, the
    // _masked pair only confidence-mask survivors
    double pl_recall_minority = 0.0;
    double pl_precision_minority = 0.0;
    double pl_recall_minority_masked = 0.0;
    double pl_precision_minority_masked = 0.0;
    double final_coverage = 0.0;
};

struct RunResult {
    RunConfig config;
    std::vector<EvalPoint> history;       // total_steps / eval_interval + 1 entries
    std::vector<TrackerSnapshot> snapshots;
    RunSummary summary;
    std::string status = "ok";
    std::string fail_reason;
    long failed_at_step = -1;
    double wall_seconds = 0.0;
};

namespace detail {

inline TrainState make_train_state(const RunConfig& cfg, const DatasetBundle& data) {
    ModelParams model = init_model(cfg.layer_dims(), cfg.dataset.num_classes, derive_seed(cfg.run.seed, "init"));
    OptState opt = OptState::make(model, cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay, cfg.optim.nesterov);
    PrototypeBank bank(cfg.dataset.num_classes, static_cast<std::size_t>(cfg.bank.queue_len), cfg.bank.t_proto, cfg.bank.use_ema_encoder);
    if (!cfg.bank.balanced_queue) {
        // ablation arm: per-class capacity proportional to label frequency,
        // same total budget K*L
        long total = 0;
        for (int n : data.labeled_counts) total += n;
        std::vector<std::size_t> caps;
        for (int n : data.labeled_counts) {
            double share = static_cast<double>(cfg.bank.queue_len) * cfg.dataset.num_classes * n / static_cast<double>(total);
            caps.push_back(static_cast<std::size_t>(std::max(1.0, std::floor(share + 0.5))));
        }
        bank.set_capacities(std::move(caps));
    }
    TrackerMode tmode = cfg.tracker.mode == "window" ? TrackerMode::Window : TrackerMode::Segment;
    PseudoLabelTracker tracker(cfg.dataset.num_classes, cfg.tracker.segment_len, tmode, cfg.tracker.window_len);
    TrainState state{std::move(model), std::move(opt), std::move(bank), std::move(tracker), derive_stream(cfg.run.seed, "augment")};
    state.total_steps = cfg.run.total_steps;
    state.t_dist = cfg.tracker.t_dist;
    state.ema_rho = cfg.optim.ema_rho;
    return state;
}

inline EvalPoint make_eval_point(const TrainState& state, const LossConfig& loss_cfg, const DatasetBundle& data) {
    EvalPoint p;
    p.step = state.step;
    p.eval = evaluate(state.model, data.test, /*use_ema=*/true);
    std::vector<PLDecision> decisions = pseudo_label_decisions(state, loss_cfg, data.unlabeled);
    p.pl_masked = pl_quality(decisions, data.unlabeled_true_labels, state.bank.num_classes());
    for (PLDecision& d : decisions) d.masked = true;
    p.pl_all = pl_quality(decisions, data.unlabeled_true_labels, state.bank.num_classes());
    p.m_hat = state.tracker.m_hat();
    p.upsilon = detail::effective_upsilon(loss_cfg.mode, loss_cfg.blend_const_v, p.m_hat, state.t_dist);
    return p;
}

}  // namespace detail

/// Runs the configured experiment: evaluates the freshly initialized model,
/// then alternates train steps with evaluations every eval_interval steps.
/// Numeric failures abort the run but keep the partial history, flagged.
inline RunResult run_training(const RunConfig& cfg) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();

    RunResult result;
    result.config = cfg;

    DatasetBundle data = generate_dataset(cfg.dataset, cfg.run.seed);
    LossConfig loss_cfg = cfg.loss;
    if (loss_cfg.la_enabled) {
        loss_cfg.la_counts.assign(data.labeled_counts.begin(), data.labeled_counts.end());
    }

    TrainState state = detail::make_train_state(cfg, data);
    Rng sample_labeled = derive_stream(cfg.run.seed, "sample-labeled");
    Rng sample_unlabeled = derive_stream(cfg.run.seed, "sample-unlabeled");

    result.history.push_back(detail::make_eval_point(state, loss_cfg, data));

    double acc_cls = 0.0, acc_u = 0.0, acc_align = 0.0, acc_total = 0.0, acc_mask = 0.0;
    long acc_n = 0;
    std::size_t batch = static_cast<std::size_t>(cfg.run.batch_size);
    std::size_t ubatch = batch * static_cast<std::size_t>(cfg.run.mu);

    try {
        for (long t = 1; t <= cfg.run.total_steps; ++t) {
            LabeledBatch lb;
            for (std::size_t i = 0; i < batch; ++i) {
                const LabeledExample& e = data.labeled[sample_labeled.uniform_index(data.labeled.size())];
                lb.x.push_back(e.x);
                lb.y.push_back(e.y);
            }
            UnlabeledBatch ub;
            for (std::size_t i = 0; i < ubatch; ++i) ub.u.push_back(data.unlabeled[sample_unlabeled.uniform_index(data.unlabeled.size())]);

            StepMetrics m = train_step(state, lb, ub, loss_cfg, cfg.augment);
            acc_cls += m.loss_cls;
            acc_u += m.loss_u;
            acc_align += m.loss_align;
            acc_total += m.loss_total;
            acc_mask += m.mask_rate;
            ++acc_n;

            if (m.tracker_snapshot) {
                const Vec& mh = state.tracker.m_hat();
                result.snapshots.push_back({m.step, mh, detail::effective_upsilon(loss_cfg.mode, loss_cfg.blend_const_v, mh, state.t_dist)});
            }
            if (t % cfg.run.eval_interval == 0) {
                EvalPoint p = detail::make_eval_point(state, loss_cfg, data);
                p.mean_loss_cls = acc_cls / acc_n;
                p.mean_loss_u = acc_u / acc_n;
                p.mean_loss_align = acc_align / acc_n;
                p.mean_loss_total = acc_total / acc_n;
                p.mean_mask_rate = acc_mask / acc_n;
                result.history.push_back(std::move(p));
                acc_cls = acc_u = acc_align = acc_total = acc_mask = 0.0;
                acc_n = 0;
            }
        }
    } catch (const NumericError& e) {
        result.status = "failed";
        result.fail_reason = e.what();
        result.failed_at_step = state.step;
    }

    // summary over the evaluation history (median of the last 20 evaluations)
    int num_classes = cfg.dataset.num_classes;
    std::vector<double> balanced, minority_acc, rec_all, prec_all, rec_masked, prec_masked;
    std::vector<std::vector<double>> per_class(num_classes);
    for (const EvalPoint& p : result.history) {
        balanced.push_back(p.eval.balanced_acc);
        minority_acc.push_back(p.eval.minority_acc);
        rec_all.push_back(minority_recall(p.pl_all, num_classes));
        prec_all.push_back(minority_precision(p.pl_all, num_classes));
        rec_masked.push_back(minority_recall(p.pl_masked, num_classes));
        prec_masked.push_back(minority_precision(p.pl_masked, num_classes));
        for (int k = 0; k < num_classes; ++k) per_class[k].push_back(p.eval.per_class_acc[k]);
    }
    result.summary.balanced_acc_median20 = median_last_k(balanced, 20);
    result.summary.minority_acc_median20 = median_last_k(minority_acc, 20);
    result.summary.pl_recall_minority = median_last_k(rec_all, 20);
    result.summary.pl_precision_minority = median_last_k(prec_all, 20);
    result.summary.pl_recall_minority_masked = median_last_k(rec_masked, 20);
    result.summary.pl_precision_minority_masked = median_last_k(prec_masked, 20);
    result.summary.final_coverage = result.history.back().pl_masked.coverage;
    for (int k = 0; k < num_classes; ++k) result.summary.per_class_acc.push_back(median_last_k(per_class[k], 20));

    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

}  // namespace daso
