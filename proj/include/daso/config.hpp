#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "daso/common.hpp"
#include "daso/datagen.hpp"
#include "daso/learner.hpp"

namespace daso {

using json = nlohmann::ordered_json;

/// Prototype bank configuration knobs surfaced in the experiment config.
struct BankConfig {
    int queue_len = 256;       // L
    double t_proto = 0.05;     // T_proto
    bool balanced_queue = true;
    bool use_ema_encoder = true;

    void validate() const {
        if (queue_len < 1) throw ConfigError("bank.L: must be positive");
        if (!(t_proto > 0.0)) throw ConfigError("bank.T_proto: must be positive");
    }
};

struct TrackerConfig {
    int segment_len = 100;
    double t_dist = 1.5;  // T_dist
    std::string mode = "segment";  // or "window"
    int window_len = 500;

    void validate() const {
        if (segment_len < 1) throw ConfigError("tracker.segment_len: must be positive");
        if (!(t_dist > 0.0)) throw ConfigError("tracker.T_dist: must be positive");
        if (mode != "segment" && mode != "window") throw ConfigError("tracker.mode: must be 'segment' or 'window'");
        if (window_len < 1) throw ConfigError("tracker.window_len: must be positive");
    }
};

struct OptimConfig {
    double lr = 0.03;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    bool nesterov = true;
    double ema_rho = 0.999;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("optim.lr: must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optim.momentum: must be in [0, 1)");
        if (weight_decay < 0.0) throw ConfigError("optim.weight_decay: must be non-negative");
        if (!(ema_rho >= 0.0 && ema_rho <= 1.0)) throw ConfigError("optim.ema_rho: must be in [0, 1]");
    }
};

struct RunBlock {
    long total_steps = 4000;
    long eval_interval = 200;
    int batch_size = 64;  // B
    int mu = 2;           // unlabeled batch = mu * B
    std::uint64_t seed = 1;
    std::string out_dir;

    void validate() const {
        if (total_steps < 0) throw ConfigError("run.total_steps: must be non-negative");
        if (eval_interval < 1) throw ConfigError("run.eval_interval: must be positive");
        if (total_steps % eval_interval != 0) throw ConfigError("run.eval_interval: must divide total_steps");
        if (batch_size < 1) throw ConfigError("run.batch_size: must be positive");
        if (mu < 1) throw ConfigError("run.mu: must be positive");
    }
};

/// Full experiment description. Every field has a documented default; parsing
/// is strict (unknown keys are rejected, invariants checked up front).
struct RunConfig {
    DatasetSpec dataset;
    AugmentSpec augment;
    std::vector<int> hidden_dims = {32, 16};  // encoder dims after the input; last is the feature dim
    LossConfig loss;
    BankConfig bank;
    TrackerConfig tracker;
    OptimConfig optim;
    RunBlock run;

    std::vector<int> layer_dims() const {
        std::vector<int> dims = {dataset.input_dim};
        dims.insert(dims.end(), hidden_dims.begin(), hidden_dims.end());
        return dims;
    }

    void validate() const {
        dataset.validate();
        augment.validate();
        if (hidden_dims.empty()) throw ConfigError("model.layer_dims: must be non-empty");
        for (int d : hidden_dims) {
            if (d < 1) throw ConfigError("model.layer_dims: entries must be positive");
        }
        loss.validate();
        bank.validate();
        tracker.validate();
        optim.validate();
        run.validate();
    }
};

namespace detail {

/// Pulls a typed value out of obj if the key is present; records the key as
/// consumed so leftovers can be reported with their path.
template <typename T>
void take(const json& obj, std::set<std::string>& seen, const std::string& path, const char* key, T& into) {
    if (!obj.contains(key)) return;
    seen.insert(key);
    try {
        into = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: type mismatch at " + path + key);
    }
}

inline void reject_unknown(const json& obj, const std::set<std::string>& seen, const std::string& path) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!seen.count(it.key())) throw ConfigError("config: unknown key " + path + it.key());
    }
}

inline json expect_object(const json& parent, std::set<std::string>& seen, const char* key) {
    if (!parent.contains(key)) return json::object();
    seen.insert(key);
    if (!parent.at(key).is_object()) throw ConfigError(std::string("config: ") + key + " must be an object");
    return parent.at(key);
}

}  // namespace detail

inline RunConfig config_from_json(const json& root) {
    if (!root.is_object()) throw ConfigError("config: top level must be an object");
    RunConfig cfg;
    std::set<std::string> top;

    {
        json o = detail::expect_object(root, top, "dataset");
        std::set<std::string> seen;
        detail::take(o, seen, "dataset.", "K", cfg.dataset.num_classes);
        detail::take(o, seen, "dataset.", "d", cfg.dataset.input_dim);
        detail::take(o, seen, "dataset.", "N1", cfg.dataset.head_labeled);
        detail::take(o, seen, "dataset.", "M1", cfg.dataset.head_unlabeled);
        detail::take(o, seen, "dataset.", "gamma_l", cfg.dataset.gamma_l);
        detail::take(o, seen, "dataset.", "gamma_u", cfg.dataset.gamma_u);
        detail::take(o, seen, "dataset.", "separation", cfg.dataset.separation);
        detail::take(o, seen, "dataset.", "noise_sigma", cfg.dataset.noise_sigma);
        detail::take(o, seen, "dataset.", "test_per_class", cfg.dataset.test_per_class);
        detail::reject_unknown(o, seen, "dataset.");
    }
    {
        json o = detail::expect_object(root, top, "augment");
        std::set<std::string> seen;
        detail::take(o, seen, "augment.", "weak_sigma", cfg.augment.weak_sigma);
        detail::take(o, seen, "augment.", "strong_sigma", cfg.augment.strong_sigma);
        detail::take(o, seen, "augment.", "strong_drop_prob", cfg.augment.strong_drop_prob);
        detail::reject_unknown(o, seen, "augment.");
    }
    {
        json o = detail::expect_object(root, top, "model");
        std::set<std::string> seen;
        detail::take(o, seen, "model.", "layer_dims", cfg.hidden_dims);
        detail::reject_unknown(o, seen, "model.");
    }
    {
        json o = detail::expect_object(root, top, "loss");
        std::set<std::string> seen;
        detail::take(o, seen, "loss.", "lambda_u", cfg.loss.lambda_u);
        detail::take(o, seen, "loss.", "lambda_align", cfg.loss.lambda_align);
        detail::take(o, seen, "loss.", "tau", cfg.loss.tau);
        detail::take(o, seen, "loss.", "pretrain_steps", cfg.loss.pretrain_steps);
        detail::take(o, seen, "loss.", "la_enabled", cfg.loss.la_enabled);
        detail::take(o, seen, "loss.", "la_tau", cfg.loss.la_tau);
        std::string mode = to_string(cfg.loss.mode);
        detail::take(o, seen, "loss.", "mode", mode);
        cfg.loss.mode = learner_mode_from_string(mode);
        detail::take(o, seen, "loss.", "blend_const_v", cfg.loss.blend_const_v);
        detail::take(o, seen, "loss.", "ramp_frac", cfg.loss.ramp_frac);
        detail::take(o, seen, "loss.", "mask_on_blended", cfg.loss.mask_on_blended);
        detail::take(o, seen, "loss.", "tracker_count_masked_only", cfg.loss.tracker_count_masked_only);
        detail::reject_unknown(o, seen, "loss.");
    }
    {
        json o = detail::expect_object(root, top, "bank");
        std::set<std::string> seen;
        detail::take(o, seen, "bank.", "L", cfg.bank.queue_len);
        detail::take(o, seen, "bank.", "T_proto", cfg.bank.t_proto);
        detail::take(o, seen, "bank.", "balanced_queue", cfg.bank.balanced_queue);
        detail::take(o, seen, "bank.", "use_ema_encoder", cfg.bank.use_ema_encoder);
        detail::reject_unknown(o, seen, "bank.");
    }
    {
        json o = detail::expect_object(root, top, "tracker");
        std::set<std::string> seen;
        detail::take(o, seen, "tracker.", "segment_len", cfg.tracker.segment_len);
        detail::take(o, seen, "tracker.", "T_dist", cfg.tracker.t_dist);
        detail::take(o, seen, "tracker.", "mode", cfg.tracker.mode);
        detail::take(o, seen, "tracker.", "window_len", cfg.tracker.window_len);
        detail::reject_unknown(o, seen, "tracker.");
    }
    {
        json o = detail::expect_object(root, top, "optim");
        std::set<std::string> seen;
        detail::take(o, seen, "optim.", "lr", cfg.optim.lr);
        detail::take(o, seen, "optim.", "momentum", cfg.optim.momentum);
        detail::take(o, seen, "optim.", "weight_decay", cfg.optim.weight_decay);
        detail::take(o, seen, "optim.", "nesterov", cfg.optim.nesterov);
        detail::take(o, seen, "optim.", "ema_rho", cfg.optim.ema_rho);
        detail::reject_unknown(o, seen, "optim.");
    }
    {
        json o = detail::expect_object(root, top, "run");
        std::set<std::string> seen;
        detail::take(o, seen, "run.", "total_steps", cfg.run.total_steps);
        detail::take(o, seen, "run.", "eval_interval", cfg.run.eval_interval);
        detail::take(o, seen, "run.", "batch_size", cfg.run.batch_size);
        detail::take(o, seen, "run.", "mu", cfg.run.mu);
        detail::take(o, seen, "run.", "seed", cfg.run.seed);
        detail::take(o, seen, "run.", "out_dir", cfg.run.out_dir);
        detail::reject_unknown(o, seen, "run.");
    }
    detail::reject_unknown(root, top, "");
    cfg.validate();
    return cfg;
}

/// Fully resolved config echo; parse(serialize(cfg)) == cfg.
inline json config_to_json(const RunConfig& cfg) {
    json j;
    j["dataset"] = {{"K", cfg.dataset.num_classes},       {"d", cfg.dataset.input_dim},
                    {"N1", cfg.dataset.head_labeled},     {"M1", cfg.dataset.head_unlabeled},
                    {"gamma_l", cfg.dataset.gamma_l},     {"gamma_u", cfg.dataset.gamma_u},
                    {"separation", cfg.dataset.separation}, {"noise_sigma", cfg.dataset.noise_sigma},
                    {"test_per_class", cfg.dataset.test_per_class}};
    j["augment"] = {{"weak_sigma", cfg.augment.weak_sigma}, {"strong_sigma", cfg.augment.strong_sigma}, {"strong_drop_prob", cfg.augment.strong_drop_prob}};
    j["model"] = {{"layer_dims", cfg.hidden_dims}};
    j["loss"] = {{"lambda_u", cfg.loss.lambda_u},
                 {"lambda_align", cfg.loss.lambda_align},
                 {"tau", cfg.loss.tau},
                 {"pretrain_steps", cfg.loss.pretrain_steps},
                 {"la_enabled", cfg.loss.la_enabled},
                 {"la_tau", cfg.loss.la_tau},
                 {"mode", to_string(cfg.loss.mode)},
                 {"blend_const_v", cfg.loss.blend_const_v},
                 {"ramp_frac", cfg.loss.ramp_frac},
                 {"mask_on_blended", cfg.loss.mask_on_blended},
                 {"tracker_count_masked_only", cfg.loss.tracker_count_masked_only}};
    j["bank"] = {{"L", cfg.bank.queue_len}, {"T_proto", cfg.bank.t_proto}, {"balanced_queue", cfg.bank.balanced_queue}, {"use_ema_encoder", cfg.bank.use_ema_encoder}};
    j["tracker"] = {{"segment_len", cfg.tracker.segment_len}, {"T_dist", cfg.tracker.t_dist}, {"mode", cfg.tracker.mode}, {"window_len", cfg.tracker.window_len}};
    j["optim"] = {{"lr", cfg.optim.lr}, {"momentum", cfg.optim.momentum}, {"weight_decay", cfg.optim.weight_decay}, {"nesterov", cfg.optim.nesterov}, {"ema_rho", cfg.optim.ema_rho}};
    j["run"] = {{"total_steps", cfg.run.total_steps}, {"eval_interval", cfg.run.eval_interval}, {"batch_size", cfg.run.batch_size}, {"mu", cfg.run.mu}, {"seed", cfg.run.seed}, {"out_dir", cfg.run.out_dir}};
    return j;
}

inline RunConfig parse_config_text(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    return config_from_json(root);
}

inline RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

}  // namespace daso
