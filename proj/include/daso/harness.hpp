#pragma once

#include <atomic>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "daso/config.hpp"
#include "daso/grad_check.hpp"
#include "daso/run.hpp"

namespace daso {

namespace fs = std::filesystem;

// --- atomic file output -------------------------------------------------------

inline void write_text_atomic(const fs::path& path, const std::string& content) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw InputError("cannot write " + tmp.string());
        out << content;
    }
    fs::rename(tmp, path);
}

// --- result serialization -------------------------------------------------------

namespace detail {

inline void csv_row(std::ostream& os, long step, const char* metric, int cls, double value) {
    os << step << ',' << metric << ',';
    if (cls >= 0) os << cls;
    os << ',' << (std::isfinite(value) ? fmt_double(value) : std::string("nan")) << '\n';
}

inline void csv_opt_row(std::ostream& os, long step, const char* metric, int cls, const std::optional<double>& value) {
    os << step << ',' << metric << ',';
    if (cls >= 0) os << cls;
    os << ',' << (value.has_value() ? fmt_double(*value) : std::string("nan")) << '\n';
}

inline void emit_eval_point(std::ostream& os, const EvalPoint& p, int num_classes) {
    csv_row(os, p.step, "loss_cls", -1, p.mean_loss_cls);
    csv_row(os, p.step, "loss_u", -1, p.mean_loss_u);
    csv_row(os, p.step, "loss_align", -1, p.mean_loss_align);
    csv_row(os, p.step, "loss_total", -1, p.mean_loss_total);
    csv_row(os, p.step, "mask_rate", -1, p.mean_mask_rate);
    csv_row(os, p.step, "overall_acc", -1, p.eval.overall_acc);
    csv_row(os, p.step, "balanced_acc", -1, p.eval.balanced_acc);
    csv_row(os, p.step, "minority_acc", -1, p.eval.minority_acc);
    for (int k = 0; k < num_classes; ++k) csv_row(os, p.step, "per_class_acc", k, p.eval.per_class_acc[k]);
    csv_row(os, p.step, "pl_coverage", -1, p.pl_masked.coverage);
    for (int k = 0; k < num_classes; ++k) csv_row(os, p.step, "pl_recall_masked", k, p.pl_masked.recall[k]);
    for (int k = 0; k < num_classes; ++k) csv_opt_row(os, p.step, "pl_precision_masked", k, p.pl_masked.precision[k]);
    for (int k = 0; k < num_classes; ++k) csv_opt_row(os, p.step, "pl_rel_size_masked", k, p.pl_masked.rel_size[k]);
    for (int k = 0; k < num_classes; ++k) csv_row(os, p.step, "pl_recall_all", k, p.pl_all.recall[k]);
    for (int k = 0; k < num_classes; ++k) csv_opt_row(os, p.step, "pl_precision_all", k, p.pl_all.precision[k]);
    for (int k = 0; k < num_classes; ++k) csv_opt_row(os, p.step, "pl_rel_size_all", k, p.pl_all.rel_size[k]);
    csv_row(os, p.step, "pl_recall_minority_masked", -1, minority_recall(p.pl_masked, num_classes));
    csv_row(os, p.step, "pl_precision_minority_masked", -1, minority_precision(p.pl_masked, num_classes));
    for (int k = 0; k < num_classes; ++k) csv_row(os, p.step, "m_hat", k, p.m_hat[k]);
    for (int k = 0; k < num_classes; ++k) csv_row(os, p.step, "upsilon", k, p.upsilon[k]);
}

}  // namespace detail

/// Long-format metrics stream: step,metric,class,value. Evaluation records and
/// tracker snapshots are merged in step order (evaluations first on ties).
inline std::string metrics_csv(const RunResult& r) {
    std::ostringstream os;
    os << "step,metric,class,value\n";
    int num_classes = r.config.dataset.num_classes;
    std::size_t ei = 0, si = 0;
    while (ei < r.history.size() || si < r.snapshots.size()) {
        bool take_eval = si >= r.snapshots.size() || (ei < r.history.size() && r.history[ei].step <= r.snapshots[si].step);
        if (take_eval) {
            detail::emit_eval_point(os, r.history[ei], num_classes);
            ++ei;
        } else {
            const TrackerSnapshot& s = r.snapshots[si];
            for (int k = 0; k < num_classes; ++k) detail::csv_row(os, s.step, "m_hat_snapshot", k, s.m_hat[k]);
            for (int k = 0; k < num_classes; ++k) detail::csv_row(os, s.step, "upsilon_snapshot", k, s.upsilon[k]);
            ++si;
        }
    }
    return os.str();
}

inline json summary_json(const RunResult& r) {
    json j;
    j["balanced_acc_median20"] = r.summary.balanced_acc_median20;
    j["per_class_acc"] = r.summary.per_class_acc;
    j["minority_acc_median20"] = r.summary.minority_acc_median20;
    j["pl_recall_minority"] = r.summary.pl_recall_minority;
    j["pl_precision_minority"] = r.summary.pl_precision_minority;
    j["pl_recall_minority_masked"] = r.summary.pl_recall_minority_masked;
    j["pl_precision_minority_masked"] = r.summary.pl_precision_minority_masked;
    j["final_coverage"] = r.summary.final_coverage;
    j["seed"] = r.config.run.seed;
    j["status"] = r.status;
    if (r.status != "ok") {
        j["fail_reason"] = r.fail_reason;
        j["failed_at_step"] = r.failed_at_step;
    }
    j["config_echo"] = config_to_json(r.config);
    return j;
}

/// Runs one experiment and writes its directory: config.json (resolved echo),
/// metrics.csv, summary.json, status, metadata.json (wall clock; the only file
/// with timing so everything else is byte-reproducible).
inline RunResult execute_run(const RunConfig& cfg, const fs::path& dir, bool dump_dataset = false) {
    fs::create_directories(dir);
    RunResult r = run_training(cfg);
    write_text_atomic(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
    write_text_atomic(dir / "metrics.csv", metrics_csv(r));
    write_text_atomic(dir / "summary.json", summary_json(r).dump(2) + "\n");
    write_text_atomic(dir / "status", r.status + "\n");
    json meta;
    meta["wall_seconds"] = r.wall_seconds;
    meta["finished_unix"] = static_cast<long>(std::time(nullptr));
    write_text_atomic(dir / "metadata.json", meta.dump(2) + "\n");
    if (dump_dataset) {
        std::ostringstream os;
        dump_dataset_csv(generate_dataset(cfg.dataset, cfg.run.seed), os);
        write_text_atomic(dir / "dataset.csv", os.str());
    }
    return r;
}

// --- run directories ------------------------------------------------------------

inline fs::path default_out_root() {
    if (const char* env = std::getenv("DASO_OUT_ROOT")) return fs::path(env);
    return fs::path("runs");
}

/// Next free directory <root>/<name>, appending _2, _3, ... when taken.
inline fs::path unique_run_dir(const fs::path& root, const std::string& name) {
    fs::path dir = root / name;
    int suffix = 2;
    while (fs::exists(dir)) dir = root / (name + "_" + std::to_string(suffix++));
    return dir;
}

// --- ablation / sweep suites ------------------------------------------------------

/// The fixed ablation matrix: the full method, the no-blend baseline, the
/// three constant-blend arms, and the three component knockouts.
inline std::vector<std::pair<std::string, RunConfig>> ablation_arms(const RunConfig& base) {
    std::vector<std::pair<std::string, RunConfig>> arms;
    RunConfig c = base;
    c.loss.mode = LearnerMode::FixmatchDaso;
    arms.emplace_back("daso", c);
    c = base;
    c.loss.mode = LearnerMode::Fixmatch;
    c.loss.lambda_align = 0.0;
    arms.emplace_back("fixmatch", c);
    for (double v : {0.0, 1.0, 0.5}) {
        c = base;
        c.loss.mode = LearnerMode::BlendConst;
        c.loss.blend_const_v = v;
        arms.emplace_back(v == 0.0 ? "blend_v0" : v == 1.0 ? "blend_v1" : "blend_v05", c);
    }
    c = base;
    c.loss.mode = LearnerMode::FixmatchDaso;
    c.loss.lambda_align = 0.0;
    arms.emplace_back("no_align", c);
    c = base;
    c.bank.balanced_queue = false;
    arms.emplace_back("unbalanced_queue", c);
    c = base;
    c.bank.use_ema_encoder = false;
    arms.emplace_back("no_ema_encoder", c);
    return arms;
}

struct SuiteJob {
    std::string name;
    RunConfig cfg;
    fs::path dir;
};

/// Executes jobs on up to `jobs` worker threads; partial failures are recorded
/// in each run's status file and the suite keeps going.
inline void run_suite(std::vector<SuiteJob> jobs_list, int jobs, bool quiet = false) {
    if (jobs < 1) jobs = 1;
    std::atomic<std::size_t> next{0};
    std::mutex io_mutex;
    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= jobs_list.size()) return;
            const SuiteJob& job = jobs_list[i];
            std::string line;
            try {
                RunResult r = execute_run(job.cfg, job.dir);
                line = job.name + ": " + r.status + " balanced_acc_median20=" + fmt_double(r.summary.balanced_acc_median20);
            } catch (const std::exception& e) {
                line = job.name + ": error: " + e.what();
                std::lock_guard<std::mutex> lock(io_mutex);
                std::cerr << line << '\n';
                continue;
            }
            if (!quiet) {
                std::lock_guard<std::mutex> lock(io_mutex);
                std::cout << line << '\n';
            }
        }
    };
    std::vector<std::thread> pool;
    for (int i = 0; i < jobs && i < static_cast<int>(jobs_list.size()); ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

struct GroupStats {
    int n = 0;
    double mean = 0.0;
    double stdev = 0.0;
};

inline GroupStats group_stats(const std::vector<double>& xs) {
    GroupStats s;
    s.n = static_cast<int>(xs.size());
    if (s.n == 0) return s;
    for (double x : xs) s.mean += x;
    s.mean /= s.n;
    if (s.n > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - s.mean) * (x - s.mean);
        s.stdev = std::sqrt(ss / (s.n - 1));
    }
    return s;
}

inline std::string format_mean_std(const GroupStats& s) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << 100.0 * s.mean << "+-" << 100.0 * s.stdev;
    return os.str();
}

// --- commands -------------------------------------------------------------------

inline int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed, std::string out_dir, bool dump_dataset) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : parse_config_file(config_path);
    if (seed.has_value()) cfg.run.seed = *seed;
    fs::path dir;
    if (!out_dir.empty()) {
        dir = out_dir;
    } else if (!cfg.run.out_dir.empty()) {
        dir = cfg.run.out_dir;
    } else {
        std::string stem = config_path.empty() ? "default" : fs::path(config_path).stem().string();
        dir = unique_run_dir(default_out_root(), stem + "_s" + std::to_string(cfg.run.seed));
    }
    RunResult r = execute_run(cfg, dir, dump_dataset);
    std::cout << "run " << dir.string() << ": " << r.status << "\n"
              << "  balanced_acc_median20 = " << fmt_double(r.summary.balanced_acc_median20) << "\n"
              << "  pl_recall_minority    = " << fmt_double(r.summary.pl_recall_minority) << "\n";
    return r.status == "ok" ? 0 : 1;
}

inline int cmd_ablate(const std::string& config_path, int seeds, int jobs, std::string out_dir) {
    RunConfig base = config_path.empty() ? RunConfig{} : parse_config_file(config_path);
    if (seeds < 1) throw ConfigError("ablate: --seeds must be positive");
    fs::path root = out_dir.empty() ? unique_run_dir(default_out_root(), "ablate") : fs::path(out_dir);
    fs::create_directories(root);

    std::vector<SuiteJob> jobs_list;
    for (const auto& [name, arm_cfg] : ablation_arms(base)) {
        for (int s = 0; s < seeds; ++s) {
            RunConfig cfg = arm_cfg;
            cfg.run.seed = base.run.seed + static_cast<std::uint64_t>(s);
            jobs_list.push_back({name + "_s" + std::to_string(cfg.run.seed), cfg, root / (name + "_s" + std::to_string(cfg.run.seed))});
        }
    }
    run_suite(std::move(jobs_list), jobs);

    // comparison table over the arm results
    std::ostringstream csv, table;
    csv << "arm,seed,status,balanced_acc_median20,pl_recall_minority\n";
    table << "arm                balanced_acc      pl_recall_minority  n\n";
    for (const auto& [name, arm_cfg] : ablation_arms(base)) {
        (void)arm_cfg;
        std::vector<double> acc, rec;
        for (int s = 0; s < seeds; ++s) {
            std::uint64_t sd = base.run.seed + static_cast<std::uint64_t>(s);
            fs::path summary = root / (name + "_s" + std::to_string(sd)) / "summary.json";
            if (!fs::exists(summary)) continue;
            std::ifstream in(summary);
            json j = json::parse(in);
            csv << name << ',' << sd << ',' << j["status"].get<std::string>() << ',' << fmt_double(j["balanced_acc_median20"].get<double>()) << ',' << fmt_double(j["pl_recall_minority"].get<double>()) << '\n';
            if (j["status"] == "ok") {
                acc.push_back(j["balanced_acc_median20"].get<double>());
                rec.push_back(j["pl_recall_minority"].get<double>());
            }
        }
        GroupStats a = group_stats(acc), r = group_stats(rec);
        table << name << std::string(name.size() < 18 ? 18 - name.size() : 1, ' ') << format_mean_std(a) << "        " << format_mean_std(r) << "          " << a.n << '\n';
    }
    write_text_atomic(root / "comparison.csv", csv.str());
    write_text_atomic(root / "comparison.txt", table.str());
    std::cout << table.str();
    return 0;
}

inline int cmd_sweep(const std::string& config_path, const std::string& grid_arg, int jobs, std::string out_dir) {
    RunConfig base = config_path.empty() ? RunConfig{} : parse_config_file(config_path);
    json grid;
    if (fs::exists(grid_arg)) {
        std::ifstream in(grid_arg);
        grid = json::parse(in);
    } else {
        try {
            grid = json::parse(grid_arg);
        } catch (const json::exception&) {
            throw ConfigError("sweep: --grid must be a JSON file or inline JSON object");
        }
    }
    if (!grid.is_object() || grid.empty()) throw ConfigError("sweep: grid must be a non-empty object of key-path -> value list");

    std::vector<std::string> keys;
    std::vector<std::vector<json>> values;
    for (auto it = grid.begin(); it != grid.end(); ++it) {
        if (!it.value().is_array() || it.value().empty()) throw ConfigError("sweep: grid entry " + it.key() + " must be a non-empty array");
        keys.push_back(it.key());
        values.emplace_back(it.value().begin(), it.value().end());
    }

    fs::path root = out_dir.empty() ? unique_run_dir(default_out_root(), "sweep") : fs::path(out_dir);
    fs::create_directories(root);

    json base_echo = config_to_json(base);
    std::vector<SuiteJob> jobs_list;
    std::vector<std::size_t> idx(keys.size(), 0);
    for (;;) {
        json point = base_echo;
        std::string name;
        for (std::size_t i = 0; i < keys.size(); ++i) {
            json* node = &point;
            std::string path = keys[i];
            std::size_t pos;
            while ((pos = path.find('.')) != std::string::npos) {
                node = &(*node)[path.substr(0, pos)];
                path = path.substr(pos + 1);
            }
            (*node)[path] = values[i][idx[i]];
            std::string v = values[i][idx[i]].dump();
            std::erase_if(v, [](char ch) { return ch == '"'; });
            if (!name.empty()) name += "__";
            name += path + "_" + v;
        }
        jobs_list.push_back({name, config_from_json(point), root / name});

        std::size_t i = 0;
        while (i < idx.size() && ++idx[i] == values[i].size()) idx[i++] = 0;
        if (i == idx.size()) break;
    }
    std::cout << "sweep: " << jobs_list.size() << " grid points\n";
    run_suite(std::move(jobs_list), jobs);
    return 0;
}

/// Canonical gradient-check problem: a small randomly initialized model with a
/// warm prototype bank and a composite batch exercising every loss term
/// (labeled CE with logit adjustment, masked pseudo-label CE, alignment).
struct GradcheckProblem {
    ModelParams model;
    PrototypeBank bank;
    CompositeBatch batch;  // batch.bank points at this->bank
};

inline std::unique_ptr<GradcheckProblem> make_gradcheck_problem(std::uint64_t seed = 42) {
    const int num_classes = 4;
    auto problem = std::make_unique<GradcheckProblem>(GradcheckProblem{init_model({3, 10, 8}, num_classes, seed), PrototypeBank(num_classes, 16, 0.05, true), {}});
    ModelParams& model = problem->model;
    Rng rng = derive_stream(seed, "gradcheck");

    auto random_input = [&rng]() {
        Vec x(3);
        for (double& v : x) v = rng.gaussian();
        return x;
    };

    FeatureBatch feats;
    feats.from_ema_encoder = true;
    for (int k = 0; k < num_classes; ++k) {
        for (int i = 0; i < 4; ++i) {
            Vec x = random_input();
            x[k % 3] += 2.0;
            feats.features.push_back(forward(model, x, true).feature());
            feats.labels.push_back(k);
        }
    }
    problem->bank.enqueue_labeled(feats);

    CompositeBatch& batch = problem->batch;
    batch.bank = &problem->bank;
    batch.lambda_u = 1.0;
    batch.lambda_align = 1.0;
    batch.la_enabled = true;
    batch.la_tau = 1.0;
    batch.la_counts = {40.0, 20.0, 10.0, 5.0};
    for (int i = 0; i < 6; ++i) {
        batch.labeled_x.push_back(random_input());
        batch.labeled_y.push_back(i % num_classes);
    }

    AugmentSpec aug{0.1, 0.3, 0.2};
    Vec upsilon = blend_weights({0.4, 0.3, 0.2, 0.1}, 0.5);
    for (int i = 0; i < 10; ++i) {
        Vec u = random_input();
        Vec weak = augment(u, aug, AugMode::Weak, rng);
        Vec strong = augment(u, aug, AugMode::Strong, rng);
        ForwardTape tw = forward(model, weak, false);
        Vec p_hat = softmax(tw.logits);
        Vec q_hat = problem->bank.semantic_probs(tw.feature());
        UnsupTerm term;
        term.pred_input = strong;
        term.target = blend(p_hat, q_hat, upsilon);
        term.mask = max_entry(term.target) >= 0.5 ? 1.0 : 0.0;
        term.align_active = true;
        term.align_target = q_hat;
        batch.unsup.push_back(std::move(term));
    }
    return problem;
}

/// Checks analytic gradients of the full composite objective against central
/// finite differences over every parameter coordinate.
inline GradCheckReport gradcheck_composite(double eps, std::uint64_t seed = 42) {
    auto problem = make_gradcheck_problem(seed);
    CompositeResult analytic = loss_and_grads(problem->model, problem->batch);
    LossEval eval = [&problem](const ModelParams& m, std::uint64_t* key) { return composite_loss(m, problem->batch, key); };
    Rng rng = derive_stream(seed, "gradcheck-sampling");
    return finite_diff_check(problem->model, eval, analytic.grads, eps, static_cast<std::size_t>(-1), rng);
}

inline int cmd_gradcheck(double eps) {
    GradCheckReport report = gradcheck_composite(eps);
    std::cout << "gradcheck: max relative error " << fmt_double(report.max_rel_err) << " over " << report.coords_checked << " coordinates (eps " << fmt_double(eps) << ")\n";
    return report.max_rel_err < 1e-4 ? 0 : 1;
}

inline int cmd_report(const std::vector<std::string>& dirs) {
    // leaf run dirs contain summary.json; anything else is scanned one level
    std::vector<fs::path> leaves;
    for (const std::string& d : dirs) {
        fs::path p(d);
        if (fs::exists(p / "summary.json")) {
            leaves.push_back(p);
        } else if (fs::is_directory(p)) {
            for (const auto& entry : fs::directory_iterator(p)) {
                if (entry.is_directory() && fs::exists(entry.path() / "summary.json")) leaves.push_back(entry.path());
            }
        }
    }
    if (leaves.empty()) {
        std::cerr << "report: no run directories found\n";
        return 1;
    }
    std::sort(leaves.begin(), leaves.end());

    // group runs that differ only by seed: strip the _s<seed> suffix and drop
    // seed/out_dir from the config echo
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
    for (const fs::path& leaf : leaves) {
        std::ifstream in(leaf / "summary.json");
        json j = json::parse(in);
        if (j["status"] != "ok") continue;
        std::string name = leaf.filename().string();
        std::size_t pos = name.rfind("_s");
        if (pos != std::string::npos && pos + 2 < name.size() && std::isdigit(static_cast<unsigned char>(name[pos + 2]))) name = name.substr(0, pos);
        json echo = j["config_echo"];
        echo["run"].erase("seed");
        echo["run"].erase("out_dir");
        std::string key = name + "|" + echo.dump();
        groups[key].first.push_back(j["balanced_acc_median20"].get<double>());
        groups[key].second.push_back(j["pl_recall_minority"].get<double>());
    }
    std::cout << "group              n  balanced_acc   pl_recall_minority\n";
    for (const auto& [key, vals] : groups) {
        std::string name = key.substr(0, key.find('|'));
        GroupStats a = group_stats(vals.first), r = group_stats(vals.second);
        std::cout << name << std::string(name.size() < 18 ? 18 - name.size() : 1, ' ') << a.n << "  " << format_mean_std(a) << "      " << format_mean_std(r) << '\n';
    }
    return 0;
}

}  // namespace daso
