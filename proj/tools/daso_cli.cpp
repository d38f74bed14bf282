// Experiment CLI: single runs, the fixed ablation suite, config sweeps,
// gradient checking, and aggregation of finished run directories.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "daso/harness.hpp"

int main(int argc, char** argv) {
    CLI::App app{"desk-scale imbalanced semi-supervised learning lab"};
    app.require_subcommand(1);

    std::string config_path, out_dir, grid;
    std::optional<std::uint64_t> seed;
    int seeds = 3;
    int jobs = 1;
    double eps = 1e-5;
    bool dump_dataset = false;
    std::vector<std::string> report_dirs;

    CLI::App* run = app.add_subcommand("run", "execute one configured experiment");
    run->add_option("--config", config_path, "config JSON (omit for built-in defaults)");
    run->add_option("--seed", seed, "override run.seed");
    run->add_option("--out", out_dir, "output directory");
    run->add_flag("--dump-dataset", dump_dataset, "also write the generated dataset as CSV");

    CLI::App* ablate = app.add_subcommand("ablate", "run the fixed ablation arm matrix");
    ablate->add_option("--config", config_path, "base config JSON");
    ablate->add_option("--seeds", seeds, "number of consecutive seeds per arm")->check(CLI::PositiveNumber);
    ablate->add_option("--jobs", jobs, "parallel worker count")->check(CLI::PositiveNumber);
    ablate->add_option("--out", out_dir, "suite output directory");

    CLI::App* sweep = app.add_subcommand("sweep", "cartesian product over config key lists");
    sweep->add_option("--config", config_path, "base config JSON");
    sweep->add_option("--grid", grid, "JSON file or inline object: {\"tracker.T_dist\": [0.3, 1.5], ...}")->required();
    sweep->add_option("--jobs", jobs, "parallel worker count")->check(CLI::PositiveNumber);
    sweep->add_option("--out", out_dir, "suite output directory");

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the composite loss gradients");
    gradcheck->add_option("--eps", eps, "central-difference step")->check(CLI::PositiveNumber);

    CLI::App* report = app.add_subcommand("report", "aggregate run directories into mean+-std tables");
    report->add_option("dirs", report_dirs, "run directories (or parents of them)")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return daso::cmd_run(config_path, seed, out_dir, dump_dataset);
        if (ablate->parsed()) return daso::cmd_ablate(config_path, seeds, jobs, out_dir);
        if (sweep->parsed()) return daso::cmd_sweep(config_path, grid, jobs, out_dir);
        if (gradcheck->parsed()) return daso::cmd_gradcheck(eps);
        if (report->parsed()) return daso::cmd_report(report_dirs);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
