// cilforge: run class-incremental experiments, plot and re-evaluate them.
//
//   cilforge run --config <file> [--preset name] [--set key=value ...]
//                [--resume dir] [--repeats k] [--parallel-repeats]
//   cilforge plot <run_dir>
//   cilforge eval <run_dir> --phase t
//
// Exit codes: 0 success, 2 configuration error, 3 runtime abort.

#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cilforge/config.hpp"
#include "cilforge/errors.hpp"
#include "cilforge/experiment.hpp"
#include "cilforge/plots.hpp"

namespace fs = std::filesystem;
using namespace cilforge;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct RunArgs {
    std::string config_file;
    std::string preset;
    std::vector<std::string> overrides;
    std::string resume;
    int64_t repeats = 0;
    bool parallel = false;
    bool print_config = false;
};

ExperimentConfig resolve(const RunArgs& args) {
    ExperimentConfig config;
    if (!args.preset.empty()) config = preset_config(args.preset);
    if (!args.config_file.empty()) {
        config = load_config_file(args.config_file, config);
    } else if (!args.resume.empty()) {
        config = load_run_config(args.resume);
    } else if (args.preset.empty()) {
        throw ConfigError("run needs --config, --preset or --resume");
    }
    for (const auto& assignment : args.overrides) apply_override(config, assignment);
    if (args.repeats > 0) config.experiment.repeats = args.repeats;
    if (!args.resume.empty()) {
        // The resumed directory fixes the output location.
        const fs::path dir(args.resume);
        const auto name = dir.filename().empty() ? dir.parent_path().filename() : dir.filename();
        const auto parent = dir.filename().empty() ? dir.parent_path().parent_path() : dir.parent_path();
        config.experiment.name = name.string();
        config.experiment.output_dir = parent.empty() ? "." : parent.string();
    }
    config.validate();
    return config;
}

int cmd_run(const RunArgs& args) {
    const auto config = resolve(args);
    if (args.print_config) {
        std::cout << dump_config(config);
        return 0;
    }
    RunOptions options;
    options.resume = !args.resume.empty();
    options.parallel_repeats = args.parallel;
    options.executable = fs::read_symlink("/proc/self/exe");
    options.log = config.experiment.verbose ? &std::cerr : nullptr;
    const auto result = run_repeats(config, options);
    std::cout << result.root.string() << "\n";
    if (result.runs.size() > 1) std::cout << result.summary.dump(2) << "\n";
    return 0;
}

int cmd_plot(const std::string& run_dir) {
    fs::path dir(run_dir);
    std::vector<fs::path> targets;
    if (fs::exists(dir / "metrics.json")) {
        targets.push_back(dir);
    } else {
        for (int r = 0; fs::exists(dir / ("repeat" + std::to_string(r)) / "metrics.json"); ++r) {
            targets.push_back(dir / ("repeat" + std::to_string(r)));
        }
        if (targets.empty()) throw StateError("cannot plot: missing " + (dir / "metrics.json").string());
    }
    for (const auto& t : targets) {
        for (const auto& file : emit_plots(t)) std::cout << file.string() << "\n";
    }
    return 0;
}

int cmd_eval(const std::string& run_dir, int64_t phase) {
    const auto row = evaluate_checkpoint(run_dir, phase);
    MetricsLog single;
    single.phases.push_back(row);
    std::cout << to_json(single).at("phases").at(0).dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cilforge: class-incremental learning experiments"};
    app.require_subcommand(1);

    RunArgs run_args;
    auto* run = app.add_subcommand("run", "run an experiment");
    run->add_option("--config", run_args.config_file, "TOML-style configuration file");
    run->add_option("--preset", run_args.preset, "named preset applied before the file")
        ->check([](const std::string& name) {
            for (const auto& p : preset_names()) {
                if (p == name) return std::string{};
            }
            std::string known;
            for (const auto& p : preset_names()) known += " " + p;
            return "unknown preset '" + name + "'; known:" + known;
        });
    run->add_option("--set", run_args.overrides, "override section.key=value (repeatable)");
    run->add_option("--resume", run_args.resume, "continue an existing run directory");
    run->add_option("--repeats", run_args.repeats, "number of repeated runs with consecutive seeds")
        ->check(CLI::PositiveNumber);
    run->add_flag("--parallel-repeats", run_args.parallel, "run repeats as parallel processes");
    run->add_flag("--print-config", run_args.print_config, "print the resolved configuration and exit");

    std::string plot_dir;
    auto* plot = app.add_subcommand("plot", "emit plots from a run directory");
    plot->add_option("run_dir", plot_dir, "run directory")->required();

    std::string eval_dir;
    int64_t eval_phase = 0;
    auto* eval = app.add_subcommand("eval", "re-evaluate a phase checkpoint");
    eval->add_option("run_dir", eval_dir, "run directory")->required();
    eval->add_option("--phase", eval_phase, "phase index")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*run) return cmd_run(run_args);
        if (*plot) return cmd_plot(plot_dir);
        if (*eval) return cmd_eval(eval_dir, eval_phase);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "aborted: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
