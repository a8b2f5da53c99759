#pragma once

// End-to-end experiment driver: phases 0..N of train -> update memory ->
// evaluate -> snapshot teacher, with per-phase checkpoints, incremental
// metrics, resumption, repeats and checkpoint re-evaluation.

#include <filesystem>
#include <iosfwd>
#include <vector>

#include <nlohmann/json.hpp>

#include "cilforge/config.hpp"
#include "cilforge/datasets.hpp"
#include "cilforge/evaluation.hpp"
#include "cilforge/trainer.hpp"

namespace cilforge {

struct RunOptions {
    // Continue the run directory from its last complete phase.
    bool resume = false;
    // Repeats as independent child processes of `executable`.
    bool parallel_repeats = false;
    std::filesystem::path executable;
    StepHook step_hook;
    std::ostream* log = nullptr;  // progress lines; nullptr silences
};

struct RunResult {
    std::filesystem::path run_dir;
    MetricsLog metrics;
    double wall_clock_s = 0.0;
};

struct RepeatsResult {
    std::filesystem::path root;
    std::vector<RunResult> runs;
    nlohmann::json summary;
};

// output_dir / name
std::filesystem::path run_directory(const ExperimentConfig& config);

// Explicit data.root, else $CILFORGE_DATA/<dataset dir>, else the built-in
// data directory.
std::filesystem::path resolve_data_root(const ExperimentConfig& config);

// Loads, subsamples and normalizes the configured dataset and checks it
// against the backbone input shape. Missing data raises ConfigError.
DatasetSplits load_experiment_data(const ExperimentConfig& config);

// Seed of repeat r (0-based).
int64_t repeat_seed(const ExperimentConfig& config, int64_t repeat);

// One run in run_directory(config), ignoring experiment.repeats.
RunResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

// experiment.repeats runs; more than one run goes to <root>/repeat{r} with
// seed experiment.seed + r and writes <root>/summary.json (mean and std).
RepeatsResult run_repeats(const ExperimentConfig& config, const RunOptions& options = {});

// config.toml of a run directory.
ExperimentConfig load_run_config(const std::filesystem::path& run_dir);

// Re-evaluates phase{t}/model.ckpt with its memory on the seen-class test
// data; writes phase{t}/eval.json and returns the row.
PhaseMetrics evaluate_checkpoint(const std::filesystem::path& run_dir, int64_t phase);

// Phases whose model.ckpt, memory.json and metrics.json all exist.
int64_t completed_phases(const std::filesystem::path& run_dir);

}  // namespace cilforge
