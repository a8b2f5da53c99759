#pragma once

// Experiment configuration: a TOML-style file with sections, named presets and
// dotted-path overrides. Every key is declared in a schema; unknown keys are
// rejected and the resolved configuration (all defaults expanded) can be
// written back in the same format and re-read to the identical value.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cilforge/exemplar_memory.hpp"
#include "cilforge/nest_backbone.hpp"
#include "cilforge/trainer.hpp"

namespace cilforge {

struct ExperimentSection {
    std::string name = "experiment";
    std::string output_dir = "runs";
    int64_t seed = 0;
    int64_t repeats = 1;
    bool deterministic = true;
    int64_t threads = 0;  // 0 keeps the library default
    bool verbose = true;

    bool operator==(const ExperimentSection&) const = default;
};

struct DataSection {
    std::string dataset = "mnist";  // mnist | cifar100 | svhn | imagenet100 | imagenet1k | synthetic
    std::string root;               // empty: $CILFORGE_DATA/<dataset dir>, then the built-in data dir
    int64_t train_per_class = 0;    // 0 keeps every sample
    int64_t test_per_class = 0;
    int64_t eval_batch_size = 256;
    int64_t synthetic_classes = 10;
    int64_t synthetic_train_per_class = 200;
    int64_t synthetic_test_per_class = 50;
    int64_t synthetic_seed = 7;

    bool operator==(const DataSection&) const = default;
};

struct PlanSection {
    int64_t base_classes = 0;  // 0: use base_fraction
    double base_fraction = 0.5;
    int64_t increment = 10;
    int64_t seed = -1;  // class-order seed; -1 uses experiment.seed

    bool operator==(const PlanSection&) const = default;
};

struct PlotsSection {
    bool enabled = true;
    int64_t cam_per_class = 2;  // Grad-CAM overlays per class and phase; 0 disables

    bool operator==(const PlotsSection&) const = default;
};

struct ExperimentConfig {
    ExperimentSection experiment;
    DataSection data;
    PlanSection plan;
    BackboneConfig backbone;
    TrainConfig train;  // train.weights / lambda_rule / cam_detach_alpha live in [loss]
    BudgetPolicy memory;
    PlotsSection plots;

    // Throws ConfigError naming the offending key.
    void validate() const;
};

// Parses TOML-style text on top of `base`. Throws ConfigError with the
// source name and line for syntax errors, unknown keys and type mismatches.
ExperimentConfig parse_config(const std::string& text, const ExperimentConfig& base = {},
                              const std::string& source = "<config>");
ExperimentConfig load_config_file(const std::filesystem::path& file, const ExperimentConfig& base = {});

// "section.key=value"; value uses the file syntax, bare words are strings.
void apply_override(ExperimentConfig& config, const std::string& assignment);

// Resolved configuration in the file syntax, every key present.
std::string dump_config(const ExperimentConfig& config);
// FNV-1a of dump_config with the output location (name, output_dir) and
// verbosity cleared, 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

std::vector<std::string> preset_names();
// Throws ConfigError for an unknown preset.
ExperimentConfig preset_config(const std::string& name);
const std::string& preset_text(const std::string& name);

// Every schema key as "section.key".
std::vector<std::string> config_keys();

}  // namespace cilforge
