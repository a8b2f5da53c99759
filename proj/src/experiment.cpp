#include "cilforge/experiment.hpp"

#include <spawn.h>
#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>

#include "cilforge/attention_maps.hpp"
#include "cilforge/checkpoint.hpp"
#include "cilforge/errors.hpp"
#include "cilforge/plots.hpp"
#include "cilforge/task_stream.hpp"

#ifndef CILFORGE_DEFAULT_DATA_DIR
#define CILFORGE_DEFAULT_DATA_DIR "data"
#endif

extern char** environ;

namespace cilforge {

namespace fs = std::filesystem;

namespace {

fs::path phase_dir(const fs::path& run_dir, int64_t t) { return run_dir / ("phase" + std::to_string(t)); }

void write_text_atomic(const fs::path& file, const std::string& text) {
    const auto tmp = fs::path(file.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw StateError("cannot write " + tmp.string());
        out << text;
    }
    fs::rename(tmp, file);
}

nlohmann::json read_json(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw StateError("cannot read " + file.string());
    return nlohmann::json::parse(in);
}

std::string dataset_dir_name(const std::string& dataset) {
    if (dataset == "cifar100") return "cifar-100-binary";
    return dataset;
}

void apply_runtime_settings(const ExperimentConfig& config) {
    if (config.experiment.threads > 0) torch::set_num_threads(static_cast<int>(config.experiment.threads));
    at::globalContext().setDeterministicAlgorithms(config.experiment.deterministic, false);
}

struct Logger {
    std::ostream* out = nullptr;

    template <typename... Args>
    void operator()(const Args&... args) const {
        if (out == nullptr) return;
        std::ostringstream line;
        (line << ... << args);
        *out << line.str() << std::endl;
    }
};

// Largest memory allowed once `seen` classes are stored.
int64_t budget_limit(const BudgetPolicy& policy, int64_t seen) {
    return policy.kind == BudgetKind::PerClass ? policy.size * seen : policy.size;
}

nlohmann::json memory_document(const ExemplarMemory& memory, int64_t phase, int64_t seen) {
    auto doc = memory.manifest();
    doc["phase"] = phase;
    doc["seen_classes"] = seen;
    doc["total"] = memory.total_size();
    doc["limit"] = budget_limit(memory.policy(), seen);
    doc["quota"] = memory.policy().quota(seen);
    return doc;
}

// Budget invariant: total within the policy limit, no class above its quota
// and every seen class represented.
void check_budget(const ExemplarMemory& memory, int64_t seen, int64_t phase) {
    const auto quota = memory.policy().quota(seen);
    if (memory.class_count() != seen) {
        throw StateError("memory holds " + std::to_string(memory.class_count()) + " classes after phase " +
                         std::to_string(phase) + ", expected " + std::to_string(seen));
    }
    for (const auto& [cls, refs] : memory.store()) {
        if (static_cast<int64_t>(refs.size()) > quota || refs.empty()) {
            throw StateError("memory class " + std::to_string(cls) + " holds " + std::to_string(refs.size()) +
                             " exemplars, quota " + std::to_string(quota));
        }
    }
    if (memory.total_size() > budget_limit(memory.policy(), seen)) {
        throw StateError("memory total " + std::to_string(memory.total_size()) + " exceeds the budget " +
                         std::to_string(budget_limit(memory.policy(), seen)));
    }
}

LabeledSet class_subset(const LabeledSet& set, int64_t cls) {
    auto idx = (set.labels == cls).nonzero().flatten();
    return {set.images.index_select(0, idx), set.labels.index_select(0, idx), set.indices.index_select(0, idx)};
}

std::map<int64_t, ClassCandidates> new_class_candidates(NestBackbone& backbone, const PhaseData& data,
                                                        const PhasePlan& plan, const Dataset& stats,
                                                        int64_t batch_size) {
    std::map<int64_t, ClassCandidates> out;
    const auto [first, last] = plan.phase_classes(data.phase);
    for (int64_t c = first; c < last; ++c) {
        auto subset = class_subset(data.new_train, c);
        ClassCandidates cand;
        cand.features = extract_pooled(backbone, subset.images, stats, batch_size);
        auto idx = subset.indices.contiguous();
        for (int64_t i = 0; i < subset.size(); ++i) {
            cand.refs.push_back({idx[i].item<int64_t>(), subset.images[i].clone()});
        }
        out[c] = std::move(cand);
    }
    return out;
}

void imprint_head(NestBackbone& backbone, CosineHead& head, const PhaseData& data, const PhasePlan& plan,
                  const Dataset& stats, int64_t batch_size) {
    std::map<int64_t, torch::Tensor> feats;
    const auto [first, last] = plan.phase_classes(data.phase);
    for (int64_t c = first; c < last; ++c) {
        feats[c] = extract_pooled(backbone, class_subset(data.new_train, c).images, stats, batch_size);
    }
    head->imprint_new_classes(feats);
}

void write_cam_overlays(NestBackbone& backbone, CosineHead& head, const LabeledSet& test_seen, const Dataset& stats,
                        int64_t per_class, int64_t phase, int64_t seen, const fs::path& dir) {
    std::vector<int64_t> rows;
    for (int64_t c = 0; c < seen; ++c) {
        auto idx = (test_seen.labels == c).nonzero().flatten();
        for (int64_t i = 0; i < std::min<int64_t>(per_class, idx.size(0)); ++i) rows.push_back(idx[i].item<int64_t>());
    }
    if (rows.empty()) return;
    auto sel = torch::tensor(rows, torch::kLong);
    auto images = test_seen.images.index_select(0, sel);
    auto labels = test_seen.labels.index_select(0, sel);
    auto indices = test_seen.indices.index_select(0, sel);
    const bool was_training = backbone->is_training();
    backbone->eval();
    head->eval();
    auto cam = grad_cam(backbone, head, to_model_input(images, stats), labels);
    if (was_training) {
        backbone->train();
        head->train();
    }
    for (int64_t i = 0; i < images.size(0); ++i) {
        write_cam_overlay(dir / cam_file_name(phase, labels[i].item<int64_t>(), indices[i].item<int64_t>()),
                          images[i], cam.values[i]);
    }
}

PhasePlan plan_for(const ExperimentConfig& config, const DatasetSplits& data) {
    const uint64_t plan_seed = static_cast<uint64_t>(config.plan.seed < 0 ? config.experiment.seed : config.plan.seed);
    return make_plan(data.train.num_classes, BaseSpec{config.plan.base_classes, config.plan.base_fraction},
                     config.plan.increment, plan_seed);
}

ExemplarMemory load_memory(const fs::path& file, const Dataset& train) {
    auto doc = read_json(file);
    return ExemplarMemory::from_manifest(doc, [&train](int64_t idx) {
        if (idx < 0 || idx >= train.size()) {
            throw StateError("memory manifest references dataset index " + std::to_string(idx) +
                             " outside the training set");
        }
        return train.images[idx].clone();
    });
}

pid_t spawn_child(const fs::path& executable, const std::vector<std::string>& args) {
    std::vector<char*> argv;
    std::string exe = executable.string();
    argv.push_back(exe.data());
    std::vector<std::string> storage = args;
    for (auto& a : storage) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    if (posix_spawn(&pid, exe.c_str(), nullptr, nullptr, argv.data(), environ) != 0) {
        throw RuntimeAbort("cannot start " + exe);
    }
    return pid;
}

}  // namespace

fs::path run_directory(const ExperimentConfig& config) {
    return fs::path(config.experiment.output_dir) / config.experiment.name;
}

fs::path resolve_data_root(const ExperimentConfig& config) {
    if (!config.data.root.empty()) return config.data.root;
    if (const char* env = std::getenv("CILFORGE_DATA"); env != nullptr && *env != '\0') {
        return fs::path(env) / dataset_dir_name(config.data.dataset);
    }
    return fs::path(CILFORGE_DEFAULT_DATA_DIR) / dataset_dir_name(config.data.dataset);
}

DatasetSplits load_experiment_data(const ExperimentConfig& config) {
    DatasetSplits splits;
    const auto& name = config.data.dataset;
    if (name == "synthetic") {
        SyntheticSpec spec;
        spec.num_classes = config.data.synthetic_classes;
        spec.train_per_class = config.data.synthetic_train_per_class;
        spec.test_per_class = config.data.synthetic_test_per_class;
        spec.image_size = config.backbone.image_size;
        spec.channels = config.backbone.channels;
        spec.seed = static_cast<uint64_t>(config.data.synthetic_seed);
        splits = make_synthetic(spec);
    } else {
        const auto root = resolve_data_root(config);
        if (!fs::exists(root)) {
            throw ConfigError("data.root: dataset '" + name + "' not found at " + root.string() +
                              " (set data.root or CILFORGE_DATA)");
        }
        try {
            if (name == "mnist") {
                splits = load_mnist(root);
            } else if (name == "cifar100") {
                splits = load_cifar100(root);
            } else if (name == "svhn") {
                splits = load_image_folder(root, config.backbone.image_size, config.backbone.channels, name, false);
            } else {
                splits = load_image_folder(root, config.backbone.image_size, config.backbone.channels, name, true);
            }
        } catch (const InputError& e) {
            throw ConfigError(std::string("data: ") + e.what());
        }
    }
    splits.train = subsample_per_class(splits.train, config.data.train_per_class);
    splits.test = subsample_per_class(splits.test, config.data.test_per_class);
    compute_channel_stats(splits.train);
    splits.test.mean = splits.train.mean;
    splits.test.stddev = splits.train.stddev;
    if (splits.train.image_size() != config.backbone.image_size) {
        throw ConfigError("backbone.image_size (" + std::to_string(config.backbone.image_size) +
                          ") does not match dataset " + name + " (" + std::to_string(splits.train.image_size()) + ")");
    }
    if (splits.train.channels() != config.backbone.channels) {
        throw ConfigError("backbone.channels (" + std::to_string(config.backbone.channels) +
                          ") does not match dataset " + name + " (" + std::to_string(splits.train.channels()) + ")");
    }
    return splits;
}

int64_t repeat_seed(const ExperimentConfig& config, int64_t repeat) { return config.experiment.seed + repeat; }

int64_t completed_phases(const fs::path& run_dir) {
    int64_t t = 0;
    while (true) {
        const auto dir = phase_dir(run_dir, t);
        if (!fs::exists(dir / "model.ckpt") || !fs::exists(dir / "memory.json") || !fs::exists(dir / "metrics.json")) {
            return t;
        }
        ++t;
    }
}

ExperimentConfig load_run_config(const fs::path& run_dir) {
    const auto file = run_dir / "config.toml";
    if (!fs::exists(file)) throw ConfigError("run directory has no config.toml: " + run_dir.string());
    return load_config_file(file);
}

RunResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
    config.validate();
    const Logger say{options.log};
    const auto start_time = std::chrono::steady_clock::now();
    const auto run_dir = run_directory(config);
    const auto hash = config_hash(config);

    int64_t start = 0;
    if (options.resume) {
        if (fs::exists(run_dir / "config.toml") && config_hash(load_run_config(run_dir)) != hash) {
            throw ConfigError("resume: configuration differs from " + (run_dir / "config.toml").string());
        }
        start = completed_phases(run_dir);
    } else if (completed_phases(run_dir) > 0 || fs::exists(run_dir / "metrics.json")) {
        throw ConfigError("run directory " + run_dir.string() +
                          " already holds results; pass --resume or choose another experiment.name");
    }

    apply_runtime_settings(config);
    const auto data = load_experiment_data(config);
    const auto plan = plan_for(config, data);
    fs::create_directories(run_dir);
    write_text_atomic(run_dir / "config.toml", dump_config(config));

    TrainConfig train = config.train;
    train.seed = static_cast<uint64_t>(config.experiment.seed);
    const auto eval_bs = config.data.eval_batch_size;

    torch::manual_seed(static_cast<uint64_t>(config.experiment.seed));
    NestBackbone backbone(config.backbone);
    CosineHead head(config.backbone.final_dim());
    ExemplarMemory memory(config.memory);
    MetricsLog log;
    log.seed = static_cast<uint64_t>(config.experiment.seed);
    log.config_hash = hash;
    double lambda = train.weights.lambda;
    Teacher teacher;

    if (start >= plan.num_phases()) {
        say("[", config.experiment.name, "] all ", plan.num_phases(), " phases already complete");
        RunResult done{run_dir, load_metrics(run_dir / "metrics.json"), 0.0};
        return done;
    }
    if (start > 0) {
        const auto dir = phase_dir(run_dir, start - 1);
        auto ckpt = load_checkpoint(dir / "model.ckpt");
        backbone = ckpt.backbone;
        head = ckpt.head;
        memory = load_memory(dir / "memory.json", data.train);
        memory.refresh_means([&](const torch::Tensor& images) {
            return extract_pooled(backbone, images, data.train, eval_bs);
        });
        log = load_metrics(dir / "metrics.json");
        if (log.config_hash != hash) throw ConfigError("resume: metrics were produced by a different configuration");
        if (static_cast<int64_t>(log.phases.size()) != start) {
            throw StateError("resume: " + (dir / "metrics.json").string() + " holds " +
                             std::to_string(log.phases.size()) + " phases, expected " + std::to_string(start));
        }
        lambda = log.phases.back().lambda_used;
        teacher = snapshot_teacher(backbone, head);
        backbone->train();
        head->train();
        say("[", config.experiment.name, "] resuming at phase ", start);
    }

    const FeatureFn features = [&](const torch::Tensor& images) {
        return extract_pooled(backbone, images, data.train, eval_bs);
    };

    for (int64_t t = start; t < plan.num_phases(); ++t) {
        const auto phase_start = std::chrono::steady_clock::now();
        const auto pdata = assemble_phase(plan, t, memory, data.train, data.test);
        PhaseStats stats;
        if (t == 0) {
            head->add_classes(plan.base_count);
            stats = train_base_phase(backbone, head, pdata, data.train, train, options.step_hook);
        } else {
            imprint_head(backbone, head, pdata, plan, data.train, eval_bs);
            const auto b = train.lambda_rule == LambdaRule::Cumulative ? plan.seen_classes(t - 1) : plan.base_count;
            lambda = lambda_schedule(lambda, b, plan.increment);
            const auto old_rows = head->weight().detach().narrow(0, 0, pdata.old_class_count).clone();
            const auto teacher_sum =
                parameter_checksum(*teacher.backbone) ^ (parameter_checksum(*teacher.head) * 31);
            stats = train_incremental_phase(backbone, head, &teacher, pdata, data.train, train, lambda,
                                            options.step_hook);
            if ((parameter_checksum(*teacher.backbone) ^ (parameter_checksum(*teacher.head) * 31)) != teacher_sum) {
                throw StateError("teacher parameters changed during phase " + std::to_string(t));
            }
            if (!torch::equal(old_rows, head->weight().detach().narrow(0, 0, pdata.old_class_count))) {
                throw StateError("frozen head rows changed during phase " + std::to_string(t));
            }
        }

        const auto seen = plan.seen_classes(t);
        update_memory(memory, new_class_candidates(backbone, pdata, plan, data.train, eval_bs), features);
        check_budget(memory, seen, t);

        auto row = evaluate_phase(backbone, head, memory, pdata.test_seen, plan, t, data.train, eval_bs);
        row.lambda_used = lambda;
        row.wall_clock_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - phase_start).count();
        log.phases.push_back(row);

        const auto dir = phase_dir(run_dir, t);
        fs::create_directories(dir);
        write_confusion_csv(dir / "confusion.csv", row.confusion);
        if (config.plots.enabled && config.plots.cam_per_class > 0) {
            write_cam_overlays(backbone, head, pdata.test_seen, data.train, config.plots.cam_per_class, t, seen, dir);
        }
        write_text_atomic(dir / "memory.json", memory_document(memory, t, seen).dump(2) + "\n");
        nlohmann::json extra{{"phase", t}, {"config_hash", hash}, {"lambda", lambda},
                             {"class_order", plan.class_order}};
        save_checkpoint(dir / "model.ckpt", backbone, head, extra);
        save_metrics(dir / "metrics.json", log);
        save_metrics(run_dir / "metrics.json", log);

        say("[", config.experiment.name, "] phase ", t, "/", plan.num_phases() - 1, " classes=", seen,
            " acc=", row.acc_overall.value(), " ncm=", row.acc_ncm.value(), " lambda=", lambda,
            " memory=", memory.total_size(), " loss=", stats.last_loss, " time=", row.wall_clock_s, "s");

        teacher = snapshot_teacher(backbone, head);
    }

    if (config.plots.enabled) emit_plots(run_dir);
    const auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
    say("[", config.experiment.name, "] done: avg=", average_incremental_accuracy(log),
        " last=", last_accuracy(log), " F=", forgetting_rate(log).value, " in ", elapsed, "s");
    return {run_dir, log, elapsed};
}

RepeatsResult run_repeats(const ExperimentConfig& config, const RunOptions& options) {
    config.validate();
    RepeatsResult result;
    if (config.experiment.repeats == 1) {
        result.root = run_directory(config);
        result.runs.push_back(run_experiment(config, options));
        result.summary = summarize_repeats({result.runs.front().metrics});
        return result;
    }
    result.root = run_directory(config);
    fs::create_directories(result.root);
    write_text_atomic(result.root / "config.toml", dump_config(config));
    std::vector<ExperimentConfig> children;
    for (int64_t r = 0; r < config.experiment.repeats; ++r) {
        ExperimentConfig child = config;
        child.experiment.output_dir = result.root.string();
        child.experiment.name = "repeat" + std::to_string(r);
        child.experiment.seed = repeat_seed(config, r);
        child.experiment.repeats = 1;
        children.push_back(child);
    }
    if (options.parallel_repeats) {
        if (options.executable.empty()) throw ConfigError("--parallel-repeats needs the cilforge executable path");
        std::vector<pid_t> pids;
        for (size_t r = 0; r < children.size(); ++r) {
            const auto file = result.root / ("repeat" + std::to_string(r) + ".toml");
            write_text_atomic(file, dump_config(children[r]));
            std::vector<std::string> args{"run", "--config", file.string()};
            if (options.resume) args.push_back("--resume=" + run_directory(children[r]).string());
            pids.push_back(spawn_child(options.executable, args));
        }
        int worst = 0;
        for (auto pid : pids) {
            int status = 0;
            waitpid(pid, &status, 0);
            const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 3;
            if (code != 0 && worst != 2) worst = code;
        }
        if (worst == 2) throw ConfigError("a repeat failed with a configuration error");
        if (worst != 0) throw RuntimeAbort("a repeat failed with exit code " + std::to_string(worst));
        for (const auto& child : children) {
            result.runs.push_back({run_directory(child), load_metrics(run_directory(child) / "metrics.json"), 0.0});
        }
    } else {
        for (const auto& child : children) result.runs.push_back(run_experiment(child, options));
    }
    std::vector<MetricsLog> logs;
    for (const auto& run : result.runs) logs.push_back(run.metrics);
    result.summary = summarize_repeats(logs);
    write_text_atomic(result.root / "summary.json", result.summary.dump(2) + "\n");
    return result;
}

PhaseMetrics evaluate_checkpoint(const fs::path& run_dir, int64_t phase) {
    const auto config = load_run_config(run_dir);
    config.validate();
    if (phase < 0 || phase >= completed_phases(run_dir)) {
        throw StateError("phase " + std::to_string(phase) + " has no complete checkpoint in " + run_dir.string());
    }
    apply_runtime_settings(config);
    const auto data = load_experiment_data(config);
    const auto plan = plan_for(config, data);
    const auto dir = phase_dir(run_dir, phase);
    auto ckpt = load_checkpoint(dir / "model.ckpt");
    if (!(ckpt.manifest.at("backbone").get<BackboneConfig>() == config.backbone)) {
        throw StateError("checkpoint backbone differs from the run configuration");
    }
    auto memory = load_memory(dir / "memory.json", data.train);
    memory.refresh_means([&](const torch::Tensor& images) {
        return extract_pooled(ckpt.backbone, images, data.train, config.data.eval_batch_size);
    });
    // The stored memory already holds this phase's classes, so the test split
    // is selected directly rather than through assemble_phase.
    const auto test_seen = select_classes(data.test, plan, 0, plan.seen_classes(phase));
    auto row = evaluate_phase(ckpt.backbone, ckpt.head, memory, test_seen, plan, phase, data.train,
                              config.data.eval_batch_size);
    row.lambda_used = ckpt.manifest.value("lambda", 0.0);
    MetricsLog single;
    single.phases.push_back(row);
    auto doc = to_json(single).at("phases").at(0);
    doc.erase("forgetting_task0");
    write_text_atomic(dir / "eval.json", doc.dump(2) + "\n");
    return row;
}

}  // namespace cilforge
