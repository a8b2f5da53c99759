#pragma once

// Per-phase evaluation (softmax head and NCM), the accuracy history and the
// derived average / last accuracy and forgetting rate.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cilforge/cosine_head.hpp"
#include "cilforge/datasets.hpp"
#include "cilforge/exemplar_memory.hpp"
#include "cilforge/nest_backbone.hpp"
#include "cilforge/task_stream.hpp"

namespace cilforge {

// Accuracies are kept as exact counts; value() is the float view.
struct Fraction {
    int64_t correct = 0;
    int64_t total = 0;

    double value() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
    bool operator==(const Fraction&) const = default;
};

using Matrix = std::vector<std::vector<int64_t>>;

struct PhaseMetrics {
    int64_t phase = 0;
    int64_t seen_classes = 0;
    Fraction acc_overall;
    Fraction acc_ncm;
    std::vector<Fraction> acc_per_task;      // tasks 0..phase, softmax head
    std::vector<Fraction> acc_ncm_per_task;  // tasks 0..phase, NCM
    double lambda_used = 0.0;
    double wall_clock_s = 0.0;
    Matrix confusion;  // rows = true class; not persisted in metrics.json
    // Floats as read from a metrics file that carried no exact counts.
    std::optional<double> overall_float;
    std::optional<double> task0_float;
};

struct MetricsLog {
    std::vector<PhaseMetrics> phases;
    uint64_t seed = 0;
    std::string config_hash;

    // acc[t][j], softmax head.
    std::vector<std::vector<double>> accuracy_matrix() const;
    std::vector<std::vector<double>> ncm_accuracy_matrix() const;
};

nlohmann::json to_json(const MetricsLog& log);
MetricsLog metrics_from_json(const nlohmann::json& j);
MetricsLog load_metrics(const std::filesystem::path& file);
void save_metrics(const std::filesystem::path& file, const MetricsLog& log);

// One forward pass per test batch; the pooled features feed both the cosine
// head (argmax) and NCM.
PhaseMetrics evaluate_phase(NestBackbone& backbone, CosineHead& head, const ExemplarMemory& memory,
                            const LabeledSet& test_seen, const PhasePlan& plan, int64_t t, const Dataset& stats,
                            int64_t batch_size = 256);

// Mean over phases (base phase included) of the overall accuracy, computed
// in exact rational arithmetic (counts, or the decimal value read from a
// float-only file). Throws StateError on an empty log.
double average_incremental_accuracy(const MetricsLog& log, bool ncm = false);
double last_accuracy(const MetricsLog& log, bool ncm = false);

struct Forgetting {
    double value = 0.0;  // percentage points
    bool defined = false;
};

// acc[0][0] - acc[N][0] in percentage points; N = 0 gives 0 with defined = false.
Forgetting forgetting_rate(const MetricsLog& log, bool ncm = false);
// Same from the two accuracies on the phase-0 test split. The double overload
// treats each value as the decimal it prints as (0.8 -> 8/10), so
// forgetting_rate(0.80, 0.65) is exactly 15.0.
Forgetting forgetting_rate(const Fraction& task0_at_0, const Fraction& task0_at_n);
double forgetting_rate(double task0_at_0, double task0_at_n);

// rows = true class. Throws InputError on out-of-range entries.
Matrix confusion_matrix(const std::vector<int64_t>& preds, const std::vector<int64_t>& labels, int64_t num_classes);
void write_confusion_csv(const std::filesystem::path& file, const Matrix& m);
Matrix read_confusion_csv(const std::filesystem::path& file);

// Per-phase mean and std of overall accuracy across repeated runs.
nlohmann::json summarize_repeats(const std::vector<MetricsLog>& runs);

}  // namespace cilforge
