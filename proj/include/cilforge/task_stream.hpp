#pragma once

// Class-order planning, per-phase data assembly, augmentation and mixup.

#include <cstdint>
#include <random>
#include <vector>

#include <torch/torch.h>

#include "cilforge/datasets.hpp"
#include "cilforge/exemplar_memory.hpp"

namespace cilforge {

struct PhasePlan {
    std::vector<int64_t> class_order;  // class_order[k] = dataset class of global id k
    int64_t base_count = 0;
    int64_t increment = 0;
    int64_t num_increments = 0;
    uint64_t seed = 0;

    int64_t num_phases() const { return num_increments + 1; }
    int64_t total_classes() const { return static_cast<int64_t>(class_order.size()); }
    // Classes seen after training phase t: B + t*C.
    int64_t seen_classes(int64_t t) const;
    // Global ids introduced by phase t: [first, last).
    std::pair<int64_t, int64_t> phase_classes(int64_t t) const;
    // Phase that introduced global id `cls`.
    int64_t task_of(int64_t cls) const;
    // dataset class -> global id
    std::vector<int64_t> inverse_order() const;

    bool operator==(const PhasePlan&) const = default;
};

// Base classes given as a count, or as a fraction of all classes when
// base_count <= 0 (e.g. 0.5 -> half).
struct BaseSpec {
    int64_t count = 0;
    double fraction = 0.5;
};

// Seeded class shuffle; throws ConfigError unless total - B is a multiple of C.
PhasePlan make_plan(int64_t num_classes, BaseSpec base, int64_t increment, uint64_t seed);

struct LabeledSet {
    torch::Tensor images;   // (N, C, H, W) uint8
    torch::Tensor labels;   // (N) global ids
    torch::Tensor indices;  // (N) dataset indices

    int64_t size() const { return images.defined() ? images.size(0) : 0; }
};

struct PhaseData {
    int64_t phase = 0;
    int64_t old_class_count = 0;  // global ids [0, old_class_count) are old
    LabeledSet new_train;
    LabeledSet replay;
    LabeledSet test_seen;
};

// Samples of `data` whose class is among global ids [first, last), relabeled
// to global ids.
LabeledSet select_classes(const Dataset& data, const PhasePlan& plan, int64_t first, int64_t last);

// Throws InputError when t is outside [0, N].
PhaseData assemble_phase(const PhasePlan& plan, int64_t t, const ExemplarMemory& memory, const Dataset& train,
                         const Dataset& test);

// uint8 images -> normalized float model input.
torch::Tensor to_model_input(const torch::Tensor& images, const Dataset& stats);

struct AugmentOptions {
    int64_t crop_padding = 4;
    bool flip = true;
};

// Random crop with zero padding and optional horizontal flip on uint8
// images, followed by normalization.
torch::Tensor augment_batch(const torch::Tensor& images, const Dataset& stats, const AugmentOptions& options,
                            at::Generator& gen);

struct MixupResult {
    torch::Tensor images;
    torch::Tensor targets;  // (B, K) soft labels
    double coefficient = 1.0;
    torch::Tensor permutation;
};

// mixed = beta * x + (1 - beta) * x[perm], same for targets.
MixupResult mixup_with(const torch::Tensor& images, const torch::Tensor& targets, double beta,
                       const torch::Tensor& permutation);

// beta ~ Beta(alpha, alpha), shared random in-batch permutation. Batches of
// size 1 pass through unchanged. Throws InputError for alpha <= 0.
MixupResult mixup_batch(const torch::Tensor& images, const torch::Tensor& targets, double alpha,
                        at::Generator& gen, std::mt19937_64& rng);

}  // namespace cilforge
