#pragma once

// Phase training: base phase with warmup + cosine schedule and mixup, and
// incremental phases with the debiased dual-distillation objective.

#include <cstdint>
#include <functional>
#include <string>

#include <torch/torch.h>

#include "cilforge/cosine_head.hpp"
#include "cilforge/datasets.hpp"
#include "cilforge/nest_backbone.hpp"
#include "cilforge/objectives.hpp"
#include "cilforge/task_stream.hpp"

namespace cilforge {

struct TrainConfig {
    int64_t epochs_per_phase = 250;
    int64_t batch_size = 128;
    double base_lr = 2.5e-4;
    double head_lr = 2.5e-3;
    int64_t warmup_epochs = 10;  // base phase only
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double grad_clip = 1.0;
    double mixup_alpha = 0.8;
    bool mixup_base = true;
    bool mixup_incremental = false;
    bool augment = true;
    uint64_t seed = 0;
    LossWeights weights;  // weights.lambda is the base-phase value of lambda
    LambdaRule lambda_rule = LambdaRule::Cumulative;
    bool cam_detach_alpha = false;

    void validate() const;
};

// Schedule multiplier in [0, 1]. With warmup, a per-step linear ramp reaches
// exactly 1.0 on the last warmup step; afterwards (or without warmup) cosine
// annealing falls from 1.0 to exactly 0 on the last step of the last epoch.
double lr_multiplier(int64_t epoch, int64_t step, int64_t steps_per_epoch, int64_t epochs, int64_t warmup_epochs);

struct LearningRates {
    double backbone = 0.0;
    double head = 0.0;
};

LearningRates lr_at(int64_t epoch, int64_t step, int64_t steps_per_epoch, const TrainConfig& config,
                    bool with_warmup);

// Frozen previous-phase model.
struct Teacher {
    NestBackbone backbone{nullptr};
    CosineHead head{nullptr};
};

// Deep copies, detached from autograd, in evaluation mode.
NestBackbone clone_backbone(const NestBackbone& source);
CosineHead clone_head(const CosineHead& source);
Teacher snapshot_teacher(const NestBackbone& backbone, const CosineHead& head);

// FNV-1a over the raw bytes of every parameter and buffer, in name order.
uint64_t parameter_checksum(const torch::nn::Module& module);

struct StepRecord {
    int64_t phase = 0;
    int64_t epoch = 0;
    int64_t step = 0;
    double total = 0.0;
    double adjusted_ce = 0.0;
    double distill = 0.0;
    double cam = 0.0;
    int64_t batch_size = 0;
    int64_t old_in_batch = 0;
    LearningRates lr;
};

using StepHook = std::function<void(const StepRecord&)>;

struct PhaseStats {
    int64_t steps = 0;
    double last_loss = 0.0;
    double lambda = 0.0;
};

// Phase 0: tau forced to 0, no distillation, warmup then cosine annealing.
// The head must already hold the base classes. Throws ConfigError on empty data.
PhaseStats train_base_phase(NestBackbone& backbone, CosineHead& head, const PhaseData& data, const Dataset& stats,
                            const TrainConfig& config, const StepHook& hook = {});

// Incremental phase with the full objective at the given lambda. The head must
// already be expanded (imprinted) with the old rows frozen. Throws StateError
// without a teacher. Non-finite losses throw RuntimeAbort naming the term.
PhaseStats train_incremental_phase(NestBackbone& backbone, CosineHead& head, const Teacher* teacher,
                                   const PhaseData& data, const Dataset& stats, const TrainConfig& config,
                                   double lambda, const StepHook& hook = {});

// Features (B, d) of uint8 images with the given model, in evaluation mode.
torch::Tensor extract_pooled(NestBackbone& backbone, const torch::Tensor& images, const Dataset& stats,
                             int64_t batch_size = 256);

}  // namespace cilforge
