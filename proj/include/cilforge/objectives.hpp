#pragma once

// Training objectives: class priors, logit-adjusted cross-entropy, cosine
// feature distillation, CAM L1 distillation, their weighted total and the
// per-phase growth rule of the feature-distillation weight.

#include <cstdint>
#include <string>

#include <torch/torch.h>

namespace cilforge {

struct PriorPair {
    double pi_old = 0.0;
    double pi_new = 1.0;
    // Set when there are no exemplars: log(pi_old) is undefined.
    bool old_empty = true;
};

// pi_old = |E| / (|E| + |D|), pi_new = |D| / (|E| + |D|). Requires |D| > 0.
PriorPair class_priors(int64_t num_exemplars, int64_t num_new);

enum class DistillScope { ExemplarsOnly, AllSamples };

std::string to_string(DistillScope scope);
DistillScope distill_scope_from_string(const std::string& name);

struct LossWeights {
    double tau = 1.0;
    double lambda = 10.0;
    double gamma = 0.1;
    DistillScope distill_scope = DistillScope::ExemplarsOnly;

    void validate() const;
};

// Per-class additive offsets tau * log(pi_y): columns [0, old_class_count)
// use pi_old, the rest pi_new. Returned as a (K) double tensor.
torch::Tensor logit_offsets(int64_t num_classes, int64_t old_class_count, const PriorPair& priors,
                            double tau);

// Per-sample -log softmax(f + tau*log(pi))[y]. With tau == 0 this is plain
// cross-entropy. Throws InputError when tau > 0 and the old prior is empty.
torch::Tensor adjusted_ce_per_sample(const torch::Tensor& logits, const torch::Tensor& labels,
                                     const PriorPair& priors, int64_t old_class_count, double tau);

// Batch mean of adjusted_ce_per_sample.
torch::Tensor adjusted_ce(const torch::Tensor& logits, const torch::Tensor& labels,
                          const PriorPair& priors, int64_t old_class_count, double tau);

// Soft-target variant used with mixup: -sum_k q_k log softmax(f + offsets)_k.
torch::Tensor adjusted_ce_soft_per_sample(const torch::Tensor& logits, const torch::Tensor& targets,
                                          const PriorPair& priors, int64_t old_class_count, double tau);

// Per-sample 1 - <t/|t|, s/|s|>. Teacher features are detached.
torch::Tensor feature_distill_per_sample(const torch::Tensor& teacher_feats,
                                         const torch::Tensor& student_feats);
torch::Tensor feature_distill(const torch::Tensor& teacher_feats, const torch::Tensor& student_feats);

// Per-sample mean |student - teacher| over the g x g cells. Teacher detached.
torch::Tensor cam_distill_per_sample(const torch::Tensor& teacher_cam, const torch::Tensor& student_cam);
torch::Tensor cam_distill(const torch::Tensor& teacher_cam, const torch::Tensor& student_cam);

// Per-sample loss pieces of one batch. `distill` and `cam` may be undefined
// when the term is inactive; otherwise they are indexed like the batch.
struct BatchParts {
    torch::Tensor adjusted_ce;  // (B)
    torch::Tensor distill;      // (B) or undefined
    torch::Tensor cam;          // (B) or undefined; only old-class rows are read
};

struct LossTerms {
    torch::Tensor total;
    torch::Tensor adjusted_ce;
    torch::Tensor distill;
    torch::Tensor cam;
};

// mean(ce) + lambda * mean(distill over scope) + gamma * mean(cam over old).
// An empty scope contributes exactly 0. `old_mask` is a (B) bool tensor.
LossTerms total_loss(const BatchParts& parts, const LossWeights& weights, const torch::Tensor& old_mask);

enum class LambdaRule {
    // B = classes seen before the current phase.
    Cumulative,
    // B = number of base classes in every phase.
    BaseOnly,
};

std::string to_string(LambdaRule rule);
LambdaRule lambda_rule_from_string(const std::string& name);

// lambda_prev * sqrt((old_classes + new_classes) / new_classes).
double lambda_schedule(double lambda_prev, int64_t old_classes, int64_t new_classes);

}  // namespace cilforge
