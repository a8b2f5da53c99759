#pragma once

// Grad-CAM over the final-hierarchy feature maps.

#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include "cilforge/cosine_head.hpp"
#include "cilforge/nest_backbone.hpp"

namespace cilforge {

inline constexpr double kCamEpsilon = 1e-8;

enum class CamSource { Teacher, Student };

struct CamMap {
    torch::Tensor values;        // (B, g, g) in [0, 1]
    torch::Tensor target_class;  // (B) int64
    CamSource source = CamSource::Student;
    // Per sample: the raw map was all zero (output is all zero).
    std::vector<bool> degenerate;
};

// Per sample (x - min) / (max - min + eps). raw: (B, g, g), nonnegative.
torch::Tensor normalize_cam(const torch::Tensor& raw);

// Maps final feature maps (B, K, g, g) to logits (B, classes).
using LogitFn = std::function<torch::Tensor(const torch::Tensor& final_maps)>;

struct CamOptions {
    // Keep the CAM differentiable w.r.t. everything upstream of final_maps,
    // including through the channel weights (second order).
    bool create_graph = false;
    // Treat the channel weights as constants (first-order approximation).
    bool detach_alpha = false;
};

// Un-normalized ReLU(sum_k alpha_k A_k) with alpha_k the spatial mean of
// d logit[target] / d A_k. `final_maps` must require grad.
torch::Tensor raw_grad_cam(const torch::Tensor& final_maps, const LogitFn& logits_fn,
                           const torch::Tensor& targets, const CamOptions& options);

// Normalized CAM from feature maps. Targets are validated against the number
// of logit columns.
CamMap grad_cam_from_maps(const torch::Tensor& final_maps, const LogitFn& logits_fn,
                          const torch::Tensor& targets, CamSource source, const CamOptions& options);

// Logits of the cosine head applied to the spatial mean of `final_maps`.
LogitFn pooled_head_logits(const CosineHead& head);

// Teacher-style CAM: runs the model without recording parameter gradients.
// Leaves parameters untouched.
CamMap grad_cam(NestBackbone& backbone, CosineHead& head, const torch::Tensor& images,
                const torch::Tensor& targets);

// Student CAM on feature maps that are part of the training graph.
CamMap student_grad_cam(const torch::Tensor& final_maps, CosineHead& head, const torch::Tensor& targets,
                        bool detach_alpha);

}  // namespace cilforge
