#include "cilforge/attention_maps.hpp"

#include <string>

#include "cilforge/errors.hpp"

namespace cilforge {

torch::Tensor normalize_cam(const torch::Tensor& raw) {
    if (raw.dim() != 3) throw InputError("normalize_cam: expected (B, g, g)");
    auto flat = raw.flatten(1);
    auto lo = std::get<0>(flat.min(1, true));
    auto hi = std::get<0>(flat.max(1, true));
    return ((flat - lo) / (hi - lo + kCamEpsilon)).view_as(raw);
}

torch::Tensor raw_grad_cam(const torch::Tensor& final_maps, const LogitFn& logits_fn,
                           const torch::Tensor& targets, const CamOptions& options) {
    if (final_maps.dim() != 4) throw InputError("grad_cam: final maps must be (B, K, g, g)");
    if (!final_maps.requires_grad()) throw StateError("grad_cam: final maps do not require grad");
    auto logits = logits_fn(final_maps);
    if (targets.dim() != 1 || targets.size(0) != final_maps.size(0)) {
        throw InputError("grad_cam: expected one target class per sample");
    }
    if (targets.numel() > 0 &&
        (targets.min().item<int64_t>() < 0 || targets.max().item<int64_t>() >= logits.size(1))) {
        throw InputError("grad_cam: target class outside [0, " + std::to_string(logits.size(1)) + ")");
    }
    auto selected = logits.gather(1, targets.to(torch::kLong).unsqueeze(1)).sum();
    const bool graph = options.create_graph && !options.detach_alpha;
    torch::Tensor grads;
    if (selected.requires_grad()) {
        grads = torch::autograd::grad({selected}, {final_maps}, {}, /*retain_graph=*/true,
                                      /*create_graph=*/graph, /*allow_unused=*/true)[0];
    }
    if (!grads.defined()) {
        grads = torch::zeros_like(final_maps);
    }
    auto alpha = grads.mean({2, 3}, /*keepdim=*/true);
    if (!graph) alpha = alpha.detach();
    auto maps = options.create_graph ? final_maps : final_maps.detach();
    return torch::relu((alpha * maps).sum(1));
}

CamMap grad_cam_from_maps(const torch::Tensor& final_maps, const LogitFn& logits_fn,
                          const torch::Tensor& targets, CamSource source, const CamOptions& options) {
    auto raw = raw_grad_cam(final_maps, logits_fn, targets, options);
    CamMap cam;
    cam.values = normalize_cam(raw);
    cam.target_class = targets.to(torch::kLong);
    cam.source = source;
    auto zero = (raw.detach().flatten(1).amax(1) <= 0.0).to(torch::kCPU);
    auto acc = zero.accessor<bool, 1>();
    for (int64_t i = 0; i < zero.size(0); ++i) cam.degenerate.push_back(acc[i]);
    return cam;
}

LogitFn pooled_head_logits(const CosineHead& head) {
    return [head](const torch::Tensor& maps) { return cosine_logits(maps.mean({2, 3}), head->weight(), head->eta()); };
}

CamMap grad_cam(NestBackbone& backbone, CosineHead& head, const torch::Tensor& images,
                const torch::Tensor& targets) {
    torch::Tensor maps;
    {
        torch::NoGradGuard no_grad;
        maps = backbone->extract_features(images).final_maps;
    }
    torch::AutoGradMode enable_grad(true);
    auto leaf = maps.detach().requires_grad_(true);
    // Head parameters must not accumulate gradients here.
    LogitFn fn = [&head](const torch::Tensor& m) {
        auto w = head->weight().detach();
        auto eta = head->eta().detach();
        return cosine_logits(m.mean({2, 3}), w, eta);
    };
    auto cam = grad_cam_from_maps(leaf, fn, targets, CamSource::Teacher, CamOptions{});
    cam.values = cam.values.detach();
    return cam;
}

CamMap student_grad_cam(const torch::Tensor& final_maps, CosineHead& head, const torch::Tensor& targets,
                        bool detach_alpha) {
    CamOptions opts;
    opts.create_graph = true;
    opts.detach_alpha = detach_alpha;
    return grad_cam_from_maps(final_maps, pooled_head_logits(head), targets, CamSource::Student, opts);
}

}  // namespace cilforge
