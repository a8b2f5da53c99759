#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <string>

#include <unistd.h>

#include <torch/torch.h>

#include "cilforge/nest_backbone.hpp"

namespace cilforge::testing {

// Small backbone for fast tests: 8x8 input, patch 1, two levels of dim 8.
inline BackboneConfig tiny_backbone(int64_t channels = 1, int64_t image_size = 8, int64_t patch = 1,
                                    int64_t levels = 2, int64_t dim = 8) {
    BackboneConfig c;
    c.patch_size = patch;
    c.num_hierarchies = levels;
    c.embed_dims = {dim};
    c.heads = {2};
    c.blocks_per_level = {1};
    c.image_size = image_size;
    c.channels = channels;
    return c;
}

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    static std::atomic<int> counter{0};
    auto dir = std::filesystem::temp_directory_path() /
               ("cilforge-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + "-" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// Relative error |g - g_fd| / max(|g|, |g_fd|, tiny) between the autograd
// gradient of a scalar function and its central finite differences.
inline double gradient_relative_error(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                      const torch::Tensor& at, double h = 1e-6) {
    auto x = at.detach().clone().to(torch::kDouble).requires_grad_(true);
    auto y = f(x);
    auto g = torch::autograd::grad({y}, {x})[0].detach().flatten();
    auto base = at.detach().clone().to(torch::kDouble).flatten();
    auto fd = torch::zeros_like(base);
    for (int64_t i = 0; i < base.numel(); ++i) {
        auto plus = base.clone();
        auto minus = base.clone();
        plus[i] += h;
        minus[i] -= h;
        const double fp = f(plus.view(at.sizes())).item<double>();
        const double fm = f(minus.view(at.sizes())).item<double>();
        fd[i] = (fp - fm) / (2.0 * h);
    }
    const double diff = (g - fd).norm().item<double>();
    const double scale = std::max({g.norm().item<double>(), fd.norm().item<double>(), 1e-12});
    return diff / scale;
}

}  // namespace cilforge::testing
