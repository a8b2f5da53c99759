#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include <torch/torch.h>

namespace cilforge {

inline constexpr double kNormEpsilon = 1e-8;

// logits[b, y] = eta * <features[b] / |features[b]|, weights[y] / |weights[y]|>.
// Zero rows normalize to zero (epsilon-stabilized), so their logits are 0.
torch::Tensor cosine_logits(const torch::Tensor& features, const torch::Tensor& weights,
                            const torch::Tensor& eta);

// Expandable cosine classifier. Rows are stored in chunks, one per growth
// step; a frozen chunk is excluded from the trainable parameter list and never
// receives gradients. eta is positive through a softplus parameterization.
class CosineHeadImpl : public torch::nn::Module {
public:
    explicit CosineHeadImpl(int64_t dim, double eta_init = 10.0);

    int64_t dim() const { return dim_; }
    int64_t num_classes() const;

    torch::Tensor forward(const torch::Tensor& features);

    torch::Tensor eta() const;
    // All rows, concatenated in class order.
    torch::Tensor weight() const;
    std::vector<bool> frozen_mask() const;

    // Appends `count` randomly initialised trainable rows (base phase).
    void add_classes(int64_t count);

    // Freezes every existing row and appends one unit-norm row per class,
    // normalize(mean(normalize(f))) over that class's features. The map keys
    // must be exactly the next class ids (num_classes(), num_classes()+1, ...).
    // Throws InitializationError naming a class whose feature set is empty.
    void imprint_new_classes(const std::map<int64_t, torch::Tensor>& per_class_features);

    // Freezes every existing row.
    void freeze_existing();

    // Parameters the optimizer should see: unfrozen chunks plus eta.
    std::vector<torch::Tensor> trainable_parameters() const;

    // Chunk layout for serialization: (rows, frozen) per chunk.
    std::vector<std::pair<int64_t, bool>> chunk_layout() const;
    // Recreates the chunk layout (zero-filled) so a state dict can be loaded.
    void reset_layout(const std::vector<std::pair<int64_t, bool>>& layout);

private:
    void append_chunk(torch::Tensor rows);

    int64_t dim_;
    torch::Tensor raw_eta_;
    std::vector<torch::Tensor> chunks_;
    std::vector<bool> chunk_frozen_;
};
TORCH_MODULE(CosineHead);

}  // namespace cilforge
