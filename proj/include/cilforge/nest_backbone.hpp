#pragma once

// Nested hierarchical transformer feature extractor.
//
// The patch grid is split into local blocks; each level runs transformer
// encoders inside every block (parameters shared across blocks of a level),
// then an aggregation step (3x3 conv, channel LayerNorm, 3x3/2 max-pool on the
// un-blocked grid) merges 2x2 neighbouring blocks. The top level holds a
// single block whose feature map is pooled into the output feature vector.

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace cilforge {

struct BackboneConfig {
    int64_t patch_size = 1;
    int64_t num_hierarchies = 3;
    // Per-level lists hold one shared value or one value per hierarchy.
    std::vector<int64_t> embed_dims{192};
    std::vector<int64_t> heads{6};
    std::vector<int64_t> blocks_per_level{4};
    int64_t image_size = 32;
    int64_t channels = 3;

    // Throws ConfigError naming the offending field.
    void validate() const;

    int64_t dim_at(int64_t level) const;
    int64_t heads_at(int64_t level) const;
    int64_t depth_at(int64_t level) const;
    int64_t final_dim() const { return dim_at(num_hierarchies - 1); }

    // Side of the patch-token grid at level 0.
    int64_t patch_grid() const { return image_size / patch_size; }
    // Side of the token grid at `level` (halved by every aggregation).
    int64_t grid_at(int64_t level) const;
    // Blocks per side at `level`; the top level has one block.
    int64_t block_grid_at(int64_t level) const;
    int64_t block_count_at(int64_t level) const;
    // Tokens per block (identical at every level).
    int64_t tokens_per_block() const;
    int64_t final_grid() const { return grid_at(num_hierarchies - 1); }

    bool operator==(const BackboneConfig&) const = default;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

// (B, G, G, d) token grid -> (B, b*b, (G/b)^2, d) blocks, blocks in row-major
// order and tokens row-major inside each (G/b x G/b) tile.
torch::Tensor blockify(const torch::Tensor& grid, int64_t block_grid);

// Inverse of blockify.
torch::Tensor deblockify(const torch::Tensor& blocks, int64_t block_grid);

class MultiHeadSelfAttentionImpl : public torch::nn::Module {
public:
    MultiHeadSelfAttentionImpl(int64_t dim, int64_t heads);
    // x: (N, T, d)
    torch::Tensor forward(const torch::Tensor& x);

private:
    int64_t heads_;
    double scale_;
    torch::nn::Linear qkv_{nullptr};
    torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(MultiHeadSelfAttention);

// LN -> MSA -> residual -> LN -> FFN(4x, GELU) -> residual.
class EncoderBlockImpl : public torch::nn::Module {
public:
    EncoderBlockImpl(int64_t dim, int64_t heads);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::LayerNorm norm1_{nullptr};
    MultiHeadSelfAttention attn_{nullptr};
    torch::nn::LayerNorm norm2_{nullptr};
    torch::nn::Linear fc1_{nullptr};
    torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(EncoderBlock);

// Conv + channel LayerNorm + stride-2 max-pool on the un-blocked grid.
class AggregateImpl : public torch::nn::Module {
public:
    AggregateImpl(int64_t in_dim, int64_t out_dim);
    // grid: (B, d_in, G, G) -> (B, d_out, G/2, G/2)
    torch::Tensor forward(const torch::Tensor& grid);

private:
    torch::nn::Conv2d conv_{nullptr};
    torch::nn::LayerNorm norm_{nullptr};
    torch::nn::MaxPool2d pool_{nullptr};
};
TORCH_MODULE(Aggregate);

struct FeatureOutput {
    torch::Tensor pooled;      // (B, d_final)
    torch::Tensor final_maps;  // (B, d_final, g, g)
};

class NestBackboneImpl : public torch::nn::Module {
public:
    explicit NestBackboneImpl(BackboneConfig config);

    const BackboneConfig& config() const { return config_; }

    // images: (B, C, H, W) float with H == W == image_size.
    FeatureOutput extract_features(const torch::Tensor& images);

    // Level-0 blocks for a batch of images: (B, b0*b0, T, d0).
    torch::Tensor embed_patches(const torch::Tensor& images);

    // Runs the encoders of `level` (positional embedding included).
    torch::Tensor encode(int64_t level, const torch::Tensor& blocks);

    // Merges 2x2 neighbouring blocks of `level` into the block layout of
    // level + 1. Throws StateError at the top level.
    torch::Tensor aggregate(int64_t level, const torch::Tensor& blocks);

    // Number of extract_features calls since construction.
    int64_t forward_calls() const { return forward_calls_; }

private:
    void init_weights();

    BackboneConfig config_;
    torch::nn::Conv2d patch_embed_{nullptr};
    std::vector<torch::Tensor> pos_embed_;
    std::vector<torch::nn::Sequential> encoders_;
    std::vector<Aggregate> aggregates_;
    torch::nn::LayerNorm final_norm_{nullptr};
    int64_t forward_calls_ = 0;
};
TORCH_MODULE(NestBackbone);

// Desk-scale preset: dim 64, one encoder per level, 2 heads, three levels.
BackboneConfig desk_backbone(int64_t image_size, int64_t patch_size, int64_t channels);

}  // namespace cilforge
