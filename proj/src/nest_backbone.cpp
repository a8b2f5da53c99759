#include "cilforge/nest_backbone.hpp"

#include <cmath>
#include <string>

#include "cilforge/errors.hpp"

namespace cilforge {

namespace {

int64_t pick(const std::vector<int64_t>& values, int64_t level) {
    return values.size() == 1 ? values.front() : values.at(static_cast<size_t>(level));
}

void check_level_list(const std::vector<int64_t>& values, int64_t levels, const char* name) {
    if (values.size() != 1 && static_cast<int64_t>(values.size()) != levels) {
        throw ConfigError(std::string("backbone.") + name + ": expected 1 or " +
                          std::to_string(levels) + " entries, got " + std::to_string(values.size()));
    }
    for (auto v : values) {
        if (v < 1) {
            throw ConfigError(std::string("backbone.") + name + ": entries must be >= 1");
        }
    }
}

}  // namespace

void BackboneConfig::validate() const {
    if (patch_size < 1) throw ConfigError("backbone.patch_size must be >= 1");
    if (num_hierarchies < 1) throw ConfigError("backbone.num_hierarchies must be >= 1");
    if (image_size < 1) throw ConfigError("backbone.image_size must be >= 1");
    if (channels < 1) throw ConfigError("backbone.channels must be >= 1");
    check_level_list(embed_dims, num_hierarchies, "embed_dims");
    check_level_list(heads, num_hierarchies, "heads");
    check_level_list(blocks_per_level, num_hierarchies, "blocks_per_level");
    if (image_size % patch_size != 0) {
        throw ConfigError("backbone: image_size " + std::to_string(image_size) +
                          " is not divisible by patch_size " + std::to_string(patch_size));
    }
    const int64_t top = int64_t{1} << (num_hierarchies - 1);
    if (patch_grid() % top != 0) {
        throw ConfigError("backbone: patch grid " + std::to_string(patch_grid()) +
                          " is not divisible by 2^(num_hierarchies-1) = " + std::to_string(top));
    }
    for (int64_t l = 0; l < num_hierarchies; ++l) {
        if (dim_at(l) % heads_at(l) != 0) {
            throw ConfigError("backbone: embed dim " + std::to_string(dim_at(l)) + " at level " +
                              std::to_string(l) + " is not divisible by heads " +
                              std::to_string(heads_at(l)));
        }
    }
}

int64_t BackboneConfig::dim_at(int64_t level) const { return pick(embed_dims, level); }
int64_t BackboneConfig::heads_at(int64_t level) const { return pick(heads, level); }
int64_t BackboneConfig::depth_at(int64_t level) const { return pick(blocks_per_level, level); }

int64_t BackboneConfig::grid_at(int64_t level) const { return patch_grid() >> level; }

int64_t BackboneConfig::block_grid_at(int64_t level) const {
    return int64_t{1} << (num_hierarchies - 1 - level);
}

int64_t BackboneConfig::block_count_at(int64_t level) const {
    const auto b = block_grid_at(level);
    return b * b;
}

int64_t BackboneConfig::tokens_per_block() const {
    const auto side = final_grid();
    return side * side;
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = nlohmann::json{{"patch_size", c.patch_size},
                       {"num_hierarchies", c.num_hierarchies},
                       {"embed_dims", c.embed_dims},
                       {"heads", c.heads},
                       {"blocks_per_level", c.blocks_per_level},
                       {"image_size", c.image_size},
                       {"channels", c.channels}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
    j.at("patch_size").get_to(c.patch_size);
    j.at("num_hierarchies").get_to(c.num_hierarchies);
    j.at("embed_dims").get_to(c.embed_dims);
    j.at("heads").get_to(c.heads);
    j.at("blocks_per_level").get_to(c.blocks_per_level);
    j.at("image_size").get_to(c.image_size);
    j.at("channels").get_to(c.channels);
}

torch::Tensor blockify(const torch::Tensor& grid, int64_t block_grid) {
    if (grid.dim() != 4 || grid.size(1) != grid.size(2)) {
        throw InputError("blockify: expected a (B, G, G, d) grid");
    }
    const auto batch = grid.size(0);
    const auto side = grid.size(1);
    const auto dim = grid.size(3);
    if (block_grid < 1 || side % block_grid != 0) {
        throw ConfigError("blockify: grid side " + std::to_string(side) +
                          " is not divisible by block grid " + std::to_string(block_grid));
    }
    const auto tile = side / block_grid;
    return grid.reshape({batch, block_grid, tile, block_grid, tile, dim})
        .permute({0, 1, 3, 2, 4, 5})
        .reshape({batch, block_grid * block_grid, tile * tile, dim});
}

torch::Tensor deblockify(const torch::Tensor& blocks, int64_t block_grid) {
    if (blocks.dim() != 4 || blocks.size(1) != block_grid * block_grid) {
        throw InputError("deblockify: expected (B, " + std::to_string(block_grid * block_grid) +
                         ", T, d) blocks");
    }
    const auto batch = blocks.size(0);
    const auto tokens = blocks.size(2);
    const auto dim = blocks.size(3);
    const auto tile = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(tokens))));
    if (tile * tile != tokens) {
        throw InputError("deblockify: token count " + std::to_string(tokens) +
                         " is not a perfect square");
    }
    const auto side = tile * block_grid;
    return blocks.reshape({batch, block_grid, block_grid, tile, tile, dim})
        .permute({0, 1, 3, 2, 4, 5})
        .reshape({batch, side, side, dim});
}

MultiHeadSelfAttentionImpl::MultiHeadSelfAttentionImpl(int64_t dim, int64_t heads)
    : heads_(heads), scale_(1.0 / std::sqrt(static_cast<double>(dim / heads))) {
    qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
    proj_ = register_module("proj", torch::nn::Linear(dim, dim));
}

torch::Tensor MultiHeadSelfAttentionImpl::forward(const torch::Tensor& x) {
    const auto n = x.size(0);
    const auto t = x.size(1);
    const auto d = x.size(2);
    auto qkv = qkv_->forward(x).reshape({n, t, 3, heads_, d / heads_}).permute({2, 0, 3, 1, 4});
    auto q = qkv[0];
    auto k = qkv[1];
    auto v = qkv[2];
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * scale_, -1);
    auto out = torch::matmul(attn, v).transpose(1, 2).reshape({n, t, d});
    return proj_->forward(out);
}

EncoderBlockImpl::EncoderBlockImpl(int64_t dim, int64_t heads) {
    norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn_ = register_module("attn", MultiHeadSelfAttention(dim, heads));
    norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    fc1_ = register_module("fc1", torch::nn::Linear(dim, 4 * dim));
    fc2_ = register_module("fc2", torch::nn::Linear(4 * dim, dim));
}

torch::Tensor EncoderBlockImpl::forward(const torch::Tensor& x) {
    auto h = x + attn_->forward(norm1_->forward(x));
    return h + fc2_->forward(torch::gelu(fc1_->forward(norm2_->forward(h))));
}

AggregateImpl::AggregateImpl(int64_t in_dim, int64_t out_dim) {
    conv_ = register_module(
        "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_dim, out_dim, 3).stride(1).padding(1)));
    norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({out_dim})));
    pool_ = register_module(
        "pool", torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(3).stride(2).padding(1)));
}

torch::Tensor AggregateImpl::forward(const torch::Tensor& grid) {
    auto x = conv_->forward(grid);
    x = norm_->forward(x.permute({0, 2, 3, 1})).permute({0, 3, 1, 2});
    return pool_->forward(x);
}

NestBackboneImpl::NestBackboneImpl(BackboneConfig config) : config_(std::move(config)) {
    config_.validate();
    const auto levels = config_.num_hierarchies;
    patch_embed_ = register_module(
        "patch_embed",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(config_.channels, config_.dim_at(0), config_.patch_size)
                              .stride(config_.patch_size)));
    for (int64_t l = 0; l < levels; ++l) {
        const auto dim = config_.dim_at(l);
        pos_embed_.push_back(register_parameter(
            "pos_embed_" + std::to_string(l),
            torch::zeros({1, config_.block_count_at(l), config_.tokens_per_block(), dim})));
        torch::nn::Sequential encoder;
        for (int64_t b = 0; b < config_.depth_at(l); ++b) {
            encoder->push_back(EncoderBlock(dim, config_.heads_at(l)));
        }
        encoders_.push_back(register_module("encoder_" + std::to_string(l), encoder));
        if (l + 1 < levels) {
            aggregates_.push_back(register_module("aggregate_" + std::to_string(l),
                                                  Aggregate(dim, config_.dim_at(l + 1))));
        }
    }
    final_norm_ = register_module(
        "final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config_.final_dim()})));
    init_weights();
}

void NestBackboneImpl::init_weights() {
    torch::NoGradGuard no_grad;
    for (auto& p : pos_embed_) {
        torch::nn::init::normal_(p, 0.0, 0.02);
    }
    for (auto& module : modules(/*include_self=*/false)) {
        if (auto* linear = module->as<torch::nn::Linear>()) {
            torch::nn::init::normal_(linear->weight, 0.0, 0.02);
            torch::nn::init::zeros_(linear->bias);
        }
    }
}

torch::Tensor NestBackboneImpl::embed_patches(const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != config_.channels ||
        images.size(2) != config_.image_size || images.size(3) != config_.image_size) {
        throw InputError("extract_features: expected images of shape (B, " +
                         std::to_string(config_.channels) + ", " + std::to_string(config_.image_size) +
                         ", " + std::to_string(config_.image_size) + "), got " +
                         c10::str(images.sizes()));
    }
    auto grid = patch_embed_->forward(images).permute({0, 2, 3, 1});
    return blockify(grid, config_.block_grid_at(0));
}

torch::Tensor NestBackboneImpl::encode(int64_t level, const torch::Tensor& blocks) {
    const auto batch = blocks.size(0);
    const auto count = blocks.size(1);
    const auto tokens = blocks.size(2);
    const auto dim = blocks.size(3);
    auto x = (blocks + pos_embed_.at(static_cast<size_t>(level))).reshape({batch * count, tokens, dim});
    x = encoders_.at(static_cast<size_t>(level))->forward(x);
    return x.reshape({batch, count, tokens, dim});
}

torch::Tensor NestBackboneImpl::aggregate(int64_t level, const torch::Tensor& blocks) {
    if (level < 0 || level >= config_.num_hierarchies - 1) {
        throw StateError("aggregate: level " + std::to_string(level) +
                         " has no successor (top level holds a single block)");
    }
    auto grid = deblockify(blocks, config_.block_grid_at(level)).permute({0, 3, 1, 2});
    auto merged = aggregates_.at(static_cast<size_t>(level))->forward(grid);
    return blockify(merged.permute({0, 2, 3, 1}), config_.block_grid_at(level + 1));
}

FeatureOutput NestBackboneImpl::extract_features(const torch::Tensor& images) {
    ++forward_calls_;
    auto x = embed_patches(images);
    const auto levels = config_.num_hierarchies;
    for (int64_t l = 0; l < levels; ++l) {
        x = encode(l, x);
        if (l + 1 < levels) {
            x = aggregate(l, x);
        }
    }
    auto grid = final_norm_->forward(deblockify(x, 1));
    auto final_maps = grid.permute({0, 3, 1, 2}).contiguous();
    return {final_maps.mean({2, 3}), final_maps};
}

BackboneConfig desk_backbone(int64_t image_size, int64_t patch_size, int64_t channels) {
    BackboneConfig c;
    c.patch_size = patch_size;
    c.num_hierarchies = 3;
    c.embed_dims = {64};
    c.heads = {2};
    c.blocks_per_level = {1};
    c.image_size = image_size;
    c.channels = channels;
    return c;
}

}  // namespace cilforge
