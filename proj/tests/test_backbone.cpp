#include <gtest/gtest.h>

#include "cilforge/errors.hpp"
#include "cilforge/nest_backbone.hpp"
#include "test_util.hpp"

using namespace cilforge;
using cilforge::testing::tiny_backbone;

namespace {

BackboneConfig cifar_config() {
    BackboneConfig c;
    c.patch_size = 1;
    c.num_hierarchies = 3;
    c.embed_dims = {192};
    c.heads = {6};
    c.blocks_per_level = {4};
    c.image_size = 32;
    c.channels = 3;
    return c;
}

}  // namespace

TEST(BackboneConfig, ShapeChainCifar) {
    const auto c = cifar_config();
    c.validate();
    EXPECT_EQ(c.patch_grid(), 32);
    EXPECT_EQ(c.block_count_at(0), 16);
    EXPECT_EQ(c.block_count_at(1), 4);
    EXPECT_EQ(c.block_count_at(2), 1);
    EXPECT_EQ(c.final_grid(), 8);
    EXPECT_EQ(c.tokens_per_block(), 64);
}

TEST(BackboneConfig, ShapeChainPatchTwo) {
    auto c = cifar_config();
    c.patch_size = 2;
    EXPECT_EQ(c.final_grid(), 4);
}

TEST(BackboneConfig, PropertyBlockCountsArePowersOfFour) {
    for (int64_t levels = 1; levels <= 4; ++levels) {
        for (int64_t patch : {1, 2, 4}) {
            BackboneConfig c = tiny_backbone(1, 64, patch, levels, 8);
            if ((64 / patch) % (int64_t{1} << (levels - 1)) != 0) continue;
            c.validate();
            for (int64_t l = 0; l < levels; ++l) {
                int64_t expected = 1;
                for (int64_t k = 0; k < levels - 1 - l; ++k) expected *= 4;
                EXPECT_EQ(c.block_count_at(l), expected);
            }
            EXPECT_EQ(c.block_count_at(levels - 1), 1);
            EXPECT_EQ(c.final_grid(), 64 / patch / (int64_t{1} << (levels - 1)));
        }
    }
}

TEST(BackboneConfig, ValidationErrorsNameFields) {
    auto c = cifar_config();
    c.image_size = 30;
    c.patch_size = 4;
    try {
        c.validate();
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("image_size"), std::string::npos);
    }
    c = cifar_config();
    c.num_hierarchies = 7;  // 32 / 2^6 not integral
    EXPECT_THROW(c.validate(), ConfigError);
    c = cifar_config();
    c.embed_dims = {96, 192};  // neither 1 nor T_d entries
    EXPECT_THROW(c.validate(), ConfigError);
    c = cifar_config();
    c.heads = {5};  // 192 not divisible by 5
    EXPECT_THROW(c.validate(), ConfigError);
    c = cifar_config();
    c.blocks_per_level = {0};
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(BackboneConfig, PerLevelLists) {
    BackboneConfig c;
    c.patch_size = 4;
    c.num_hierarchies = 3;
    c.embed_dims = {96, 192, 384};
    c.heads = {2, 2, 8};
    c.blocks_per_level = {3, 6, 12};
    c.image_size = 224;
    c.channels = 3;
    c.validate();
    EXPECT_EQ(c.dim_at(0), 96);
    EXPECT_EQ(c.dim_at(2), 384);
    EXPECT_EQ(c.heads_at(2), 8);
    EXPECT_EQ(c.depth_at(1), 6);
    EXPECT_EQ(c.final_dim(), 384);
}

TEST(BackboneConfig, JsonRoundTrip) {
    const auto c = cifar_config();
    nlohmann::json j = c;
    EXPECT_EQ(j.get<BackboneConfig>(), c);
}

TEST(Blockify, Shapes) {
    auto grid = torch::randn({2, 32, 32, 5});
    auto blocks = blockify(grid, 4);
    EXPECT_EQ(blocks.sizes(), (std::vector<int64_t>{2, 16, 64, 5}));
    auto single = blockify(torch::randn({1, 2, 2, 3}), 1);
    EXPECT_EQ(single.sizes(), (std::vector<int64_t>{1, 1, 4, 3}));
}

TEST(Blockify, TilesAreSpatiallyContiguous) {
    // Token value encodes its (row, col); block 1 must hold the top-right tile.
    const int64_t g = 4;
    auto grid = torch::zeros({1, g, g, 2});
    for (int64_t r = 0; r < g; ++r) {
        for (int64_t c = 0; c < g; ++c) {
            grid[0][r][c][0] = r;
            grid[0][r][c][1] = c;
        }
    }
    auto blocks = blockify(grid, 2);
    for (int64_t t = 0; t < 4; ++t) {
        const auto r = blocks[0][1][t][0].item<float>();
        const auto c = blocks[0][1][t][1].item<float>();
        EXPECT_LT(r, 2);
        EXPECT_GE(c, 2);
    }
}

TEST(Blockify, PropertyInverseIsIdentity) {
    torch::manual_seed(1);
    for (int64_t b : {1, 2, 4, 8}) {
        auto grid = torch::randn({3, 16, 16, 4});
        EXPECT_TRUE(torch::equal(deblockify(blockify(grid, b), b), grid));
        // The multiset of tokens is preserved: sorted values agree.
        EXPECT_TRUE(torch::equal(std::get<0>(blockify(grid, b).flatten().sort()), std::get<0>(grid.flatten().sort())));
    }
}

TEST(Blockify, NonDivisibleIsConfigError) {
    try {
        blockify(torch::randn({1, 6, 6, 2}), 4);
        FAIL();
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find('6'), std::string::npos);
        EXPECT_NE(msg.find('4'), std::string::npos);
    }
}

TEST(NestBackbone, ForwardShapesCifar) {
    torch::manual_seed(0);
    auto c = cifar_config();
    c.embed_dims = {12};
    c.heads = {2};
    c.blocks_per_level = {1};
    NestBackbone net(c);
    net->eval();
    torch::NoGradGuard ng;
    auto out = net->extract_features(torch::randn({2, 3, 32, 32}));
    EXPECT_EQ(out.final_maps.sizes(), (std::vector<int64_t>{2, 12, 8, 8}));
    EXPECT_EQ(out.pooled.sizes(), (std::vector<int64_t>{2, 12}));
}

TEST(NestBackbone, AggregationShapesAndTopLevelError) {
    torch::manual_seed(0);
    BackboneConfig c;
    c.patch_size = 1;
    c.num_hierarchies = 3;
    c.embed_dims = {4, 8, 16};
    c.heads = {1, 2, 2};
    c.blocks_per_level = {1};
    c.image_size = 32;
    c.channels = 1;
    NestBackbone net(c);
    torch::NoGradGuard ng;
    auto blocks0 = net->embed_patches(torch::randn({1, 1, 32, 32}));
    EXPECT_EQ(blocks0.sizes(), (std::vector<int64_t>{1, 16, 64, 4}));
    auto blocks1 = net->aggregate(0, net->encode(0, blocks0));
    EXPECT_EQ(blocks1.sizes(), (std::vector<int64_t>{1, 4, 64, 8}));
    auto blocks2 = net->aggregate(1, net->encode(1, blocks1));
    EXPECT_EQ(blocks2.sizes(), (std::vector<int64_t>{1, 1, 64, 16}));
    EXPECT_THROW(net->aggregate(2, blocks2), StateError);
}

TEST(NestBackbone, PooledIsSpatialMeanOfFinalMaps) {
    torch::manual_seed(3);
    NestBackbone net(tiny_backbone(3));
    net->eval();
    torch::NoGradGuard ng;
    auto out = net->extract_features(torch::randn({4, 3, 8, 8}));
    auto mean = out.final_maps.mean({2, 3});
    EXPECT_TRUE(torch::allclose(out.pooled, mean, 1e-5, 1e-6));
    EXPECT_EQ(out.pooled.size(1), net->config().final_dim());
}

TEST(NestBackbone, EvalForwardIsDeterministic) {
    torch::manual_seed(5);
    NestBackbone net(tiny_backbone());
    net->eval();
    torch::NoGradGuard ng;
    auto x = torch::randn({3, 1, 8, 8});
    auto a = net->extract_features(x);
    auto b = net->extract_features(x);
    EXPECT_TRUE(torch::equal(a.pooled, b.pooled));
    EXPECT_TRUE(torch::equal(a.final_maps, b.final_maps));
}

TEST(NestBackbone, WrongImageSizeIsInputError) {
    NestBackbone net(tiny_backbone());
    EXPECT_THROW(net->extract_features(torch::randn({1, 1, 16, 16})), InputError);
    EXPECT_THROW(net->extract_features(torch::randn({1, 3, 8, 8})), InputError);
}

TEST(NestBackbone, HierarchicalParameterNames) {
    NestBackbone net(tiny_backbone());
    bool has_pos = false;
    bool has_agg = false;
    for (const auto& p : net->named_parameters()) {
        has_pos = has_pos || p.key().rfind("pos_embed_0", 0) == 0;
        has_agg = has_agg || p.key().rfind("aggregate_0", 0) == 0;
    }
    EXPECT_TRUE(has_pos);
    EXPECT_TRUE(has_agg);
}

TEST(NestBackbone, DeskPreset) {
    const auto c = desk_backbone(32, 2, 1);
    c.validate();
    EXPECT_EQ(c.final_dim(), 64);
    EXPECT_EQ(c.heads_at(0), 2);
    EXPECT_EQ(c.depth_at(0), 1);
    EXPECT_EQ(c.num_hierarchies, 3);
    EXPECT_EQ(c.final_grid(), 4);
}
