#include <gtest/gtest.h>

#include <cmath>

#include "cilforge/errors.hpp"
#include "cilforge/trainer.hpp"
#include "test_util.hpp"

using namespace cilforge;
using cilforge::testing::tiny_backbone;

namespace {

TrainConfig small_config() {
    TrainConfig c;
    c.epochs_per_phase = 3;
    c.batch_size = 16;
    c.base_lr = 1e-3;
    c.head_lr = 1e-2;
    c.warmup_epochs = 1;
    c.mixup_base = false;
    c.weights.lambda = 1.0;
    c.weights.gamma = 0.1;
    c.weights.tau = 1.0;
    return c;
}

struct Toy {
    DatasetSplits data;
    PhasePlan plan;
};

Toy toy() {
    SyntheticSpec spec;
    spec.num_classes = 4;
    spec.train_per_class = 24;
    spec.test_per_class = 8;
    spec.image_size = 8;
    return {make_synthetic(spec), make_plan(4, {2, 0.5}, 2, 0)};
}

std::map<int64_t, torch::Tensor> class_features(NestBackbone& net, const LabeledSet& set, const Dataset& stats) {
    auto feats = extract_pooled(net, set.images, stats);
    std::map<int64_t, torch::Tensor> out;
    for (int64_t c = set.labels.min().item<int64_t>(); c <= set.labels.max().item<int64_t>(); ++c) {
        out[c] = feats.index_select(0, (set.labels == c).nonzero().flatten());
    }
    return out;
}

}  // namespace

TEST(LrSchedule, WarmupReachesOneThenCosineReachesZero) {
    const int64_t spe = 5;
    const int64_t epochs = 4;
    // Warmup of 1 epoch: steps 0..4 ramp to exactly 1.0 on step 4.
    for (int64_t s = 0; s < spe; ++s) {
        EXPECT_DOUBLE_EQ(lr_multiplier(0, s, spe, epochs, 1), static_cast<double>(s + 1) / 5.0);
    }
    // First post-warmup step starts the cosine at 1.0, last step is 0.
    EXPECT_DOUBLE_EQ(lr_multiplier(1, 0, spe, epochs, 1), 1.0);
    EXPECT_DOUBLE_EQ(lr_multiplier(3, 4, spe, epochs, 1), 0.0);
    // Without warmup the first step is 1.0.
    EXPECT_DOUBLE_EQ(lr_multiplier(0, 0, spe, epochs, 0), 1.0);
    EXPECT_DOUBLE_EQ(lr_multiplier(3, 4, spe, epochs, 0), 0.0);
    // Midpoint of a 3-step cosine is 0.5.
    EXPECT_NEAR(lr_multiplier(0, 1, 3, 1, 0), 0.5, 1e-15);
}

TEST(LrSchedule, PropertyBoundedAndMonotoneAfterWarmup) {
    for (int64_t spe : {1, 3, 7}) {
        for (int64_t epochs : {2, 5}) {
            double prev = 2.0;
            for (int64_t e = 0; e < epochs; ++e) {
                for (int64_t s = 0; s < spe; ++s) {
                    const double m = lr_multiplier(e, s, spe, epochs, 1);
                    EXPECT_GE(m, 0.0);
                    EXPECT_LE(m, 1.0);
                    if (e >= 1) {
                        EXPECT_LE(m, prev + 1e-15);
                        prev = m;
                    }
                }
            }
        }
    }
    TrainConfig c = small_config();
    const auto lr = lr_at(1, 0, 4, c, true);
    EXPECT_DOUBLE_EQ(lr.backbone, c.base_lr);
    EXPECT_DOUBLE_EQ(lr.head, c.head_lr);
}

TEST(TrainConfigValidation, RejectsBadValues) {
    auto c = small_config();
    c.validate();
    c.warmup_epochs = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.base_lr = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.weights.tau = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Teacher, SnapshotIsIndependentAndFrozen) {
    torch::manual_seed(0);
    NestBackbone net(tiny_backbone());
    CosineHead head(8);
    head->add_classes(2);
    auto teacher = snapshot_teacher(net, head);
    EXPECT_EQ(parameter_checksum(*teacher.backbone), parameter_checksum(*net));
    EXPECT_EQ(parameter_checksum(*teacher.head), parameter_checksum(*head));
    for (const auto& p : teacher.backbone->parameters()) EXPECT_FALSE(p.requires_grad());
    EXPECT_FALSE(teacher.backbone->is_training());
    {
        torch::NoGradGuard ng;
        net->parameters().front().add_(1.0);
    }
    EXPECT_NE(parameter_checksum(*teacher.backbone), parameter_checksum(*net));
}

TEST(Training, BasePhaseLearnsAndReportsSteps) {
    torch::manual_seed(1);
    auto t = toy();
    NestBackbone net(tiny_backbone());
    CosineHead head(8);
    head->add_classes(2);
    ExemplarMemory mem;
    const auto data = assemble_phase(t.plan, 0, mem, t.data.train, t.data.test);
    auto cfg = small_config();
    cfg.epochs_per_phase = 6;
    std::vector<StepRecord> steps;
    const auto stats = train_base_phase(net, head, data, t.data.train, cfg,
                                        [&](const StepRecord& r) { steps.push_back(r); });
    // 48 samples, batch 16 -> 3 steps per epoch.
    EXPECT_EQ(stats.steps, 18);
    ASSERT_EQ(steps.size(), 18u);
    EXPECT_EQ(steps.back().distill, 0.0);
    EXPECT_EQ(steps.back().cam, 0.0);
    EXPECT_EQ(steps.back().lr.backbone, 0.0);
    double first = 0.0;
    double last = 0.0;
    for (int i = 0; i < 3; ++i) first += steps[static_cast<size_t>(i)].total;
    for (int i = 15; i < 18; ++i) last += steps[static_cast<size_t>(i)].total;
    EXPECT_LT(last, first);

    PhaseData empty = data;
    empty.new_train = LabeledSet{};
    EXPECT_THROW(train_base_phase(net, head, empty, t.data.train, cfg), ConfigError);
}

TEST(Training, IncrementalPhaseKeepsTeacherAndFrozenRows) {
    torch::manual_seed(2);
    auto t = toy();
    NestBackbone net(tiny_backbone());
    CosineHead head(8);
    head->add_classes(2);
    ExemplarMemory mem({BudgetKind::PerClass, 4});
    auto cfg = small_config();
    const auto d0 = assemble_phase(t.plan, 0, mem, t.data.train, t.data.test);
    train_base_phase(net, head, d0, t.data.train, cfg);

    std::map<int64_t, ClassCandidates> cands;
    auto feats = class_features(net, d0.new_train, t.data.train);
    for (auto& [c, f] : feats) {
        ClassCandidates cc;
        cc.features = f;
        auto rows = (d0.new_train.labels == c).nonzero().flatten();
        for (int64_t i = 0; i < rows.size(0); ++i) {
            const auto r = rows[i].item<int64_t>();
            cc.refs.push_back({d0.new_train.indices[r].item<int64_t>(), d0.new_train.images[r]});
        }
        cands[c] = cc;
    }
    mem.add_classes(cands);
    auto teacher = snapshot_teacher(net, head);
    const auto teacher_sum = parameter_checksum(*teacher.backbone) ^ parameter_checksum(*teacher.head);

    const auto d1 = assemble_phase(t.plan, 1, mem, t.data.train, t.data.test);
    head->freeze_existing();
    head->imprint_new_classes(class_features(net, d1.new_train, t.data.train));
    const auto frozen_before = head->weight().detach().narrow(0, 0, 2).clone();

    EXPECT_THROW(train_incremental_phase(net, head, nullptr, d1, t.data.train, cfg, 1.0), StateError);

    int64_t old_seen = 0;
    double cam_sum = 0.0;
    const auto st = train_incremental_phase(net, head, &teacher, d1, t.data.train, cfg, 2.0,
                                            [&](const StepRecord& r) {
                                                old_seen += r.old_in_batch;
                                                cam_sum += r.cam;
                                            });
    EXPECT_EQ(st.lambda, 2.0);
    EXPECT_EQ(old_seen, 3 * 8);  // every replayed exemplar once per epoch
    EXPECT_GT(cam_sum, 0.0);
    EXPECT_EQ(parameter_checksum(*teacher.backbone) ^ parameter_checksum(*teacher.head), teacher_sum);
    EXPECT_TRUE(torch::equal(head->weight().detach().narrow(0, 0, 2), frozen_before));
}

TEST(Training, SameSeedSameWeights) {
    auto run = [] {
        torch::manual_seed(3);
        auto t = toy();
        NestBackbone net(tiny_backbone());
        CosineHead head(8);
        head->add_classes(2);
        ExemplarMemory mem;
        const auto d0 = assemble_phase(t.plan, 0, mem, t.data.train, t.data.test);
        auto cfg = small_config();
        cfg.mixup_base = true;
        train_base_phase(net, head, d0, t.data.train, cfg);
        return parameter_checksum(*net) ^ parameter_checksum(*head);
    };
    EXPECT_EQ(run(), run());
}

TEST(Extract, PooledFeaturesBatchInvariant) {
    torch::manual_seed(4);
    NestBackbone net(tiny_backbone());
    net->eval();
    Dataset stats;
    stats.mean = {0.5};
    stats.stddev = {0.2};
    auto imgs = torch::randint(0, 256, {10, 1, 8, 8}, torch::kLong).to(torch::kUInt8);
    auto a = extract_pooled(net, imgs, stats, 3);
    auto b = extract_pooled(net, imgs, stats, 10);
    EXPECT_TRUE(torch::allclose(a, b, 1e-5, 1e-6));
    EXPECT_EQ(extract_pooled(net, imgs.narrow(0, 0, 0), stats).size(0), 0);
}
