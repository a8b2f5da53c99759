#include "cilforge/trainer.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <random>
#include <sstream>

#include "cilforge/attention_maps.hpp"
#include "cilforge/errors.hpp"

namespace cilforge {

void TrainConfig::validate() const {
    if (epochs_per_phase < 1) throw ConfigError("train.epochs_per_phase must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(base_lr > 0.0)) throw ConfigError("train.base_lr must be positive");
    if (!(head_lr > 0.0)) throw ConfigError("train.head_lr must be positive");
    if (warmup_epochs < 0) throw ConfigError("train.warmup_epochs must be >= 0");
    if (warmup_epochs >= epochs_per_phase) {
        throw ConfigError("train.warmup_epochs (" + std::to_string(warmup_epochs) +
                          ") must be smaller than train.epochs_per_phase (" + std::to_string(epochs_per_phase) + ")");
    }
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    if (!(grad_clip > 0.0)) throw ConfigError("train.grad_clip must be positive");
    if ((mixup_base || mixup_incremental) && !(mixup_alpha > 0.0)) {
        throw ConfigError("train.mixup_alpha must be positive when mixup is enabled");
    }
    weights.validate();
}

double lr_multiplier(int64_t epoch, int64_t step, int64_t steps_per_epoch, int64_t epochs, int64_t warmup_epochs) {
    const int64_t total = epochs * steps_per_epoch;
    const int64_t warm = std::min(warmup_epochs * steps_per_epoch, total - 1);
    const int64_t s = epoch * steps_per_epoch + step;
    if (s < warm) {
        return static_cast<double>(s + 1) / static_cast<double>(warm);
    }
    const int64_t span = total - warm;
    if (span <= 1) return warm > 0 ? 0.0 : 1.0;
    const double progress = static_cast<double>(s - warm) / static_cast<double>(span - 1);
    if (progress >= 1.0) return 0.0;
    return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

LearningRates lr_at(int64_t epoch, int64_t step, int64_t steps_per_epoch, const TrainConfig& config,
                    bool with_warmup) {
    const double m = lr_multiplier(epoch, step, steps_per_epoch, config.epochs_per_phase,
                                   with_warmup ? config.warmup_epochs : 0);
    return {config.base_lr * m, config.head_lr * m};
}

NestBackbone clone_backbone(const NestBackbone& source) {
    NestBackbone copy(source->config());
    torch::NoGradGuard no_grad;
    auto dst = copy->named_parameters();
    for (const auto& item : source->named_parameters()) dst[item.key()].copy_(item.value());
    auto dst_buf = copy->named_buffers();
    for (const auto& item : source->named_buffers()) dst_buf[item.key()].copy_(item.value());
    return copy;
}

CosineHead clone_head(const CosineHead& source) {
    CosineHead copy(source->dim());
    copy->reset_layout(source->chunk_layout());
    torch::NoGradGuard no_grad;
    auto dst = copy->named_parameters();
    for (const auto& item : source->named_parameters()) dst[item.key()].copy_(item.value());
    return copy;
}

Teacher snapshot_teacher(const NestBackbone& backbone, const CosineHead& head) {
    Teacher t{clone_backbone(backbone), clone_head(head)};
    for (auto& p : t.backbone->parameters()) p.set_requires_grad(false);
    for (auto& p : t.head->parameters()) p.set_requires_grad(false);
    t.backbone->eval();
    t.head->eval();
    return t;
}

uint64_t parameter_checksum(const torch::nn::Module& module) {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const torch::Tensor& t) {
        auto c = t.detach().to(torch::kCPU).contiguous();
        const auto* bytes = static_cast<const uint8_t*>(c.data_ptr());
        const auto n = static_cast<size_t>(c.numel()) * c.element_size();
        for (size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& item : module.named_parameters()) mix(item.value());
    for (const auto& item : module.named_buffers()) mix(item.value());
    return h;
}

torch::Tensor extract_pooled(NestBackbone& backbone, const torch::Tensor& images, const Dataset& stats,
                             int64_t batch_size) {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> out;
    for (int64_t start = 0; start < images.size(0); start += batch_size) {
        const auto len = std::min(batch_size, images.size(0) - start);
        out.push_back(backbone->extract_features(to_model_input(images.narrow(0, start, len), stats)).pooled);
    }
    if (out.empty()) return torch::zeros({0, backbone->config().final_dim()});
    return torch::cat(out);
}

namespace {

struct ParamGroups {
    std::vector<torch::optim::OptimizerParamGroup> groups;
    std::vector<bool> is_head;
    std::vector<torch::Tensor> all;
};

ParamGroups build_groups(NestBackbone& backbone, CosineHead& head, const TrainConfig& config) {
    std::vector<torch::Tensor> decay;
    std::vector<torch::Tensor> no_decay;
    for (const auto& p : backbone->parameters()) {
        if (!p.requires_grad()) continue;
        (p.dim() <= 1 ? no_decay : decay).push_back(p);
    }
    std::vector<torch::Tensor> head_decay;
    std::vector<torch::Tensor> head_no_decay;
    for (const auto& p : head->trainable_parameters()) (p.dim() <= 1 ? head_no_decay : head_decay).push_back(p);

    ParamGroups g;
    auto add = [&](std::vector<torch::Tensor> params, double lr, double wd, bool is_head) {
        if (params.empty()) return;
        g.all.insert(g.all.end(), params.begin(), params.end());
        auto opts = std::make_unique<torch::optim::AdamWOptions>(lr);
        opts->weight_decay(wd).betas({config.beta1, config.beta2});
        g.groups.emplace_back(std::move(params), std::move(opts));
        g.is_head.push_back(is_head);
    };
    add(decay, config.base_lr, config.weight_decay, false);
    add(no_decay, config.base_lr, 0.0, false);
    add(head_decay, config.head_lr, config.weight_decay, true);
    add(head_no_decay, config.head_lr, 0.0, true);
    return g;
}

void check_finite(const torch::Tensor& value, const char* term, int64_t phase, int64_t epoch, int64_t step) {
    const double v = value.item<double>();
    if (!std::isfinite(v)) {
        std::ostringstream msg;
        msg << "non-finite loss at phase " << phase << " epoch " << epoch << " step " << step << ": " << term << " = "
            << v;
        throw RuntimeAbort(msg.str());
    }
}

uint64_t phase_seed(uint64_t seed, int64_t phase) {
    return seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(phase) * 0xBF58476D1CE4E5B9ULL + 1;
}

PhaseStats run_phase(NestBackbone& backbone, CosineHead& head, const Teacher* teacher, const PhaseData& data,
                     const Dataset& stats, const TrainConfig& config, double lambda, bool incremental,
                     const StepHook& hook) {
    config.validate();
    if (data.new_train.size() == 0) {
        throw ConfigError("phase " + std::to_string(data.phase) + " has no training data");
    }
    const auto old_count = data.old_class_count;
    if (head->num_classes() <= old_count) {
        throw StateError("head has " + std::to_string(head->num_classes()) + " classes; phase " +
                         std::to_string(data.phase) + " needs more than " + std::to_string(old_count));
    }

    auto images = data.new_train.images;
    auto labels = data.new_train.labels;
    if (incremental && data.replay.size() > 0) {
        images = torch::cat({images, data.replay.images});
        labels = torch::cat({labels, data.replay.labels});
    }
    const auto n = images.size(0);
    const auto priors = class_priors(incremental ? data.replay.size() : 0, data.new_train.size());
    LossWeights weights = config.weights;
    weights.lambda = lambda;
    if (!incremental) weights.tau = 0.0;

    const bool mixup = incremental ? config.mixup_incremental : config.mixup_base;
    const auto steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const auto num_classes = head->num_classes();

    auto gen = at::make_generator<at::CPUGeneratorImpl>(phase_seed(config.seed, data.phase));
    std::mt19937_64 rng(phase_seed(config.seed, data.phase) ^ 0x5851F42D4C957F2DULL);

    auto groups = build_groups(backbone, head, config);
    torch::optim::AdamW optimizer(groups.groups);
    backbone->train();
    head->train();

    AugmentOptions aug;
    aug.flip = stats.allow_flip;

    PhaseStats result;
    result.lambda = weights.lambda;
    for (int64_t epoch = 0; epoch < config.epochs_per_phase; ++epoch) {
        auto perm = torch::randperm(n, gen, torch::kLong);
        for (int64_t step = 0; step < steps_per_epoch; ++step) {
            const auto start = step * config.batch_size;
            const auto len = std::min(config.batch_size, n - start);
            auto idx = perm.narrow(0, start, len);
            auto batch_raw = images.index_select(0, idx);
            auto batch_labels = labels.index_select(0, idx);
            auto x = config.augment ? augment_batch(batch_raw, stats, aug, gen) : to_model_input(batch_raw, stats);
            auto old_mask = batch_labels < old_count;

            torch::Tensor soft_targets;
            if (mixup) {
                auto onehot = torch::one_hot(batch_labels, num_classes).to(torch::kFloat);
                auto mixed = mixup_batch(x, onehot, config.mixup_alpha, gen, rng);
                x = mixed.images;
                soft_targets = mixed.targets;
            }

            auto out = backbone->extract_features(x);
            auto logits = head->forward(out.pooled);
            BatchParts parts;
            parts.adjusted_ce = soft_targets.defined()
                                    ? adjusted_ce_soft_per_sample(logits, soft_targets, priors, old_count, weights.tau)
                                    : adjusted_ce_per_sample(logits, batch_labels, priors, old_count, weights.tau);

            const auto old_in_batch = old_mask.sum().item<int64_t>();
            if (incremental) {
                const bool need_dis = weights.lambda != 0.0 &&
                                      (weights.distill_scope == DistillScope::AllSamples || old_in_batch > 0);
                const bool need_cam = weights.gamma != 0.0 && old_in_batch > 0;
                FeatureOutput t_out;
                if (need_dis || need_cam) {
                    torch::NoGradGuard no_grad;
                    t_out = NestBackbone(teacher->backbone)->extract_features(x);
                }
                if (need_dis) parts.distill = feature_distill_per_sample(t_out.pooled, out.pooled);
                if (need_cam) {
                    auto old_idx = old_mask.nonzero().squeeze(1);
                    auto targets = batch_labels.index_select(0, old_idx);
                    auto t_leaf = t_out.final_maps.index_select(0, old_idx).detach().requires_grad_(true);
                    auto t_head = teacher->head;
                    LogitFn teacher_fn = [t_head](const torch::Tensor& m) {
                        return cosine_logits(m.mean({2, 3}), t_head->weight().detach(), t_head->eta().detach());
                    };
                    auto t_cam = grad_cam_from_maps(t_leaf, teacher_fn, targets, CamSource::Teacher, CamOptions{});
                    auto s_cam = student_grad_cam(out.final_maps.index_select(0, old_idx), head, targets,
                                                  config.cam_detach_alpha);
                    auto per_old = cam_distill_per_sample(t_cam.values.detach(), s_cam.values);
                    parts.cam = torch::zeros({len}, per_old.options()).index_put({old_idx}, per_old);
                }
            }

            auto terms = total_loss(parts, weights, old_mask);
            check_finite(terms.adjusted_ce, "adjusted_ce", data.phase, epoch, step);
            check_finite(terms.distill, "feature_distill", data.phase, epoch, step);
            check_finite(terms.cam, "cam_distill", data.phase, epoch, step);
            check_finite(terms.total, "total", data.phase, epoch, step);

            const auto lr = lr_at(epoch, step, steps_per_epoch, config, !incremental);
            for (size_t g = 0; g < optimizer.param_groups().size(); ++g) {
                auto& opts = static_cast<torch::optim::AdamWOptions&>(optimizer.param_groups()[g].options());
                opts.lr(groups.is_head[g] ? lr.head : lr.backbone);
            }
            optimizer.zero_grad();
            terms.total.backward();
            torch::nn::utils::clip_grad_norm_(groups.all, config.grad_clip);
            optimizer.step();

            ++result.steps;
            result.last_loss = terms.total.item<double>();
            if (hook) {
                StepRecord rec;
                rec.phase = data.phase;
                rec.epoch = epoch;
                rec.step = step;
                rec.total = result.last_loss;
                rec.adjusted_ce = terms.adjusted_ce.item<double>();
                rec.distill = terms.distill.item<double>();
                rec.cam = terms.cam.item<double>();
                rec.batch_size = len;
                rec.old_in_batch = old_in_batch;
                rec.lr = lr;
                hook(rec);
            }
        }
    }
    backbone->eval();
    head->eval();
    return result;
}

}  // namespace

PhaseStats train_base_phase(NestBackbone& backbone, CosineHead& head, const PhaseData& data, const Dataset& stats,
                            const TrainConfig& config, const StepHook& hook) {
    return run_phase(backbone, head, nullptr, data, stats, config, 0.0, false, hook);
}

PhaseStats train_incremental_phase(NestBackbone& backbone, CosineHead& head, const Teacher* teacher,
                                   const PhaseData& data, const Dataset& stats, const TrainConfig& config,
                                   double lambda, const StepHook& hook) {
    if (teacher == nullptr || !teacher->backbone || !teacher->head) {
        throw StateError("incremental phase " + std::to_string(data.phase) + " requires a teacher model");
    }
    return run_phase(backbone, head, teacher, data, stats, config, lambda, true, hook);
}

}  // namespace cilforge
