#include "cilforge/task_stream.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cilforge/errors.hpp"

namespace cilforge {

int64_t PhasePlan::seen_classes(int64_t t) const { return base_count + t * increment; }

std::pair<int64_t, int64_t> PhasePlan::phase_classes(int64_t t) const {
    if (t < 0 || t > num_increments) {
        throw InputError("phase " + std::to_string(t) + " outside [0, " + std::to_string(num_increments) + "]");
    }
    if (t == 0) return {0, base_count};
    return {seen_classes(t - 1), seen_classes(t)};
}

int64_t PhasePlan::task_of(int64_t cls) const {
    if (cls < 0 || cls >= total_classes()) throw InputError("class " + std::to_string(cls) + " outside plan");
    if (cls < base_count) return 0;
    return 1 + (cls - base_count) / increment;
}

std::vector<int64_t> PhasePlan::inverse_order() const {
    std::vector<int64_t> inv(class_order.size(), -1);
    for (size_t k = 0; k < class_order.size(); ++k) inv[static_cast<size_t>(class_order[k])] = static_cast<int64_t>(k);
    return inv;
}

PhasePlan make_plan(int64_t num_classes, BaseSpec base, int64_t increment, uint64_t seed) {
    if (num_classes < 1) throw ConfigError("plan: dataset has no classes");
    int64_t b = base.count;
    if (b <= 0) {
        if (!(base.fraction > 0.0 && base.fraction <= 1.0)) {
            throw ConfigError("plan.base_fraction must be in (0, 1]");
        }
        b = static_cast<int64_t>(std::llround(base.fraction * static_cast<double>(num_classes)));
    }
    if (b < 1 || b > num_classes) {
        throw ConfigError("plan: base class count " + std::to_string(b) + " outside [1, " +
                          std::to_string(num_classes) + "]");
    }
    const auto rest = num_classes - b;
    if (rest > 0 && increment < 1) throw ConfigError("plan.increment must be >= 1");
    if (rest > 0 && rest % increment != 0) {
        throw ConfigError("plan: " + std::to_string(rest) + " remaining classes are not divisible by increment " +
                          std::to_string(increment));
    }
    PhasePlan plan;
    plan.class_order.resize(static_cast<size_t>(num_classes));
    std::iota(plan.class_order.begin(), plan.class_order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(plan.class_order.begin(), plan.class_order.end(), rng);
    plan.base_count = b;
    plan.increment = rest > 0 ? increment : std::max<int64_t>(increment, 0);
    plan.num_increments = rest > 0 ? rest / increment : 0;
    plan.seed = seed;
    return plan;
}

LabeledSet select_classes(const Dataset& data, const PhasePlan& plan, int64_t first, int64_t last) {
    const auto inv = plan.inverse_order();
    auto labels = data.labels.contiguous();
    const auto* lab = labels.data_ptr<int64_t>();
    std::vector<int64_t> keep;
    std::vector<int64_t> global;
    for (int64_t i = 0; i < data.size(); ++i) {
        const auto g = inv.at(static_cast<size_t>(lab[i]));
        if (g >= first && g < last) {
            keep.push_back(i);
            global.push_back(g);
        }
    }
    LabeledSet out;
    out.indices = torch::tensor(keep, torch::kLong);
    out.images = data.images.index_select(0, out.indices);
    out.labels = torch::tensor(global, torch::kLong);
    return out;
}

PhaseData assemble_phase(const PhasePlan& plan, int64_t t, const ExemplarMemory& memory, const Dataset& train,
                         const Dataset& test) {
    if (t < 0 || t > plan.num_increments) {
        throw InputError("assemble_phase: phase " + std::to_string(t) + " outside [0, " +
                         std::to_string(plan.num_increments) + "]");
    }
    PhaseData data;
    data.phase = t;
    const auto [first, last] = plan.phase_classes(t);
    data.old_class_count = first;
    data.new_train = select_classes(train, plan, first, last);
    data.test_seen = select_classes(test, plan, 0, last);
    if (!memory.empty()) {
        data.replay.images = memory.images();
        data.replay.labels = memory.labels();
        data.replay.indices = torch::tensor(memory.dataset_indices(), torch::kLong);
        if (data.replay.labels.max().item<int64_t>() >= first) {
            throw StateError("assemble_phase: memory holds classes of phase " + std::to_string(t) + " or later");
        }
    }
    return data;
}

torch::Tensor to_model_input(const torch::Tensor& images, const Dataset& stats) {
    const auto c = images.size(1);
    auto x = images.to(torch::kFloat).div(255.0);
    if (static_cast<int64_t>(stats.mean.size()) != c) return x;
    auto mean = torch::tensor(stats.mean, torch::kDouble).to(torch::kFloat).view({1, c, 1, 1});
    auto sd = torch::tensor(stats.stddev, torch::kDouble).to(torch::kFloat).view({1, c, 1, 1});
    return (x - mean) / sd;
}

torch::Tensor augment_batch(const torch::Tensor& images, const Dataset& stats, const AugmentOptions& options,
                            at::Generator& gen) {
    const auto n = images.size(0);
    const auto h = images.size(2);
    const auto w = images.size(3);
    const auto pad = options.crop_padding;
    auto padded = pad > 0 ? torch::constant_pad_nd(images, {pad, pad, pad, pad}, 0) : images;
    auto offsets = torch::randint(0, 2 * pad + 1, {n, 2}, gen, torch::kLong);
    auto flips = torch::rand({n}, gen);
    auto off = offsets.accessor<int64_t, 2>();
    auto fl = flips.accessor<float, 1>();
    std::vector<torch::Tensor> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        auto crop = padded[i].narrow(1, off[i][0], h).narrow(2, off[i][1], w);
        if (options.flip && fl[i] < 0.5f) crop = crop.flip({2});
        out.push_back(crop);
    }
    return to_model_input(torch::stack(out), stats);
}

MixupResult mixup_with(const torch::Tensor& images, const torch::Tensor& targets, double beta,
                       const torch::Tensor& permutation) {
    MixupResult r;
    r.coefficient = beta;
    r.permutation = permutation;
    r.images = beta * images + (1.0 - beta) * images.index_select(0, permutation);
    r.targets = beta * targets + (1.0 - beta) * targets.index_select(0, permutation);
    return r;
}

MixupResult mixup_batch(const torch::Tensor& images, const torch::Tensor& targets, double alpha,
                        at::Generator& gen, std::mt19937_64& rng) {
    if (!(alpha > 0.0)) throw InputError("mixup: alpha must be positive");
    const auto n = images.size(0);
    if (n < 2) {
        return {images, targets, 1.0, torch::arange(n, torch::kLong)};
    }
    std::gamma_distribution<double> g(alpha, 1.0);
    const double a = g(rng);
    const double b = g(rng);
    const double beta = a + b > 0.0 ? a / (a + b) : 0.5;
    auto perm = torch::randperm(n, gen, torch::kLong);
    return mixup_with(images, targets, beta, perm);
}

}  // namespace cilforge
