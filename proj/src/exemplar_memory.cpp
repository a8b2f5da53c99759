#include "cilforge/exemplar_memory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cilforge/cosine_head.hpp"
#include "cilforge/errors.hpp"

namespace cilforge {

namespace F = torch::nn::functional;

std::vector<int64_t> herding_select(const torch::Tensor& features, int64_t m) {
    if (features.dim() != 2 || features.size(0) < 1) {
        throw InputError("herding_select: expected (n >= 1, d) features");
    }
    auto f = features.detach().to(torch::kCPU, torch::kDouble).contiguous();
    if (!torch::isfinite(f).all().item<bool>()) {
        throw InputError("herding_select: features contain NaN or Inf");
    }
    const auto n = f.size(0);
    const auto d = f.size(1);
    const auto take = std::min(n, std::max<int64_t>(m, 0));
    const double* data = f.data_ptr<double>();

    // Distances are compared in the scaled form
    //   |(k+1) * S - n * (R + f_i)|^2 = n^2 (k+1)^2 |mu - (R + f_i)/(k+1)|^2
    // with S the sum of all rows and R the sum of the selected rows, which
    // avoids divisions and is exact for small integer-valued features.
    std::vector<double> total(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < d; ++j) total[j] += data[i * d + j];
    }
    const double nn = static_cast<double>(n);

    std::vector<int64_t> order;
    std::vector<bool> used(static_cast<size_t>(n), false);
    std::vector<double> running(static_cast<size_t>(d), 0.0);
    for (int64_t k = 0; k < take; ++k) {
        const double scale = static_cast<double>(k + 1);
        int64_t best = -1;
        double best_dist = std::numeric_limits<double>::infinity();
        for (int64_t i = 0; i < n; ++i) {
            if (used[i]) continue;
            double dist = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                const double diff = scale * total[j] - nn * (running[j] + data[i * d + j]);
                dist += diff * diff;
            }
            if (dist < best_dist) {
                best_dist = dist;
                best = i;
            }
        }
        used[best] = true;
        order.push_back(best);
        for (int64_t j = 0; j < d; ++j) running[j] += data[best * d + j];
    }
    return order;
}

int64_t BudgetPolicy::quota(int64_t num_seen_classes) const {
    if (size < 0) throw ConfigError("memory.size must be >= 0");
    if (kind == BudgetKind::PerClass || num_seen_classes == 0) return size;
    if (size < num_seen_classes) {
        throw ConfigError("memory budget too small: fixed total " + std::to_string(size) + " < " +
                          std::to_string(num_seen_classes) + " seen classes (quota would be 0)");
    }
    return size / num_seen_classes;
}

std::string BudgetPolicy::kind_name() const {
    return kind == BudgetKind::PerClass ? "per_class" : "fixed_total";
}

BudgetKind budget_kind_from_string(const std::string& name) {
    if (name == "per_class") return BudgetKind::PerClass;
    if (name == "fixed_total") return BudgetKind::FixedTotal;
    throw ConfigError("memory.policy must be per_class or fixed_total, got '" + name + "'");
}

ExemplarMemory::ExemplarMemory(BudgetPolicy policy) : policy_(policy) {}

int64_t ExemplarMemory::total_size() const {
    int64_t n = 0;
    for (const auto& [cls, refs] : store_) n += static_cast<int64_t>(refs.size());
    return n;
}

void ExemplarMemory::add_classes(const std::map<int64_t, ClassCandidates>& new_classes) {
    const auto quota = policy_.quota(class_count() + static_cast<int64_t>(new_classes.size()));
    for (const auto& [cls, cand] : new_classes) {
        if (store_.count(cls) != 0) {
            throw StateError("exemplar memory already holds class " + std::to_string(cls));
        }
        if (static_cast<int64_t>(cand.refs.size()) != cand.features.size(0)) {
            throw InputError("exemplar memory: class " + std::to_string(cls) +
                             " has mismatched features and references");
        }
        auto normalized = F::normalize(cand.features.detach().to(torch::kDouble),
                                       F::NormalizeFuncOptions().p(2).dim(1).eps(kNormEpsilon));
        std::vector<SampleRef> kept;
        for (auto idx : herding_select(normalized, quota)) kept.push_back(cand.refs[idx]);
        store_[cls] = std::move(kept);
    }
    enforce_quota();
}

void ExemplarMemory::enforce_quota() {
    const auto quota = policy_.quota(class_count());
    for (auto& [cls, refs] : store_) {
        if (static_cast<int64_t>(refs.size()) > quota) refs.resize(static_cast<size_t>(quota));
    }
}

void ExemplarMemory::refresh_means(const FeatureFn& features, int64_t batch_size) {
    torch::NoGradGuard no_grad;
    means_.clear();
    for (const auto& [cls, refs] : store_) {
        if (refs.empty()) continue;
        std::vector<torch::Tensor> chunks;
        for (size_t start = 0; start < refs.size(); start += static_cast<size_t>(batch_size)) {
            std::vector<torch::Tensor> imgs;
            for (size_t i = start; i < std::min(refs.size(), start + static_cast<size_t>(batch_size)); ++i) {
                imgs.push_back(refs[i].image);
            }
            chunks.push_back(features(torch::stack(imgs)).detach().to(torch::kCPU, torch::kFloat));
        }
        auto opts = F::NormalizeFuncOptions().p(2).dim(-1).eps(kNormEpsilon);
        auto f = F::normalize(torch::cat(chunks), opts);
        means_[cls] = F::normalize(f.mean(0), opts);
    }
}

torch::Tensor ExemplarMemory::images() const {
    std::vector<torch::Tensor> imgs;
    for (const auto& [cls, refs] : store_) {
        for (const auto& r : refs) imgs.push_back(r.image);
    }
    if (imgs.empty()) return {};
    return torch::stack(imgs);
}

torch::Tensor ExemplarMemory::labels() const {
    std::vector<int64_t> labels;
    for (const auto& [cls, refs] : store_) labels.insert(labels.end(), refs.size(), cls);
    return torch::tensor(labels, torch::kLong);
}

std::vector<int64_t> ExemplarMemory::dataset_indices() const {
    std::vector<int64_t> idx;
    for (const auto& [cls, refs] : store_) {
        for (const auto& r : refs) idx.push_back(r.dataset_index);
    }
    return idx;
}

nlohmann::json ExemplarMemory::manifest() const {
    nlohmann::json classes = nlohmann::json::object();
    for (const auto& [cls, refs] : store_) {
        std::vector<int64_t> idx;
        for (const auto& r : refs) idx.push_back(r.dataset_index);
        classes[std::to_string(cls)] = idx;
    }
    return {{"policy", policy_.kind_name()}, {"size", policy_.size}, {"classes", classes}};
}

ExemplarMemory ExemplarMemory::from_manifest(const nlohmann::json& manifest,
                                             const std::function<torch::Tensor(int64_t)>& image_of) {
    BudgetPolicy policy{budget_kind_from_string(manifest.at("policy").get<std::string>()),
                        manifest.at("size").get<int64_t>()};
    ExemplarMemory memory(policy);
    for (const auto& [key, indices] : manifest.at("classes").items()) {
        std::vector<SampleRef> refs;
        for (auto idx : indices.get<std::vector<int64_t>>()) refs.push_back({idx, image_of(idx)});
        memory.store_[std::stoll(key)] = std::move(refs);
    }
    return memory;
}

void update_memory(ExemplarMemory& memory, const std::map<int64_t, ClassCandidates>& new_classes,
                   const FeatureFn& features) {
    memory.add_classes(new_classes);
    memory.refresh_means(features);
}

std::vector<int64_t> ncm_predict(const torch::Tensor& features, const std::map<int64_t, torch::Tensor>& means) {
    if (means.empty()) throw StateError("ncm_predict: no class means available");
    std::vector<int64_t> classes;
    std::vector<torch::Tensor> rows;
    for (const auto& [cls, mu] : means) {
        classes.push_back(cls);
        rows.push_back(mu.to(torch::kCPU, torch::kDouble));
    }
    auto opts = F::NormalizeFuncOptions().p(2).dim(1).eps(kNormEpsilon);
    auto f = F::normalize(features.detach().to(torch::kCPU, torch::kDouble), opts);
    auto mu = torch::stack(rows);
    // |f - mu|^2 per (sample, class)
    auto dist = (f.unsqueeze(1) - mu.unsqueeze(0)).pow(2).sum(2).contiguous();
    auto acc = dist.accessor<double, 2>();
    std::vector<int64_t> out;
    for (int64_t b = 0; b < dist.size(0); ++b) {
        int64_t best = 0;
        for (int64_t c = 1; c < dist.size(1); ++c) {
            if (acc[b][c] < acc[b][best]) best = c;
        }
        out.push_back(classes[static_cast<size_t>(best)]);
    }
    return out;
}

}  // namespace cilforge
