#pragma once

// Herding exemplar selection, budgeted exemplar store and the nearest class
// mean classifier.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace cilforge {

// Greedy herding: with mu the mean of `features` (n x d), repeatedly pick the
// unselected row i minimizing |mu - (sum_selected + f_i) / (k + 1)|; ties go
// to the lowest index. Returns min(n, m) indices in selection order.
// Throws InputError on non-finite features.
std::vector<int64_t> herding_select(const torch::Tensor& features, int64_t m);

enum class BudgetKind { PerClass, FixedTotal };

struct BudgetPolicy {
    BudgetKind kind = BudgetKind::PerClass;
    int64_t size = 20;  // exemplars per class, or total capacity

    // Per-class quota once `num_seen_classes` classes are stored. Throws
    // ConfigError when a fixed total cannot give every class an exemplar.
    int64_t quota(int64_t num_seen_classes) const;
    std::string kind_name() const;
};

BudgetKind budget_kind_from_string(const std::string& name);

struct SampleRef {
    int64_t dataset_index = -1;
    torch::Tensor image;  // (C, H, W) uint8, as ingested
};

struct ClassCandidates {
    torch::Tensor features;  // (n, d); rows align with refs
    std::vector<SampleRef> refs;
};

// Extracts (B, d) features from a (B, C, H, W) uint8 image batch.
using FeatureFn = std::function<torch::Tensor(const torch::Tensor& images)>;

class ExemplarMemory {
public:
    explicit ExemplarMemory(BudgetPolicy policy = {});

    const BudgetPolicy& policy() const { return policy_; }
    const std::map<int64_t, std::vector<SampleRef>>& store() const { return store_; }
    const std::map<int64_t, torch::Tensor>& means() const { return means_; }

    int64_t class_count() const { return static_cast<int64_t>(store_.size()); }
    int64_t total_size() const;
    bool empty() const { return store_.empty(); }

    // Herding-selects each new class (on L2-normalized features) and then
    // truncates every class to the current quota, keeping herding prefixes.
    void add_classes(const std::map<int64_t, ClassCandidates>& new_classes);

    // Recomputes every class mean as normalize(mean(normalize(f))) over the
    // stored exemplars.
    void refresh_means(const FeatureFn& features, int64_t batch_size = 256);

    // All stored images (N, C, H, W) uint8 and global labels (N), class order.
    torch::Tensor images() const;
    torch::Tensor labels() const;
    std::vector<int64_t> dataset_indices() const;

    // Per class: dataset indices in herding order.
    nlohmann::json manifest() const;
    // Rebuilds a memory from a manifest; `image_of` returns the raw image of
    // a dataset index.
    static ExemplarMemory from_manifest(const nlohmann::json& manifest,
                                        const std::function<torch::Tensor(int64_t)>& image_of);

private:
    void enforce_quota();

    BudgetPolicy policy_;
    std::map<int64_t, std::vector<SampleRef>> store_;
    std::map<int64_t, torch::Tensor> means_;
};

// Selection + quota + mean refresh in one step (end of a phase).
void update_memory(ExemplarMemory& memory, const std::map<int64_t, ClassCandidates>& new_classes,
                   const FeatureFn& features);

// argmin_c |f/|f| - mu_c| over the stored means; ties go to the lowest class.
// Throws StateError when `means` is empty.
std::vector<int64_t> ncm_predict(const torch::Tensor& features, const std::map<int64_t, torch::Tensor>& means);

}  // namespace cilforge
