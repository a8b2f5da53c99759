#include "cilforge/cosine_head.hpp"

#include <cmath>
#include <string>

#include "cilforge/errors.hpp"

namespace cilforge {

namespace F = torch::nn::functional;

namespace {

torch::Tensor l2_normalize(const torch::Tensor& x) {
    return F::normalize(x, F::NormalizeFuncOptions().p(2).dim(-1).eps(kNormEpsilon));
}

}  // namespace

torch::Tensor cosine_logits(const torch::Tensor& features, const torch::Tensor& weights,
                            const torch::Tensor& eta) {
    if (features.dim() != 2 || weights.dim() != 2 || features.size(1) != weights.size(1)) {
        throw InputError("cosine_logits: feature width " + c10::str(features.sizes()) +
                         " does not match head width " + c10::str(weights.sizes()));
    }
    return eta * torch::matmul(l2_normalize(features), l2_normalize(weights).t());
}

CosineHeadImpl::CosineHeadImpl(int64_t dim, double eta_init) : dim_(dim) {
    if (dim < 1) throw ConfigError("cosine head width must be >= 1");
    if (eta_init <= 0.0) throw ConfigError("cosine head eta must be positive");
    // softplus^-1(eta) = log(exp(eta) - 1)
    raw_eta_ = register_parameter("raw_eta", torch::tensor({std::log(std::expm1(eta_init))}));
}

int64_t CosineHeadImpl::num_classes() const {
    int64_t n = 0;
    for (const auto& c : chunks_) n += c.size(0);
    return n;
}

torch::Tensor CosineHeadImpl::eta() const { return torch::softplus(raw_eta_).squeeze(); }

torch::Tensor CosineHeadImpl::weight() const {
    if (chunks_.empty()) {
        return torch::zeros({0, dim_}, raw_eta_.options());
    }
    return torch::cat(chunks_, 0);
}

std::vector<bool> CosineHeadImpl::frozen_mask() const {
    std::vector<bool> mask;
    for (size_t i = 0; i < chunks_.size(); ++i) {
        mask.insert(mask.end(), static_cast<size_t>(chunks_[i].size(0)), chunk_frozen_[i]);
    }
    return mask;
}

torch::Tensor CosineHeadImpl::forward(const torch::Tensor& features) {
    if (chunks_.empty()) {
        throw StateError("cosine head has no classes");
    }
    return cosine_logits(features, weight(), eta());
}

void CosineHeadImpl::append_chunk(torch::Tensor rows) {
    auto name = "weight_" + std::to_string(chunks_.size());
    chunks_.push_back(register_parameter(name, std::move(rows)));
    chunk_frozen_.push_back(false);
}

void CosineHeadImpl::add_classes(int64_t count) {
    if (count < 1) throw ConfigError("add_classes: count must be >= 1");
    auto rows = torch::empty({count, dim_});
    {
        torch::NoGradGuard no_grad;
        torch::nn::init::normal_(rows, 0.0, 1.0 / std::sqrt(static_cast<double>(dim_)));
    }
    append_chunk(rows);
}

void CosineHeadImpl::freeze_existing() {
    for (size_t i = 0; i < chunks_.size(); ++i) {
        chunks_[i].set_requires_grad(false);
        chunk_frozen_[i] = true;
    }
}

void CosineHeadImpl::imprint_new_classes(const std::map<int64_t, torch::Tensor>& per_class_features) {
    if (per_class_features.empty()) {
        throw InitializationError("imprint_new_classes: no classes given");
    }
    int64_t expected = num_classes();
    std::vector<torch::Tensor> rows;
    for (const auto& [cls, feats] : per_class_features) {
        if (cls != expected) {
            throw InputError("imprint_new_classes: expected class " + std::to_string(expected) +
                             ", got " + std::to_string(cls));
        }
        if (!feats.defined() || feats.dim() != 2 || feats.size(0) == 0) {
            throw InitializationError("imprint_new_classes: class " + std::to_string(cls) +
                                      " has an empty feature set");
        }
        if (feats.size(1) != dim_) {
            throw InputError("imprint_new_classes: class " + std::to_string(cls) + " features have width " +
                             std::to_string(feats.size(1)) + ", head width is " + std::to_string(dim_));
        }
        auto f = feats.detach().to(torch::kFloat);
        rows.push_back(l2_normalize(l2_normalize(f).mean(0)));
        ++expected;
    }
    freeze_existing();
    append_chunk(torch::stack(rows, 0));
}

std::vector<torch::Tensor> CosineHeadImpl::trainable_parameters() const {
    std::vector<torch::Tensor> params;
    for (size_t i = 0; i < chunks_.size(); ++i) {
        if (!chunk_frozen_[i]) params.push_back(chunks_[i]);
    }
    params.push_back(raw_eta_);
    return params;
}

std::vector<std::pair<int64_t, bool>> CosineHeadImpl::chunk_layout() const {
    std::vector<std::pair<int64_t, bool>> layout;
    for (size_t i = 0; i < chunks_.size(); ++i) {
        layout.emplace_back(chunks_[i].size(0), chunk_frozen_[i]);
    }
    return layout;
}

void CosineHeadImpl::reset_layout(const std::vector<std::pair<int64_t, bool>>& layout) {
    if (!chunks_.empty()) {
        throw StateError("reset_layout: head already has rows");
    }
    for (const auto& [rows, frozen] : layout) {
        append_chunk(torch::zeros({rows, dim_}));
        if (frozen) {
            chunks_.back().set_requires_grad(false);
            chunk_frozen_.back() = true;
        }
    }
}

}  // namespace cilforge
