#include "cilforge/objectives.hpp"

#include <cmath>

#include "cilforge/cosine_head.hpp"
#include "cilforge/errors.hpp"

namespace cilforge {

namespace F = torch::nn::functional;

PriorPair class_priors(int64_t num_exemplars, int64_t num_new) {
    if (num_exemplars < 0) throw InputError("class_priors: negative exemplar count");
    if (num_new <= 0) throw InputError("class_priors: new-sample count must be positive");
    const auto total = static_cast<double>(num_exemplars + num_new);
    PriorPair p;
    p.pi_old = static_cast<double>(num_exemplars) / total;
    p.pi_new = static_cast<double>(num_new) / total;
    p.old_empty = num_exemplars == 0;
    return p;
}

std::string to_string(DistillScope scope) {
    return scope == DistillScope::ExemplarsOnly ? "exemplars_only" : "all_samples";
}

DistillScope distill_scope_from_string(const std::string& name) {
    if (name == "exemplars_only") return DistillScope::ExemplarsOnly;
    if (name == "all_samples") return DistillScope::AllSamples;
    throw ConfigError("distill_scope must be exemplars_only or all_samples, got '" + name + "'");
}

void LossWeights::validate() const {
    if (!(tau >= 0.0)) throw ConfigError("loss.tau must be >= 0");
    if (!(lambda >= 0.0)) throw ConfigError("loss.lambda_base must be >= 0");
    if (!(gamma >= 0.0)) throw ConfigError("loss.gamma must be >= 0");
}

torch::Tensor logit_offsets(int64_t num_classes, int64_t old_class_count, const PriorPair& priors,
                            double tau) {
    if (old_class_count < 0 || old_class_count > num_classes) {
        throw InputError("logit_offsets: old class count " + std::to_string(old_class_count) +
                         " outside [0, " + std::to_string(num_classes) + "]");
    }
    auto offsets = torch::zeros({num_classes}, torch::kDouble);
    if (tau == 0.0) return offsets;
    if (old_class_count > 0 && priors.old_empty) {
        throw InputError("adjusted_ce: tau > 0 requires a nonzero exemplar count (pi_old = 0)");
    }
    if (old_class_count > 0) {
        offsets.slice(0, 0, old_class_count).fill_(tau * std::log(priors.pi_old));
    }
    offsets.slice(0, old_class_count).fill_(tau * std::log(priors.pi_new));
    return offsets;
}

namespace {

torch::Tensor adjusted_log_softmax(const torch::Tensor& logits, const PriorPair& priors,
                                   int64_t old_class_count, double tau) {
    if (logits.dim() != 2) throw InputError("adjusted_ce: logits must be (B, K)");
    auto offsets = logit_offsets(logits.size(1), old_class_count, priors, tau).to(logits.scalar_type());
    return torch::log_softmax(logits + offsets.unsqueeze(0), 1);
}

}  // namespace

torch::Tensor adjusted_ce_per_sample(const torch::Tensor& logits, const torch::Tensor& labels,
                                     const PriorPair& priors, int64_t old_class_count, double tau) {
    if (labels.dim() != 1 || labels.size(0) != logits.size(0)) {
        throw InputError("adjusted_ce: labels must be (B) matching the logits batch");
    }
    if (labels.numel() > 0 &&
        (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= logits.size(1))) {
        throw InputError("adjusted_ce: label outside [0, " + std::to_string(logits.size(1)) + ")");
    }
    auto logp = adjusted_log_softmax(logits, priors, old_class_count, tau);
    return -logp.gather(1, labels.to(torch::kLong).unsqueeze(1)).squeeze(1);
}

torch::Tensor adjusted_ce(const torch::Tensor& logits, const torch::Tensor& labels,
                          const PriorPair& priors, int64_t old_class_count, double tau) {
    return adjusted_ce_per_sample(logits, labels, priors, old_class_count, tau).mean();
}

torch::Tensor adjusted_ce_soft_per_sample(const torch::Tensor& logits, const torch::Tensor& targets,
                                          const PriorPair& priors, int64_t old_class_count, double tau) {
    if (targets.sizes() != logits.sizes()) {
        throw InputError("adjusted_ce: soft targets must match the logits shape");
    }
    auto logp = adjusted_log_softmax(logits, priors, old_class_count, tau);
    return -(targets.to(logp.scalar_type()) * logp).sum(1);
}

torch::Tensor feature_distill_per_sample(const torch::Tensor& teacher_feats,
                                         const torch::Tensor& student_feats) {
    if (teacher_feats.sizes() != student_feats.sizes() || student_feats.dim() != 2) {
        throw InputError("feature_distill: teacher " + c10::str(teacher_feats.sizes()) +
                         " and student " + c10::str(student_feats.sizes()) + " shapes differ");
    }
    auto opts = F::NormalizeFuncOptions().p(2).dim(1).eps(kNormEpsilon);
    auto t = F::normalize(teacher_feats.detach(), opts);
    auto s = F::normalize(student_feats, opts);
    return 1.0 - (t * s).sum(1);
}

torch::Tensor feature_distill(const torch::Tensor& teacher_feats, const torch::Tensor& student_feats) {
    return feature_distill_per_sample(teacher_feats, student_feats).mean();
}

torch::Tensor cam_distill_per_sample(const torch::Tensor& teacher_cam, const torch::Tensor& student_cam) {
    if (teacher_cam.sizes() != student_cam.sizes() || student_cam.dim() != 3) {
        throw InputError("cam_distill: teacher " + c10::str(teacher_cam.sizes()) + " and student " +
                         c10::str(student_cam.sizes()) + " grids differ");
    }
    return (student_cam - teacher_cam.detach()).abs().mean({1, 2});
}

torch::Tensor cam_distill(const torch::Tensor& teacher_cam, const torch::Tensor& student_cam) {
    return cam_distill_per_sample(teacher_cam, student_cam).mean();
}

namespace {

torch::Tensor masked_mean(const torch::Tensor& values, const torch::Tensor& mask) {
    auto selected = values.index({mask});
    if (selected.numel() == 0) {
        return torch::zeros({}, values.options());
    }
    return selected.mean();
}

}  // namespace

LossTerms total_loss(const BatchParts& parts, const LossWeights& weights, const torch::Tensor& old_mask) {
    if (!parts.adjusted_ce.defined()) throw InputError("total_loss: missing adjusted_ce term");
    const auto batch = parts.adjusted_ce.size(0);
    auto mask = old_mask.to(torch::kBool);
    if (mask.dim() != 1 || mask.size(0) != batch) {
        throw InputError("total_loss: old_mask must be (B)");
    }
    LossTerms terms;
    terms.adjusted_ce = parts.adjusted_ce.mean();
    auto zero = torch::zeros({}, parts.adjusted_ce.options());
    terms.distill = zero;
    terms.cam = zero;
    if (parts.distill.defined() && weights.lambda != 0.0) {
        terms.distill = weights.distill_scope == DistillScope::AllSamples ? parts.distill.mean()
                                                                          : masked_mean(parts.distill, mask);
    }
    if (parts.cam.defined() && weights.gamma != 0.0) {
        terms.cam = masked_mean(parts.cam, mask);
    }
    terms.total = terms.adjusted_ce + weights.lambda * terms.distill + weights.gamma * terms.cam;
    return terms;
}

std::string to_string(LambdaRule rule) {
    return rule == LambdaRule::Cumulative ? "cumulative" : "base_only";
}

LambdaRule lambda_rule_from_string(const std::string& name) {
    if (name == "cumulative") return LambdaRule::Cumulative;
    if (name == "base_only") return LambdaRule::BaseOnly;
    throw ConfigError("lambda_rule must be cumulative or base_only, got '" + name + "'");
}

double lambda_schedule(double lambda_prev, int64_t old_classes, int64_t new_classes) {
    if (new_classes <= 0) {
        throw ConfigError("lambda_schedule: new class count must be positive, got " +
                          std::to_string(new_classes));
    }
    if (old_classes < 0) throw ConfigError("lambda_schedule: negative old class count");
    return lambda_prev * std::sqrt(static_cast<double>(old_classes + new_classes) /
                                   static_cast<double>(new_classes));
}

}  // namespace cilforge
