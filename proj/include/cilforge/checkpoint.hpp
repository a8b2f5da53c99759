#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "cilforge/cosine_head.hpp"
#include "cilforge/nest_backbone.hpp"

namespace cilforge {

struct ModelCheckpoint {
    NestBackbone backbone{nullptr};
    CosineHead head{nullptr};
    nlohmann::json manifest;  // backbone config, head layout, eta, extra fields
};

// Named tensors under "backbone.<name>" / "head.<name>" plus a JSON manifest
// entry recording the backbone config and the head's chunk layout.
void save_checkpoint(const std::filesystem::path& file, const NestBackbone& backbone, const CosineHead& head,
                     const nlohmann::json& extra = nlohmann::json::object());

ModelCheckpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace cilforge
