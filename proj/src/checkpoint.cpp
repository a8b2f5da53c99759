#include "cilforge/checkpoint.hpp"

#include "cilforge/errors.hpp"

namespace cilforge {

void save_checkpoint(const std::filesystem::path& file, const NestBackbone& backbone, const CosineHead& head,
                     const nlohmann::json& extra) {
    nlohmann::json manifest = extra;
    manifest["backbone"] = backbone->config();
    nlohmann::json layout = nlohmann::json::array();
    for (const auto& [rows, frozen] : head->chunk_layout()) layout.push_back({{"rows", rows}, {"frozen", frozen}});
    manifest["head"] = {{"dim", head->dim()}, {"layout", layout}, {"eta", head->eta().item<double>()},
                        {"frozen_mask", head->frozen_mask()}};

    torch::serialize::OutputArchive archive;
    for (const auto& item : backbone->named_parameters()) archive.write("backbone." + item.key(), item.value());
    for (const auto& item : head->named_parameters()) archive.write("head." + item.key(), item.value());
    archive.write("manifest", c10::IValue(manifest.dump()));
    const auto tmp = std::filesystem::path(file.string() + ".tmp");
    archive.save_to(tmp.string());
    std::filesystem::rename(tmp, file);
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& file) {
    if (!std::filesystem::exists(file)) throw StateError("checkpoint not found: " + file.string());
    torch::serialize::InputArchive archive;
    archive.load_from(file.string());
    c10::IValue raw;
    if (!archive.try_read("manifest", raw)) throw StateError("checkpoint has no manifest: " + file.string());

    ModelCheckpoint ckpt;
    ckpt.manifest = nlohmann::json::parse(raw.toStringRef());
    ckpt.backbone = NestBackbone(ckpt.manifest.at("backbone").get<BackboneConfig>());
    const auto& head_info = ckpt.manifest.at("head");
    ckpt.head = CosineHead(head_info.at("dim").get<int64_t>());
    std::vector<std::pair<int64_t, bool>> layout;
    for (const auto& chunk : head_info.at("layout")) {
        layout.emplace_back(chunk.at("rows").get<int64_t>(), chunk.at("frozen").get<bool>());
    }
    ckpt.head->reset_layout(layout);

    torch::NoGradGuard no_grad;
    auto load_into = [&archive](torch::nn::Module& module, const std::string& prefix) {
        for (auto& item : module.named_parameters()) {
            torch::Tensor value;
            if (!archive.try_read(prefix + item.key(), value)) {
                throw StateError("checkpoint is missing tensor " + prefix + item.key());
            }
            item.value().copy_(value);
        }
    };
    load_into(*ckpt.backbone, "backbone.");
    load_into(*ckpt.head, "head.");
    ckpt.backbone->eval();
    ckpt.head->eval();
    return ckpt;
}

}  // namespace cilforge
