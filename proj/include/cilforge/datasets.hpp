#pragma once

// Dataset ingestion. Images are held as uint8 (N, C, H, W) tensors at the
// model's input size; labels are the dataset's own class ids.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace cilforge {

struct Dataset {
    std::string name;
    torch::Tensor images;  // (N, C, H, W) uint8
    torch::Tensor labels;  // (N) int64
    int64_t num_classes = 0;
    bool allow_flip = true;
    std::vector<double> mean;  // per channel, [0, 1] scale
    std::vector<double> stddev;

    int64_t size() const { return images.defined() ? images.size(0) : 0; }
    int64_t channels() const { return images.size(1); }
    int64_t image_size() const { return images.size(2); }
};

struct DatasetSplits {
    Dataset train;
    Dataset test;
};

// MNIST IDX files (optionally .gz) under `root`; 28x28 digits are zero-padded
// to 32x32.
DatasetSplits load_mnist(const std::filesystem::path& root);

// CIFAR-100 binary version: root/train.bin and root/test.bin (fine labels).
DatasetSplits load_cifar100(const std::filesystem::path& root);

// root/train/<class>/* and root/test/<class>/* (or root/val/<class>/*);
// classes are the sorted directory names. Images are resized (shorter side)
// and center-cropped to `image_size`.
DatasetSplits load_image_folder(const std::filesystem::path& root, int64_t image_size, int64_t channels,
                                const std::string& name, bool allow_flip);

struct SyntheticSpec {
    int64_t num_classes = 10;
    int64_t train_per_class = 200;
    int64_t test_per_class = 50;
    int64_t image_size = 32;
    int64_t channels = 1;
    uint64_t seed = 7;
};

// Deterministic class-structured images: each class has a coarse random
// prototype; samples are shifted, scaled and noised copies of it.
DatasetSplits make_synthetic(const SyntheticSpec& spec);

// Keeps the first `limit` samples of every class (index order). limit <= 0
// keeps everything.
Dataset subsample_per_class(const Dataset& data, int64_t limit);

// Fills mean/stddev from the dataset's own pixels.
void compute_channel_stats(Dataset& data);

}  // namespace cilforge
