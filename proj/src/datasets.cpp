#include "cilforge/datasets.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <random>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <zlib.h>

#include "cilforge/errors.hpp"

namespace cilforge {

namespace fs = std::filesystem;

namespace {

// Reads a whole file; gzip-compressed files are inflated transparently.
std::vector<uint8_t> read_maybe_gz(const fs::path& path) {
    gzFile file = gzopen(path.string().c_str(), "rb");
    if (file == nullptr) throw ConfigError("cannot open dataset file " + path.string());
    std::vector<uint8_t> out;
    std::array<uint8_t, 1 << 16> buf{};
    int n = 0;
    while ((n = gzread(file, buf.data(), static_cast<unsigned>(buf.size()))) > 0) {
        out.insert(out.end(), buf.begin(), buf.begin() + n);
    }
    gzclose(file);
    if (n < 0) throw ConfigError("failed reading dataset file " + path.string());
    return out;
}

fs::path find_idx(const fs::path& root, const std::string& stem) {
    for (const auto& candidate : {root / stem, root / (stem + ".gz"), root / "raw" / stem,
                                  root / "raw" / (stem + ".gz")}) {
        if (fs::exists(candidate)) return candidate;
    }
    throw ConfigError("MNIST file " + stem + " not found under " + root.string());
}

uint32_t be32(const std::vector<uint8_t>& b, size_t off) {
    return (uint32_t{b[off]} << 24) | (uint32_t{b[off + 1]} << 16) | (uint32_t{b[off + 2]} << 8) | b[off + 3];
}

Dataset read_mnist_split(const fs::path& root, const std::string& prefix) {
    auto img = read_maybe_gz(find_idx(root, prefix + "-images-idx3-ubyte"));
    auto lab = read_maybe_gz(find_idx(root, prefix + "-labels-idx1-ubyte"));
    if (img.size() < 16 || be32(img, 0) != 2051) throw ConfigError("bad MNIST image file under " + root.string());
    if (lab.size() < 8 || be32(lab, 0) != 2049) throw ConfigError("bad MNIST label file under " + root.string());
    const int64_t n = be32(img, 4);
    const int64_t rows = be32(img, 8);
    const int64_t cols = be32(img, 12);
    if (static_cast<int64_t>(be32(lab, 4)) != n || img.size() != static_cast<size_t>(16 + n * rows * cols)) {
        throw ConfigError("MNIST image/label counts disagree under " + root.string());
    }
    auto raw = torch::from_blob(img.data() + 16, {n, 1, rows, cols}, torch::kUInt8).clone();
    // Zero-pad 28x28 to 32x32 so the patch grid divides evenly.
    const int64_t pad_lo = (32 - rows) / 2;
    const int64_t pad_hi = 32 - rows - pad_lo;
    auto padded = torch::constant_pad_nd(raw, {pad_lo, pad_hi, pad_lo, pad_hi}, 0);
    std::vector<int64_t> labels(lab.begin() + 8, lab.end());

    Dataset d;
    d.name = "mnist";
    d.images = padded.contiguous();
    d.labels = torch::tensor(labels, torch::kLong);
    d.num_classes = 10;
    d.allow_flip = false;
    return d;
}

Dataset read_cifar_bin(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw ConfigError("CIFAR-100 file not found: " + file.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    constexpr int64_t record = 2 + 3072;
    if (bytes.empty() || bytes.size() % record != 0) throw ConfigError("bad CIFAR-100 file " + file.string());
    const int64_t n = static_cast<int64_t>(bytes.size()) / record;
    auto images = torch::empty({n, 3, 32, 32}, torch::kUInt8);
    std::vector<int64_t> labels(static_cast<size_t>(n));
    auto* dst = images.data_ptr<uint8_t>();
    for (int64_t i = 0; i < n; ++i) {
        const auto* rec = bytes.data() + i * record;
        labels[static_cast<size_t>(i)] = rec[1];
        std::copy(rec + 2, rec + record, dst + i * 3072);
    }
    Dataset d;
    d.name = "cifar100";
    d.images = images;
    d.labels = torch::tensor(labels, torch::kLong);
    d.num_classes = 100;
    d.allow_flip = true;
    return d;
}

torch::Tensor load_image(const fs::path& path, int64_t size, int64_t channels) {
    cv::Mat img = cv::imread(path.string(), channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
    if (img.empty()) throw ConfigError("cannot decode image " + path.string());
    const double scale = static_cast<double>(size) / std::min(img.rows, img.cols);
    cv::Mat resized;
    cv::resize(img, resized, cv::Size(), scale, scale, cv::INTER_AREA);
    const int x0 = (resized.cols - static_cast<int>(size)) / 2;
    const int y0 = (resized.rows - static_cast<int>(size)) / 2;
    cv::Mat crop = resized(cv::Rect(std::max(0, x0), std::max(0, y0), static_cast<int>(size), static_cast<int>(size))).clone();
    if (channels == 3) cv::cvtColor(crop, crop, cv::COLOR_BGR2RGB);
    auto t = torch::from_blob(crop.data, {size, size, channels}, torch::kUInt8).clone();
    return t.permute({2, 0, 1}).contiguous();
}

Dataset read_folder_split(const fs::path& dir, const std::vector<std::string>& classes, int64_t size,
                          int64_t channels) {
    std::vector<torch::Tensor> images;
    std::vector<int64_t> labels;
    for (size_t c = 0; c < classes.size(); ++c) {
        const auto class_dir = dir / classes[c];
        if (!fs::is_directory(class_dir)) continue;
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(class_dir)) {
            if (e.is_regular_file()) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            images.push_back(load_image(f, size, channels));
            labels.push_back(static_cast<int64_t>(c));
        }
    }
    if (images.empty()) throw ConfigError("no images found under " + dir.string());
    Dataset d;
    d.images = torch::stack(images);
    d.labels = torch::tensor(labels, torch::kLong);
    d.num_classes = static_cast<int64_t>(classes.size());
    return d;
}

}  // namespace

void compute_channel_stats(Dataset& data) {
    auto x = data.images.to(torch::kDouble).div(255.0).transpose(0, 1).flatten(1);
    auto mean = x.mean(1);
    auto sd = x.std(1).clamp_min(1e-6);
    data.mean.assign(mean.data_ptr<double>(), mean.data_ptr<double>() + mean.numel());
    data.stddev.assign(sd.data_ptr<double>(), sd.data_ptr<double>() + sd.numel());
}

DatasetSplits load_mnist(const fs::path& root) {
    DatasetSplits s{read_mnist_split(root, "train"), read_mnist_split(root, "t10k")};
    compute_channel_stats(s.train);
    s.test.mean = s.train.mean;
    s.test.stddev = s.train.stddev;
    return s;
}

DatasetSplits load_cifar100(const fs::path& root) {
    DatasetSplits s{read_cifar_bin(root / "train.bin"), read_cifar_bin(root / "test.bin")};
    compute_channel_stats(s.train);
    s.test.mean = s.train.mean;
    s.test.stddev = s.train.stddev;
    return s;
}

DatasetSplits load_image_folder(const fs::path& root, int64_t image_size, int64_t channels,
                                const std::string& name, bool allow_flip) {
    const auto train_dir = root / "train";
    auto test_dir = root / "test";
    if (!fs::is_directory(test_dir)) test_dir = root / "val";
    if (!fs::is_directory(train_dir) || !fs::is_directory(test_dir)) {
        throw ConfigError("image folder dataset needs train/ and test/ (or val/) under " + root.string());
    }
    std::vector<std::string> classes;
    for (const auto& e : fs::directory_iterator(train_dir)) {
        if (e.is_directory()) classes.push_back(e.path().filename().string());
    }
    std::sort(classes.begin(), classes.end());
    DatasetSplits s{read_folder_split(train_dir, classes, image_size, channels),
                    read_folder_split(test_dir, classes, image_size, channels)};
    for (auto* d : {&s.train, &s.test}) {
        d->name = name;
        d->allow_flip = allow_flip;
    }
    compute_channel_stats(s.train);
    s.test.mean = s.train.mean;
    s.test.stddev = s.train.stddev;
    return s;
}

DatasetSplits make_synthetic(const SyntheticSpec& spec) {
    if (spec.num_classes < 1 || spec.image_size < 8) throw ConfigError("synthetic: invalid spec");
    auto gen = at::make_generator<at::CPUGeneratorImpl>(spec.seed);
    const auto size = spec.image_size;
    // Coarse 4x4 prototypes, upsampled.
    auto coarse = torch::rand({spec.num_classes, spec.channels, 4, 4}, gen);
    auto protos = torch::nn::functional::interpolate(
        coarse, torch::nn::functional::InterpolateFuncOptions()
                    .size(std::vector<int64_t>{size, size})
                    .mode(torch::kBilinear)
                    .align_corners(false));

    auto make_split = [&](int64_t per_class) {
        const auto n = per_class * spec.num_classes;
        auto labels = torch::arange(spec.num_classes, torch::kLong).repeat_interleave(per_class);
        auto base = protos.index_select(0, labels);
        auto scale = 0.7 + 0.6 * torch::rand({n, 1, 1, 1}, gen);
        auto noise = 0.15 * torch::randn({n, spec.channels, size, size}, gen);
        auto imgs = base * scale + noise;
        auto shifts = torch::randint(-2, 3, {n, 2}, gen);
        std::vector<torch::Tensor> moved;
        for (int64_t i = 0; i < n; ++i) {
            moved.push_back(torch::roll(imgs[i], {shifts[i][0].item<int64_t>(), shifts[i][1].item<int64_t>()},
                                        {1, 2}));
        }
        Dataset d;
        d.name = "synthetic";
        d.images = (torch::stack(moved).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8);
        d.labels = labels;
        d.num_classes = spec.num_classes;
        d.allow_flip = false;
        return d;
    };
    DatasetSplits s{make_split(spec.train_per_class), make_split(spec.test_per_class)};
    compute_channel_stats(s.train);
    s.test.mean = s.train.mean;
    s.test.stddev = s.train.stddev;
    return s;
}

Dataset subsample_per_class(const Dataset& data, int64_t limit) {
    if (limit <= 0) return data;
    std::map<int64_t, int64_t> seen;
    std::vector<int64_t> keep;
    auto labels = data.labels.contiguous();
    const auto* lab = labels.data_ptr<int64_t>();
    for (int64_t i = 0; i < data.size(); ++i) {
        if (seen[lab[i]]++ < limit) keep.push_back(i);
    }
    auto idx = torch::tensor(keep, torch::kLong);
    Dataset out = data;
    out.images = data.images.index_select(0, idx).contiguous();
    out.labels = data.labels.index_select(0, idx).contiguous();
    return out;
}

}  // namespace cilforge
