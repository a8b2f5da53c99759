#include "cilforge/plots.hpp"

#include <charconv>
#include <fstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "cilforge/errors.hpp"

namespace cilforge {

namespace fs = std::filesystem;

namespace {

std::string shortest(double d) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, d);
    return std::string(buf, p);
}

void write_png(const fs::path& file, const cv::Mat& image) {
    if (!cv::imwrite(file.string(), image)) throw StateError("cannot write image " + file.string());
}

}  // namespace

std::string accuracy_curve_csv(const MetricsLog& log) {
    std::string out = "phase,seen_classes,acc_overall,acc_ncm,forgetting_task0\n";
    for (const auto& p : log.phases) {
        const double overall = p.acc_overall.total > 0 ? p.acc_overall.value() : p.overall_float.value_or(0.0);
        std::string forgetting;
        const auto& first = log.phases.front();
        if (!first.acc_per_task.empty() && !p.acc_per_task.empty()) {
            forgetting = shortest(forgetting_rate(first.acc_per_task.front(), p.acc_per_task.front()).value);
        }
        out += std::to_string(p.phase) + "," + std::to_string(p.seen_classes) + "," + shortest(overall) + "," +
               shortest(p.acc_ncm.value()) + "," + forgetting + "\n";
    }
    return out;
}

void write_accuracy_png(const fs::path& file, const MetricsLog& log) {
    const int width = 640;
    const int height = 420;
    const int left = 60;
    const int right = 20;
    const int top = 30;
    const int bottom = 50;
    cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
    const int pw = width - left - right;
    const int ph = height - top - bottom;
    cv::rectangle(img, {left, top}, {left + pw, top + ph}, cv::Scalar(0, 0, 0), 1);
    for (int k = 0; k <= 10; k += 2) {
        const int y = top + ph - ph * k / 10;
        cv::line(img, {left - 4, y}, {left + pw, y}, cv::Scalar(225, 225, 225), 1);
        cv::putText(img, shortest(k / 10.0), {8, y + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1);
    }
    const auto n = static_cast<int>(log.phases.size());
    auto x_of = [&](int i) { return n <= 1 ? left + pw / 2 : left + pw * i / (n - 1); };
    auto y_of = [&](double v) { return top + ph - static_cast<int>(std::lround(v * ph)); };
    for (int i = 0; i < n; ++i) {
        cv::putText(img, std::to_string(log.phases[static_cast<size_t>(i)].phase), {x_of(i) - 4, top + ph + 18},
                    cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1);
    }
    cv::putText(img, "phase", {left + pw / 2 - 20, height - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                cv::Scalar(0, 0, 0), 1);
    auto series = [&](bool ncm, const cv::Scalar& colour) {
        std::vector<cv::Point> pts;
        for (int i = 0; i < n; ++i) {
            const auto& p = log.phases[static_cast<size_t>(i)];
            const double v = ncm ? p.acc_ncm.value()
                                 : (p.acc_overall.total > 0 ? p.acc_overall.value() : p.overall_float.value_or(0.0));
            pts.emplace_back(x_of(i), y_of(v));
        }
        if (pts.size() > 1) cv::polylines(img, pts, false, colour, 2, cv::LINE_AA);
        for (const auto& pt : pts) cv::circle(img, pt, 4, colour, cv::FILLED, cv::LINE_AA);
    };
    series(true, cv::Scalar(40, 160, 40));
    series(false, cv::Scalar(200, 80, 20));
    cv::putText(img, "softmax", {left + 10, top + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(200, 80, 20), 1);
    cv::putText(img, "NCM", {left + 90, top + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(40, 160, 40), 1);
    cv::putText(img, "accuracy vs phase", {left + pw / 2 - 70, 20}, cv::FONT_HERSHEY_SIMPLEX, 0.5,
                cv::Scalar(0, 0, 0), 1);
    write_png(file, img);
}

void write_confusion_png(const fs::path& file, const Matrix& confusion) {
    const auto k = static_cast<int>(confusion.size());
    if (k == 0) throw InputError("write_confusion_png: empty matrix");
    const int cell = std::max(2, 400 / k);
    cv::Mat norm(k, k, CV_8UC1, cv::Scalar(0));
    for (int i = 0; i < k; ++i) {
        const auto& row = confusion[static_cast<size_t>(i)];
        if (static_cast<int>(row.size()) != k) throw InputError("write_confusion_png: matrix is not square");
        int64_t total = 0;
        for (auto v : row) total += v;
        for (int j = 0; j < k; ++j) {
            const double f = total > 0 ? static_cast<double>(row[static_cast<size_t>(j)]) / static_cast<double>(total)
                                       : 0.0;
            norm.at<uint8_t>(i, j) = static_cast<uint8_t>(std::lround(255.0 * f));
        }
    }
    cv::Mat big;
    cv::resize(norm, big, cv::Size(k * cell, k * cell), 0, 0, cv::INTER_NEAREST);
    cv::Mat colour;
    cv::applyColorMap(big, colour, cv::COLORMAP_VIRIDIS);
    write_png(file, colour);
}

void write_cam_overlay(const fs::path& file, const torch::Tensor& image, const torch::Tensor& cam) {
    if (image.dim() != 3 || cam.dim() != 2) throw InputError("write_cam_overlay: expected (C,H,W) image and (g,g) map");
    const auto c = image.size(0);
    const int h = static_cast<int>(image.size(1));
    const int w = static_cast<int>(image.size(2));
    auto hwc = image.to(torch::kU8).permute({1, 2, 0}).contiguous();
    cv::Mat base(h, w, c == 1 ? CV_8UC1 : CV_8UC3, hwc.data_ptr<uint8_t>());
    cv::Mat bgr;
    if (c == 1) {
        cv::cvtColor(base, bgr, cv::COLOR_GRAY2BGR);
    } else {
        cv::cvtColor(base, bgr, cv::COLOR_RGB2BGR);
    }
    auto map = (cam.detach().to(torch::kFloat).clamp(0.0, 1.0) * 255.0).round().to(torch::kU8).contiguous();
    cv::Mat small(static_cast<int>(map.size(0)), static_cast<int>(map.size(1)), CV_8UC1, map.data_ptr<uint8_t>());
    cv::Mat up;
    cv::resize(small, up, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);
    cv::Mat heat;
    cv::applyColorMap(up, heat, cv::COLORMAP_JET);
    cv::Mat blended;
    cv::addWeighted(bgr, 0.55, heat, 0.45, 0.0, blended);
    const int scale = std::max(1, 128 / std::max(h, w));
    cv::Mat out;
    cv::resize(blended, out, cv::Size(w * scale, h * scale), 0, 0, cv::INTER_NEAREST);
    write_png(file, out);
}

std::string cam_file_name(int64_t phase, int64_t cls, int64_t idx) {
    return "cam_phase" + std::to_string(phase) + "_class" + std::to_string(cls) + "_" + std::to_string(idx) + ".png";
}

std::vector<fs::path> emit_plots(const fs::path& run_dir) {
    const auto metrics_file = run_dir / "metrics.json";
    if (!fs::exists(metrics_file)) throw StateError("cannot plot: missing " + metrics_file.string());
    const auto log = load_metrics(metrics_file);
    std::vector<fs::path> written;
    {
        const auto csv = run_dir / "accuracy_curve.csv";
        std::ofstream out(csv, std::ios::binary);
        out << accuracy_curve_csv(log);
        written.push_back(csv);
    }
    write_accuracy_png(run_dir / "accuracy_curve.png", log);
    written.push_back(run_dir / "accuracy_curve.png");
    for (const auto& p : log.phases) {
        const auto dir = run_dir / ("phase" + std::to_string(p.phase));
        const auto csv = dir / "confusion.csv";
        if (!fs::exists(csv)) continue;
        write_confusion_png(dir / "confusion.png", read_confusion_csv(csv));
        written.push_back(dir / "confusion.png");
    }
    return written;
}

}  // namespace cilforge
