#pragma once

// Plot emission from persisted results: the accuracy-vs-phase curve (CSV and
// PNG), a confusion-matrix image per phase and Grad-CAM overlays.

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cilforge/evaluation.hpp"

namespace cilforge {

// phase,seen_classes,acc_overall,acc_ncm,forgetting_task0 with shortest
// round-trip doubles, so identical metrics give byte-identical files.
std::string accuracy_curve_csv(const MetricsLog& log);

// Writes the images of a run directory: accuracy_curve.{csv,png} at the top
// and phase{t}/confusion.png next to every phase{t}/confusion.csv. Reads only
// persisted files; throws StateError naming metrics.json when it is missing.
// Returns the files written.
std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& run_dir);

// Row-normalized confusion heat map.
void write_confusion_png(const std::filesystem::path& file, const Matrix& confusion);

// Line plot of the softmax and NCM accuracy per phase.
void write_accuracy_png(const std::filesystem::path& file, const MetricsLog& log);

// `image` is (C, H, W) uint8; `cam` is (g, g) in [0, 1], upsampled bilinearly
// and blended as a jet heat map.
void write_cam_overlay(const std::filesystem::path& file, const torch::Tensor& image, const torch::Tensor& cam);

// cam_phase{t}_class{c}_{idx}.png
std::string cam_file_name(int64_t phase, int64_t cls, int64_t idx);

}  // namespace cilforge
