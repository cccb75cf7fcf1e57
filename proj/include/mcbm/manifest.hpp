// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcbm/tensor.hpp"

namespace mcbm {

enum class Split { kTrain, kVal, kTest };

Split parse_split(const std::string& tag);
const char* split_name(Split s);

/// Everything needed to pin one experiment. Paths in the JSON file are
/// relative to the manifest's directory; after loading they are resolved.
struct DatasetManifest {
  std::filesystem::path root;  // directory containing the manifest file

  std::filesystem::path features_path;
  std::optional<std::filesystem::path> spatial_features_path;
  std::filesystem::path labels_path;
  std::filesystem::path head_weights_path;
  std::filesystem::path head_bias_path;
  std::vector<std::string> image_paths;  // as written (relative to root unless absolute)
  std::vector<Split> splits;
  std::vector<std::string> class_names;
  std::string domain;
  std::optional<int64_t> backbone_params;
  std::string preprocessing;

  // Cross-validated dimensions.
  int64_t num_samples = 0;   // N
  int64_t feature_dim = 0;   // n
  int64_t num_classes = 0;   // C
  int64_t spatial_h = 0;
  int64_t spatial_w = 0;

  bool saliency_available() const { return spatial_features_path.has_value(); }
  std::filesystem::path image_path(int64_t sample) const;
  std::vector<int64_t> indices(Split s) const;
};

/// Loads and cross-checks every referenced tensor header. Throws a
/// ValidationError listing all mismatches at once.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Writes the manifest JSON with paths relative to the manifest directory.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Backbone head used for the recovered-loss metrics: logits = x W + b.
struct LinearHead {
  Mat weights;  // n x C
  Vec bias;     // C
  Mat logits(const Mat& x) const;
};

struct Dataset {
  DatasetManifest manifest;
  Mat features;                 // N x n
  std::vector<int64_t> labels;  // N
  LinearHead head;

  Mat rows(std::span<const int64_t> ids) const;
  std::vector<int64_t> labels_of(std::span<const int64_t> ids) const;
};

Dataset load_dataset(const std::filesystem::path& manifest_path);

/// Reads selected leading-axis slices of a float NPY without loading the file.
Tensor read_rows(const std::filesystem::path& path, std::span<const int64_t> rows);

/// Spatial features of one sample as an H x W x n tensor.
Tensor spatial_features(const DatasetManifest& manifest, int64_t sample);

}  // namespace mcbm
