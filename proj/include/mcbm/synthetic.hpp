// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcbm/manifest.hpp"
#include "mcbm/tensor.hpp"

namespace mcbm {

/// Planted-concept dataset: six binary concepts c and, with
/// l = c0 + c1 + c4 and r = c2 + c3 + c5, class y = 0 if l > r, 1 if l < r,
/// else 2;
/// features a = sum_k c_k s_k d_k + noise over unit directions d_k.
struct SyntheticConfig {
  int64_t num_samples = 600;
  int64_t feature_dim = 16;
  int64_t num_concepts = 6;
  double concept_prob = 0.5;
  double noise = 0.03;
  int64_t spatial_side = 2;
  int image_size = 16;
  double train_fraction = 0.6;
  double val_fraction = 0.2;
  uint64_t seed = 7;
};

inline constexpr int64_t kSyntheticClasses = 3;

int64_t synthetic_class(const std::vector<int>& concepts);

struct SyntheticData {
  Mat concepts;    // N x K bits
  Mat directions;  // K x n, unit rows
  Mat features;    // N x n
  Tensor spatial;  // N x S x S x n, sums to features over the grid
  std::vector<int64_t> labels;
  std::vector<Split> splits;
};

SyntheticData generate_synthetic(const SyntheticConfig& config);

std::vector<std::string> synthetic_concept_names();
std::vector<std::string> synthetic_class_names();

/// Writes a loadable manifest with tensors, images, a fitted black-box head,
/// a mock backend directory (names.json, oracle.npy), a word list and a
/// pipeline config tuned for the fixture's size.
void write_synthetic_fixture(const SyntheticConfig& config, const std::filesystem::path& dir);

}  // namespace mcbm
