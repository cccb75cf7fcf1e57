// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcbm/sae.hpp"
#include "mcbm/tensor.hpp"

namespace mcbm {

/// Activation of a concept over all samples. A single neuron yields its raw
/// column; a merged group divides each member by its own dataset max
/// (members that never fire are skipped) and takes the elementwise max.
Vec concept_activation(const Mat& hidden, std::span<const int64_t> neuron_ids);
Vec concept_activation(const SAEParams& sae, const Mat& features,
                       std::span<const int64_t> neuron_ids);

inline constexpr int64_t kNamingActive = 10;
inline constexpr int64_t kNamingHalf = 5;

struct NamingExamples {
  int64_t concept_id = 0;
  std::vector<int64_t> activating;         // descending activation
  std::vector<int64_t> nonactive_random;
  std::vector<int64_t> nonactive_similar;  // descending similarity
};

/// nullopt when fewer than 10 active or 10 non-active samples exist.
std::optional<NamingExamples> select_naming_examples(const Vec& act, const Mat& features,
                                                     uint64_t seed, int64_t concept_id = 0);

/// ReLU of the decoder-row-weighted channel sum over an H x W x n map, then
/// min-max normalized to [0, 1]. A constant map becomes all zeros.
Tensor saliency_map(const Tensor& spatial, const Vec& decoder_row);

struct AnnotationPlan {
  int64_t concept_id = 0;
  std::vector<int64_t> active_ids;         // activation-descending
  std::vector<int64_t> nonactive_ids;      // similar and random interleaved
  std::vector<int64_t> nonactive_similar;
  std::vector<int64_t> nonactive_random;
  std::vector<std::vector<int64_t>> batches;
  std::vector<int64_t> reference_ids;      // top-25 of the active pool
  std::optional<std::string> skipped;      // reason, when no plan was made
  std::vector<std::string> warnings;
};

struct AnnotationSelectConfig {
  int64_t cap = 500;
  double percentile = 95.0;
};

/// Builds the annotation subset and the 25-image batches for one concept.
AnnotationPlan select_annotation_set(const Vec& act, std::span<const int64_t> labels,
                                     const Mat& features, uint64_t seed,
                                     int64_t concept_id = 0,
                                     const AnnotationSelectConfig& config = {});

/// Per-class quotas proportional to `class_counts`, summing to `total`, by
/// largest remainder (ties to the lower class id).
std::vector<int64_t> proportional_targets(std::span<const int64_t> class_counts, int64_t total);

std::string plan_to_json(const AnnotationPlan& plan);
AnnotationPlan plan_from_json(const std::string& text);
std::string naming_to_json(const NamingExamples& ex);
NamingExamples naming_from_json(const std::string& text);

}  // namespace mcbm
