// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcbm/tensor.hpp"

namespace mcbm {

/// Mean per-class count of exactly-nonzero weights in a K x C matrix.
double nec(const Mat& head_weights);

enum class NccMode { kAllClasses, kPredictedClass };

/// Number of contributing concepts at coverage tau.
///
/// For each (sample, class) in scope the contributions |logit_k * W[k, r]|
/// are sorted descending (ties by lower k) and the shortest prefix covering
/// a tau fraction of their total is counted; the counts are averaged.
/// `predicted` is required for kPredictedClass (one class id per row).
double ncc(const Mat& logits, const Mat& head_weights, double tau,
           NccMode mode = NccMode::kAllClasses,
           std::span<const int64_t> predicted = {});

/// Coverage count for one contribution vector.
int64_t contributing_count(std::span<const double> contributions, double tau);

double accuracy(std::span<const int64_t> preds, std::span<const int64_t> labels);

/// Mean per-class recall over classes present in `labels`.
double balanced_accuracy(std::span<const int64_t> preds, std::span<const int64_t> labels);

std::vector<int64_t> argmax_rows(const Mat& scores);

/// Mann-Whitney AUC with ties counted one half. Throws ContractError if the
/// labels are single-class.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

enum class AucAggregate { kMacro, kWorstDecile };

struct ConceptAucReport {
  std::vector<int64_t> concept_ids;  // evaluated concepts
  std::vector<double> auc;           // parallel to concept_ids
  std::vector<int64_t> excluded;     // single-class concepts
  double macro = 0.0;
  double worst_decile = 0.0;
};

/// scores[k] and labels[k] hold concept k's evaluation points.
ConceptAucReport concept_roc_auc(const std::vector<std::vector<double>>& scores,
                                 const std::vector<std::vector<int>>& labels);

double aggregate(const ConceptAucReport& report, AucAggregate how);

struct ParamCounts {
  std::optional<int64_t> backbone;
  int64_t cbl = 0;
  int64_t head = 0;
  int64_t cbm = 0;
  std::optional<int64_t> total;
};

ParamCounts param_counts(std::optional<int64_t> backbone, int64_t n, int64_t k, int64_t c);

/// Millions with two decimals, e.g. "0.20".
std::string millions(int64_t count);

}  // namespace mcbm
