// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mcbm/cbm.hpp"
#include "mcbm/concept_set.hpp"
#include "mcbm/tensor.hpp"

namespace mcbm {

struct Contribution {
  int64_t concept_id = 0;
  std::string name;  // "NOT " prefixed when negated
  double value = 0.0;
  bool negated = false;  // the concept's normalized logit is negative
};

struct LocalExplanation {
  int64_t sample = 0;
  int64_t predicted = 0;
  int64_t explained_class = 0;
  double class_logit = 0.0;
  double bias = 0.0;
  std::vector<Contribution> ranked;  // by |value| descending, nonzero only
  double coverage = 0.0;
};

/// z_k * W[k, r] for every concept, in concept order.
std::vector<double> concept_contributions(const Vec& z, const Mat& weights, int64_t cls);

/// Explanation of class `cls` (default: the predicted class) for one row of
/// normalized concept logits.
LocalExplanation explain_logits(const Vec& z, const Mat& weights, const Vec& bias,
                                const std::vector<std::string>& names,
                                std::optional<int64_t> cls, int64_t top_k, int64_t sample = 0);

LocalExplanation local_explanation(const CbmModel& model, const ConceptSet& concepts,
                                   const Vec& features, std::optional<int64_t> cls,
                                   int64_t top_k, int64_t sample = 0);

std::string explanation_json(const LocalExplanation& ex, const std::vector<std::string>& class_names);
std::string explanation_svg(const LocalExplanation& ex, const std::vector<std::string>& class_names);

/// {nodes:[{id,label,kind}], links:[{source,target,value,negated}]} over
/// entries with |W| > threshold; `classes` restricts the class nodes.
std::string global_sankey(const Mat& weights, const std::vector<std::string>& concept_names,
                          const std::vector<std::string>& class_names, double threshold = 0.1,
                          const std::vector<int64_t>& classes = {});

/// Predictions before and after setting concept k's normalized logit to 0.
std::pair<int64_t, int64_t> counterfactual_zero(const Vec& z, const Mat& weights, const Vec& bias,
                                                int64_t concept_id);
std::pair<int64_t, int64_t> counterfactual_zero(const CbmModel& model, const Vec& features,
                                                int64_t concept_id);

/// The k largest entries, ties to the lower index; k is clamped to N.
std::vector<int64_t> top_activating(const Vec& column, int64_t k = 5);

}  // namespace mcbm
