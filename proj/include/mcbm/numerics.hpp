// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mcbm/tensor.hpp"

namespace mcbm {

/// Per-parameter Adam moments.
struct AdamState {
  int64_t step = 0;
  Mat m1;
  Mat m2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState like(const Mat& params);
  static AdamState like(const Vec& params);
};

/// One bias-corrected Adam step applied in place.
///
/// A gradient that is identically zero leaves both the parameters and the
/// moments untouched (only the step counter advances), so a parameter that
/// receives no signal stays fixed even when it carries momentum.
void adam_update(Mat& params, const Mat& grads, AdamState& state, double lr);
void adam_update(Vec& params, const Vec& grads, AdamState& state, double lr);

/// -log softmax(logits)[label], max-subtracted.
double softmax_cross_entropy(std::span<const double> logits, int64_t label);

/// sign(x) * max(|x| - t, 0).
double soft_threshold(double x, double t);

/// Nearest-rank percentile: element ceil(p/100 * n) - 1 of the sorted values.
double percentile(std::vector<double> values, double p);

double cosine_similarity(std::span<const double> u, std::span<const double> v);

struct ZStats {
  std::vector<double> mean;
  std::vector<double> std;
};

/// Columns with std below this are centred and left unscaled.
inline constexpr double kDegenerateStd = 1e-12;

/// Fits per-column mean / population std and returns the standardised matrix.
Mat zscore_fit(const Mat& columns, ZStats& stats);
Mat zscore_apply(const Mat& columns, const ZStats& stats);

/// Numerically stable log(1 + exp(x)).
double softplus(double x);

/// Independent, reproducible sub-stream seed (splitmix64 of seed and stream).
uint64_t derive_seed(uint64_t seed, uint64_t stream);
double sigmoid(double x);

}  // namespace mcbm
