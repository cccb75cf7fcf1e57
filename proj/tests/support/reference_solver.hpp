// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

// Independent full-batch solver for the elastic-net multinomial head, used
// only as a test oracle. Written with plain loops so it shares no code with
// the library solver.

#pragma once

#include <cstdint>
#include <vector>

#include "mcbm/tensor.hpp"

namespace mcbm::testing {

struct RefSolution {
  Mat weights;  // K x C
  Vec bias;     // C
  double objective = 0.0;
  int64_t iterations = 0;
  std::vector<double> trace;  // objective per accepted iterate
};

/// mean CE + lambda * ((1 - alpha) / 2 * ||W||^2 + alpha * ||W||_1).
double ref_objective(const Mat& x, const std::vector<int64_t>& y, const Mat& w, const Vec& b,
                     double lambda, double alpha);

/// Gradient of the mean cross-entropy only.
void ref_smooth_grad(const Mat& x, const std::vector<int64_t>& y, const Mat& w, const Vec& b,
                     Mat& gw, Vec& gb);

/// Monotone FISTA from zero with step 1/L, L = ||[X 1]||_2^2 / (2N) + lambda(1 - alpha).
/// Stops once the proximal-gradient mapping is at most `tol` in max norm.
RefSolution ref_fit(const Mat& x, const std::vector<int64_t>& y, int64_t num_classes,
                    double lambda, double alpha, int64_t max_iter = 200000, double tol = 1e-8);

/// Largest violation of the elastic-net optimality conditions at (W, b).
double kkt_residual(const Mat& x, const std::vector<int64_t>& y, const Mat& w, const Vec& b,
                    double lambda, double alpha);

std::vector<int64_t> ref_predict(const Mat& x, const Mat& w, const Vec& b);

}  // namespace mcbm::testing
