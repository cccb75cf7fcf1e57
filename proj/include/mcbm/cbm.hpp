// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcbm/annotations.hpp"
#include "mcbm/numerics.hpp"
#include "mcbm/tensor.hpp"

namespace mcbm {

using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Linear concept bottleneck g(a) = a W + b.
struct CblModel {
  Mat weights;  // n x K
  Vec bias;     // K
  std::vector<int64_t> dropped;  // concept ids excluded for single-class labels

  int64_t num_concepts() const { return weights.cols(); }
};

/// Labels are read only where `mask` is true.
struct CblTargets {
  Mat labels;      // N x K, values in {0, 1} where masked
  Mask mask;       // N x K, the annotated set
  Vec pos_weight;  // K, multiplies positive terms
};

/// Dense view of a store restricted to `num_concepts`; pos_weight is
/// #neg / #pos per concept (1 where undefined).
CblTargets make_cbl_targets(const AnnotationStore& store, int64_t num_samples,
                            int64_t num_concepts);
Vec positive_weights(const CblTargets& targets);

struct CblGrads {
  Mat weights;
  Vec bias;
};

/// Mean over masked entries of w * BCE(sigmoid(g(a)), z), with the exact
/// gradient when `grads` is not null. Unmasked entries are never read.
double cbl_loss_and_grads(const CblModel& model, const Mat& features, const CblTargets& targets,
                          CblGrads* grads);

struct CblTrainConfig {
  double lr = 1e-3;
  int64_t epochs = 1000;
  int64_t patience = 50;
  int64_t batch_size = 256;
  double holdout = 0.1;
  uint64_t seed = 0;
};

struct CblTrainResult {
  CblModel model;
  std::vector<std::pair<double, double>> history;  // (train, holdout) loss per epoch
  int64_t best_epoch = 0;
  std::vector<std::string> warnings;
};

/// Adam on the masked, imbalance-weighted BCE with early stopping on a
/// seeded holdout of the annotated pairs.
CblTrainResult train_cbl(const Mat& features, const AnnotationStore& store, int64_t num_concepts,
                         const CblTrainConfig& config);

/// Raw pre-sigmoid outputs. Throws ContractError on a width mismatch.
Mat concept_logits(const CblModel& cbl, const Mat& features);

struct SolverConfig {
  int64_t max_epochs = 2000;
  double tol = 1e-7;          // relative objective change per epoch
  double step_scale = 0.3;    // eta = step_scale / L
  uint64_t seed = 0;
};

struct SparseHead {
  Mat weights;  // K x C
  Vec bias;     // C
  double lambda = 0.0;
  double alpha = 0.99;
  ZStats z_stats;
  int64_t epochs = 0;
  bool converged = false;
  double objective = 0.0;

  Mat logits(const Mat& z) const;
};

/// Mean softmax cross-entropy plus lambda * [(1 - alpha)/2 ||W||^2 + alpha ||W||_1].
double elastic_net_objective(const Mat& x, std::span<const int64_t> labels, const Mat& weights,
                             const Vec& bias, double lambda, double alpha);

/// Smallest lambda for which W = 0 is optimal.
double lambda_max(const Mat& x, std::span<const int64_t> labels, int64_t num_classes,
                  double alpha);

/// Proximal SAGA. `warm` seeds W and b; `excluded` rows of W stay zero.
/// Throws NumericError when the objective exceeds 10x its starting value.
SparseHead fit_sparse_head(const Mat& x, std::span<const int64_t> labels, int64_t num_classes,
                           double lambda, double alpha, const SolverConfig& config,
                           const SparseHead* warm = nullptr,
                           const std::vector<bool>* excluded = nullptr);

enum class TargetStatus { kHit, kNearest, kInfeasible };
const char* status_name(TargetStatus s);

struct SweepPoint {
  double lambda = 0.0;
  double ncc = 0.0;
  double accuracy = 0.0;
  double nec = 0.0;
};

struct TargetResult {
  double target = 0.0;
  TargetStatus status = TargetStatus::kInfeasible;
  SweepPoint point;
  SparseHead head;
  int64_t bisection_steps = 0;
};

struct SweepConfig {
  double tau = 0.95;
  std::vector<double> targets = {5, 10, 15, 20, 25, 30};
  int64_t grid_points = 25;
  double decades = 4.0;
  double tolerance = 0.25;
  int64_t max_bisections = 12;
  double alpha = 0.99;
  SolverConfig solver;
};

struct SweepResult {
  double lambda_max = 0.0;
  std::vector<SweepPoint> grid;
  std::vector<TargetResult> targets;
  double avg_accuracy = 0.0;  // mean over all targets
};

/// Fits along a descending, warm-started lambda grid on (x_fit, y_fit) and
/// bisects in log-lambda toward each NCC target measured on (x_eval, y_eval).
/// When several grid points lie within tolerance the smallest lambda wins.
SweepResult sweep_to_ncc(const Mat& x_fit, std::span<const int64_t> y_fit, const Mat& x_eval,
                         std::span<const int64_t> y_eval, int64_t num_classes,
                         const SweepConfig& config, const std::vector<bool>* excluded = nullptr);

struct CbmModel {
  CblModel cbl;
  SparseHead head;
  double tau = 0.95;

  /// z-normalized concept logits for backbone features.
  Mat normalized_logits(const Mat& features) const;
  Mat class_logits(const Mat& features) const;
};

void save_cbl(const CblModel& cbl, const std::filesystem::path& dir);
CblModel load_cbl(const std::filesystem::path& dir);
void save_head(const SparseHead& head, const std::filesystem::path& dir);
SparseHead load_head(const std::filesystem::path& dir);

}  // namespace mcbm
