// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mcbm/manifest.hpp"
#include "mcbm/tensor.hpp"

namespace mcbm {

/// Sparse autoencoder with a tied input/output bias:
///   h = ReLU(W_E^T (a - b_D) + b_E),  a_hat = W_D^T h + b_D.
struct SAEParams {
  Mat encoder_weights;  // W_E, n x m
  Vec encoder_bias;     // b_E, m
  Mat decoder_weights;  // W_D, m x n
  Vec decoder_bias;     // b_D, n

  int64_t input_dim() const { return encoder_weights.rows(); }
  int64_t hidden_dim() const { return encoder_weights.cols(); }
  double expansion() const {
    return static_cast<double>(hidden_dim()) / static_cast<double>(input_dim());
  }
  void check() const;
};

struct SaeTrainConfig {
  int64_t hidden_dim = 0;  // m; 0 means m = n
  double lambda_sae = 2e-3;
  double lr = 1e-4;
  int64_t epochs = 1000;
  int64_t patience = 50;
  int64_t batch_size = 256;
  uint64_t seed = 0;
};

struct SaeEpoch {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_recon_l2 = 0.0;
  double val_avg_l0 = 0.0;
};

struct SaeTrainResult {
  SAEParams params;  // best validation loss
  std::vector<SaeEpoch> history;
  int64_t best_epoch = 0;  // 1-based, matches SaeEpoch::epoch
  bool early_stopped = false;
};

struct SaeForward {
  Mat hidden;          // B x m, entrywise >= 0
  Mat reconstruction;  // B x n
};

struct SaeLoss {
  double total = 0.0;
  double recon = 0.0;    // mean squared l2 reconstruction error
  double penalty = 0.0;  // lambda * mean l1 of h
};

struct SaeGrads {
  Mat encoder_weights;
  Vec encoder_bias;
  Mat decoder_weights;
  Vec decoder_bias;
};

/// Uniform(-1/sqrt(n), 1/sqrt(n)) weights, zero biases, unit-norm decoder rows.
SAEParams init_sae(int64_t n, int64_t m, uint64_t seed);

Mat sae_encode(const SAEParams& params, const Mat& a);
SaeForward sae_forward(const SAEParams& params, const Mat& a);

/// Batch-mean of ||a - a_hat||^2 + lambda ||h||_1 and, when `grads` is not
/// null, its exact gradient (ReLU subgradient 0 at 0).
SaeLoss sae_loss_and_grads(const SAEParams& params, const Mat& batch, double lambda_sae,
                           SaeGrads* grads);

/// Minibatch Adam with early stopping on validation loss. Throws NumericError
/// on a non-finite loss.
SaeTrainResult train_sae(const Mat& train, const Mat& val, const SaeTrainConfig& config);

struct SAEMetrics {
  double recon_l2 = 0.0;
  double avg_l0 = 0.0;
  double recovered_loss = 0.0;
  double recovered_accuracy = 0.0;
  double recovered_balanced_accuracy = 0.0;
  double loss_original = 0.0;        // L_BB(a)
  double loss_reconstructed = 0.0;   // L_BB(a_hat)
  double loss_zero = 0.0;            // L_BB(0)
};

/// Mean softmax cross-entropy of head(x) against labels.
double black_box_loss(const LinearHead& head, const Mat& x, std::span<const int64_t> labels);

/// Recovered loss / accuracy of a reconstruction. Throws ValidationError when
/// L_BB(0) == L_BB(a).
SAEMetrics recovered_metrics(const Mat& a, const Mat& a_hat, std::span<const int64_t> labels,
                             const LinearHead& head);

/// Full metric set; `keep` (length m) zeroes the hidden units it marks false.
SAEMetrics sae_metrics(const SAEParams& params, const Mat& features,
                       std::span<const int64_t> labels, const LinearHead& head,
                       const std::vector<bool>* keep = nullptr);

struct DensityHistogram {
  int64_t num_samples = 0;
  std::vector<int64_t> counts;      // per hidden unit
  std::vector<double> bin_edges;    // log10((count + 1) / N)
  std::vector<int64_t> bin_counts;
  int64_t dead = 0;
};

DensityHistogram density_histogram(const SAEParams& params, const Mat& features_train,
                                   int64_t bins = 20);

struct CutoffPoint {
  int64_t cutoff = 0;
  int64_t kept = 0;
  double recovered_loss = 0.0;
};

struct PruneResult {
  std::vector<int64_t> kept_neurons;  // count > cutoff, ascending
  int64_t cutoff = 0;
  double unpruned_recovered_loss = 0.0;
  double pruned_recovered_loss = 0.0;
  std::vector<CutoffPoint> sweep;
};

/// Chooses the largest activation-count cutoff whose masked recovered loss
/// stays within `tolerance` of the unpruned value. `counts` come from the
/// training set; recovered loss is measured on (features, labels).
PruneResult prune(const SAEParams& params, std::span<const int64_t> counts, const Mat& features,
                  std::span<const int64_t> labels, const LinearHead& head,
                  double tolerance = 0.01);

void save_sae(const SAEParams& params, const std::filesystem::path& dir);
SAEParams load_sae(const std::filesystem::path& dir);

}  // namespace mcbm
