// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

// Central finite-difference checks shared by the unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "mcbm/cbm.hpp"
#include "mcbm/sae.hpp"
#include "test_util.hpp"

namespace mcbm::testing {

inline constexpr double kFdStep = 1e-3;

inline double rel_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-2});
  return std::abs(analytic - numeric) / scale;
}

/// Random SAE instance whose pre-activations stay clear of the ReLU kink by
/// more than the finite-difference perturbation can move them.
struct SaeInstance {
  SAEParams params;
  Mat batch;
  double lambda = 0.0;
};

inline SaeInstance sae_instance(uint64_t seed, int64_t n, int64_t m, int64_t b) {
  std::mt19937_64 rng(seed);
  for (;;) {
    SaeInstance s;
    s.params.encoder_weights = random_mat(n, m, rng, 0.7);
    s.params.encoder_bias = random_vec(m, rng, 0.3);
    s.params.decoder_weights = random_mat(m, n, rng, 0.7);
    s.params.decoder_bias = random_vec(n, rng, 0.3);
    s.batch = random_mat(b, n, rng);
    s.lambda = 0.05 + 0.2 * std::uniform_real_distribution<double>(0, 1)(rng);
    const Mat centered = s.batch.rowwise() - s.params.decoder_bias.transpose();
    Mat pre = centered * s.params.encoder_weights;
    pre.rowwise() += s.params.encoder_bias.transpose();
    if (pre.cwiseAbs().minCoeff() > 0.05) return s;
  }
}

/// Worst relative error over every parameter entry.
inline double sae_gradcheck(const SaeInstance& s) {
  SaeGrads g;
  sae_loss_and_grads(s.params, s.batch, s.lambda, &g);
  double worst = 0.0;
  auto probe = [&](auto& target, const auto& grad) {
    for (Eigen::Index i = 0; i < target.size(); ++i) {
      const double keep = target.data()[i];
      target.data()[i] = keep + kFdStep;
      const double up = sae_loss_and_grads(s.params, s.batch, s.lambda, nullptr).total;
      target.data()[i] = keep - kFdStep;
      const double down = sae_loss_and_grads(s.params, s.batch, s.lambda, nullptr).total;
      target.data()[i] = keep;
      worst = std::max(worst, rel_error(grad.data()[i], (up - down) / (2.0 * kFdStep)));
    }
  };
  SaeInstance& m = const_cast<SaeInstance&>(s);
  probe(m.params.encoder_weights, g.encoder_weights);
  probe(m.params.encoder_bias, g.encoder_bias);
  probe(m.params.decoder_weights, g.decoder_weights);
  probe(m.params.decoder_bias, g.decoder_bias);
  return worst;
}

struct CblInstance {
  CblModel model;
  Mat features;
  CblTargets targets;
};

inline CblInstance cbl_instance(uint64_t seed, int64_t n, int64_t k, int64_t rows) {
  std::mt19937_64 rng(seed);
  CblInstance c;
  c.model.weights = random_mat(n, k, rng, 0.5);
  c.model.bias = random_vec(k, rng, 0.5);
  c.features = random_mat(rows, n, rng);
  AnnotationStore store;
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < k; ++j) {
      if (rng() % 3 == 0) continue;
      store.add(i, j, static_cast<int>(rng() % 2));
    }
  }
  c.targets = make_cbl_targets(store, rows, k);
  return c;
}

inline double cbl_gradcheck(CblInstance& c) {
  CblGrads g;
  cbl_loss_and_grads(c.model, c.features, c.targets, &g);
  double worst = 0.0;
  auto probe = [&](auto& target, const auto& grad) {
    for (Eigen::Index i = 0; i < target.size(); ++i) {
      const double keep = target.data()[i];
      target.data()[i] = keep + kFdStep;
      const double up = cbl_loss_and_grads(c.model, c.features, c.targets, nullptr);
      target.data()[i] = keep - kFdStep;
      const double down = cbl_loss_and_grads(c.model, c.features, c.targets, nullptr);
      target.data()[i] = keep;
      worst = std::max(worst, rel_error(grad.data()[i], (up - down) / (2.0 * kFdStep)));
    }
  };
  probe(c.model.weights, g.weights);
  probe(c.model.bias, g.bias);
  return worst;
}

}  // namespace mcbm::testing
