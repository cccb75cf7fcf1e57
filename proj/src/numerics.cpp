// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mcbm {

AdamState AdamState::like(const Mat& params) {
  AdamState s;
  s.m1 = Mat::Zero(params.rows(), params.cols());
  s.m2 = Mat::Zero(params.rows(), params.cols());
  return s;
}

AdamState AdamState::like(const Vec& params) {
  AdamState s;
  s.m1 = Mat::Zero(params.size(), 1);
  s.m2 = Mat::Zero(params.size(), 1);
  return s;
}

namespace {

void adam_step(double* params, const double* grads, Eigen::Index size, AdamState& state,
               double lr) {
  ++state.step;
  if (std::all_of(grads, grads + size, [](double g) { return g == 0.0; })) return;

  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  double* m1 = state.m1.data();
  double* m2 = state.m2.data();
  for (Eigen::Index i = 0; i < size; ++i) {
    const double g = grads[i];
    m1[i] = b1 * m1[i] + (1.0 - b1) * g;
    m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
    const double m_hat = m1[i] / c1;
    const double v_hat = m2[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

}  // namespace

void adam_update(Mat& params, const Mat& grads, AdamState& state, double lr) {
  if (grads.rows() != params.rows() || grads.cols() != params.cols() ||
      state.m1.rows() != params.rows() || state.m1.cols() != params.cols() ||
      state.m2.rows() != params.rows() || state.m2.cols() != params.cols()) {
    throw ContractError("adam_update: parameter, gradient and moment shapes differ");
  }
  adam_step(params.data(), grads.data(), params.size(), state, lr);
}

void adam_update(Vec& params, const Vec& grads, AdamState& state, double lr) {
  if (grads.size() != params.size() || state.m1.size() != params.size() ||
      state.m2.size() != params.size()) {
    throw ContractError("adam_update: parameter, gradient and moment shapes differ");
  }
  adam_step(params.data(), grads.data(), params.size(), state, lr);
}

double softmax_cross_entropy(std::span<const double> logits, int64_t label) {
  if (label < 0 || label >= static_cast<int64_t>(logits.size())) {
    throw ContractError("softmax_cross_entropy: label " + std::to_string(label) +
                        " outside [0, " + std::to_string(logits.size()) + ")");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - mx);
  return std::log(sum) - (logits[static_cast<size_t>(label)] - mx);
}

double soft_threshold(double x, double t) {
  if (t < 0.0) throw ContractError("soft_threshold: negative threshold");
  if (x > t) return x - t;
  if (x < -t) return x + t;
  return 0.0;
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw ContractError("percentile of an empty set");
  if (p < 0.0 || p > 100.0) throw ContractError("percentile rank outside [0, 100]");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  auto rank = static_cast<int64_t>(std::ceil(p * n / 100.0));
  const int64_t idx = std::clamp<int64_t>(rank - 1, 0, static_cast<int64_t>(values.size()) - 1);
  return values[static_cast<size_t>(idx)];
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ContractError("cosine_similarity: length mismatch");
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw ContractError("cosine_similarity: zero vector");
  return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

Mat zscore_fit(const Mat& columns, ZStats& stats) {
  const auto n = columns.rows();
  if (n < 2) throw ContractError("zscore fit needs at least two rows");
  const auto k = columns.cols();
  stats.mean.assign(static_cast<size_t>(k), 0.0);
  stats.std.assign(static_cast<size_t>(k), 1.0);
  for (Eigen::Index j = 0; j < k; ++j) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) sum += columns(i, j);
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = columns(i, j) - mean;
      ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(n));
    stats.mean[static_cast<size_t>(j)] = mean;
    stats.std[static_cast<size_t>(j)] = sd < kDegenerateStd ? 1.0 : sd;
  }
  return zscore_apply(columns, stats);
}

Mat zscore_apply(const Mat& columns, const ZStats& stats) {
  const auto k = columns.cols();
  if (static_cast<Eigen::Index>(stats.mean.size()) != k ||
      static_cast<Eigen::Index>(stats.std.size()) != k) {
    throw ContractError("zscore apply: stats width does not match column count");
  }
  Mat out(columns.rows(), k);
  for (Eigen::Index i = 0; i < columns.rows(); ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      out(i, j) = (columns(i, j) - stats.mean[static_cast<size_t>(j)]) /
                  stats.std[static_cast<size_t>(j)];
    }
  }
  return out;
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace mcbm
