// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "reference_solver.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/SVD>

namespace mcbm::testing {

namespace {

std::vector<double> row_logits(const Mat& x, const Mat& w, const Vec& b, Eigen::Index i) {
  std::vector<double> z(static_cast<size_t>(w.cols()));
  for (Eigen::Index r = 0; r < w.cols(); ++r) {
    double s = b[r];
    for (Eigen::Index k = 0; k < w.rows(); ++k) s += x(i, k) * w(k, r);
    z[static_cast<size_t>(r)] = s;
  }
  return z;
}

double shrink(double v, double t) {
  if (v > t) return v - t;
  if (v < -t) return v + t;
  return 0.0;
}

}  // namespace

double ref_objective(const Mat& x, const std::vector<int64_t>& y, const Mat& w, const Vec& b,
                     double lambda, double alpha) {
  double ce = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const std::vector<double> z = row_logits(x, w, b, i);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    ce += mx + std::log(s) - z[static_cast<size_t>(y[static_cast<size_t>(i)])];
  }
  ce /= static_cast<double>(x.rows());
  double l1 = 0.0;
  double l2 = 0.0;
  for (Eigen::Index k = 0; k < w.rows(); ++k) {
    for (Eigen::Index r = 0; r < w.cols(); ++r) {
      l1 += std::abs(w(k, r));
      l2 += w(k, r) * w(k, r);
    }
  }
  return ce + lambda * (0.5 * (1.0 - alpha) * l2 + alpha * l1);
}

void ref_smooth_grad(const Mat& x, const std::vector<int64_t>& y, const Mat& w, const Vec& b,
                     Mat& gw, Vec& gb) {
  gw = Mat::Zero(w.rows(), w.cols());
  gb = Vec::Zero(w.cols());
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::vector<double> z = row_logits(x, w, b, i);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double& v : z) {
      v = std::exp(v - mx);
      s += v;
    }
    for (Eigen::Index r = 0; r < w.cols(); ++r) {
      double res = z[static_cast<size_t>(r)] / s;
      if (r == y[static_cast<size_t>(i)]) res -= 1.0;
      gb[r] += res * inv_n;
      for (Eigen::Index k = 0; k < w.rows(); ++k) gw(k, r) += x(i, k) * res * inv_n;
    }
  }
}

RefSolution ref_fit(const Mat& x, const std::vector<int64_t>& y, int64_t num_classes,
                    double lambda, double alpha, int64_t max_iter, double tol) {
  const Eigen::Index k = x.cols();
  const Eigen::Index c = num_classes;
  Eigen::MatrixXd aug(x.rows(), k + 1);
  aug.leftCols(k) = x;
  aug.col(k).setOnes();
  const double sigma = Eigen::JacobiSVD<Eigen::MatrixXd>(aug).singularValues()(0);
  const double lip = sigma * sigma / (2.0 * static_cast<double>(x.rows())) + lambda * (1.0 - alpha);
  const double step = 1.0 / lip;

  RefSolution sol;
  sol.weights = Mat::Zero(k, c);
  sol.bias = Vec::Zero(c);
  sol.objective = ref_objective(x, y, sol.weights, sol.bias, lambda, alpha);
  sol.trace.push_back(sol.objective);
  Mat yw = sol.weights;
  Vec yb = sol.bias;
  double t = 1.0;
  Mat gw;
  Vec gb;
  for (int64_t it = 0; it < max_iter; ++it) {
    ref_smooth_grad(x, y, yw, yb, gw, gb);
    Mat zw(k, c);
    for (Eigen::Index a = 0; a < k; ++a) {
      for (Eigen::Index r = 0; r < c; ++r) {
        const double v = yw(a, r) - step * (gw(a, r) + lambda * (1.0 - alpha) * yw(a, r));
        zw(a, r) = shrink(v, step * lambda * alpha);
      }
    }
    const Vec zb = yb - step * gb;
    const double fz = ref_objective(x, y, zw, zb, lambda, alpha);
    const Mat prev_w = sol.weights;
    const Vec prev_b = sol.bias;
    sol.iterations = it + 1;
    if (fz > sol.objective) {
      // A plain proximal step from the incumbent cannot increase the
      // objective in exact arithmetic, so this one failed to rounding.
      if (t == 1.0) break;
      // Monotone FISTA: reject the step and restart the momentum.
      sol.trace.push_back(sol.objective);
      yw = sol.weights;
      yb = sol.bias;
      t = 1.0;
      continue;
    }
    sol.weights = zw;
    sol.bias = zb;
    sol.objective = fz;
    sol.trace.push_back(fz);
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    yw = sol.weights + ((t - 1.0) / t_next) * (sol.weights - prev_w);
    yb = sol.bias + ((t - 1.0) / t_next) * (sol.bias - prev_b);
    t = t_next;
    if (it % 25 != 0) continue;
    // Stop on the proximal-gradient mapping, which is continuous in the
    // iterate unlike the sign-based KKT residual.
    Mat mw;
    Vec mb;
    ref_smooth_grad(x, y, sol.weights, sol.bias, mw, mb);
    double mapping = mb.cwiseAbs().maxCoeff();
    for (Eigen::Index a = 0; a < k; ++a) {
      for (Eigen::Index r = 0; r < c; ++r) {
        const double w = sol.weights(a, r);
        const double v = w - step * (mw(a, r) + lambda * (1.0 - alpha) * w);
        mapping = std::max(mapping, std::abs(w - shrink(v, step * lambda * alpha)) / step);
      }
    }
    if (mapping <= tol) break;
  }
  return sol;
}

double kkt_residual(const Mat& x, const std::vector<int64_t>& y, const Mat& w, const Vec& b,
                    double lambda, double alpha) {
  Mat gw;
  Vec gb;
  ref_smooth_grad(x, y, w, b, gw, gb);
  double worst = gb.cwiseAbs().maxCoeff();
  for (Eigen::Index a = 0; a < w.rows(); ++a) {
    for (Eigen::Index r = 0; r < w.cols(); ++r) {
      const double g = gw(a, r) + lambda * (1.0 - alpha) * w(a, r);
      double v;
      if (w(a, r) == 0.0) {
        v = std::max(0.0, std::abs(g) - lambda * alpha);
      } else {
        v = std::abs(g + lambda * alpha * (w(a, r) > 0 ? 1.0 : -1.0));
      }
      worst = std::max(worst, v);
    }
  }
  return worst;
}

std::vector<int64_t> ref_predict(const Mat& x, const Mat& w, const Vec& b) {
  std::vector<int64_t> out;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const std::vector<double> z = row_logits(x, w, b, i);
    out.push_back(std::max_element(z.begin(), z.end()) - z.begin());
  }
  return out;
}

}  // namespace mcbm::testing
