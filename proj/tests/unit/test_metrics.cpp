// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "mcbm/metrics.hpp"
#include "test_util.hpp"

using namespace mcbm;

namespace {

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0;
  double pairs = 0.0;
  for (size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

Mat sparse_weights(int64_t k, int64_t c, std::mt19937_64& rng, double density) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Mat w = testing::random_mat(k, c, rng);
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (u(rng) > density) w.data()[i] = 0.0;
  }
  return w;
}

Mat nonzero_logits(int64_t n, int64_t k, std::mt19937_64& rng) {
  Mat z = testing::random_mat(n, k, rng);
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    if (z.data()[i] == 0.0) z.data()[i] = 0.5;
  }
  return z;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("nec counts nonzero weights per class") {
    CHECK(nec(Mat::Zero(4, 3)) == 0.0);
    Mat w = Mat::Zero(5, 2);
    w(0, 0) = w(1, 0) = 1.0;
    w(0, 1) = w(2, 1) = w(3, 1) = -2.0;
    w(4, 1) = 1e-300;
    CHECK(nec(w) == 3.0);
    CHECK(nec(Mat::Ones(7, 4)) == 7.0);
  }

  TEST_CASE("contributing count prefix rule") {
    const double u[] = {0.5, 0.3, 0.1, 0.1};
    CHECK(contributing_count(u, 0.8) == 2);
    CHECK(contributing_count(u, 1.0) == 4);
    const double zero[] = {0.0, 0.0};
    CHECK(contributing_count(zero, 0.95) == 0);
    Mat z(1, 4);
    z << 0.5, 0.3, 0.1, 0.1;
    CHECK(ncc(z, Mat::Ones(4, 1), 0.8) == 2.0);
  }

  TEST_CASE("ncc at full coverage equals nec") {
    std::mt19937_64 rng(17);
    for (int t = 0; t < 200; ++t) {
      const int64_t k = 1 + static_cast<int64_t>(rng() % 12);
      const int64_t c = 1 + static_cast<int64_t>(rng() % 6);
      const Mat w = sparse_weights(k, c, rng, 0.5);
      const Mat z = nonzero_logits(1 + static_cast<int64_t>(rng() % 10), k, rng);
      CHECK(ncc(z, w, 1.0) == nec(w));
    }
  }

  TEST_CASE("ncc is monotone in tau, bounded by nec and scale invariant") {
    std::mt19937_64 rng(23);
    for (int t = 0; t < 100; ++t) {
      const Mat w = sparse_weights(10, 4, rng, 0.6);
      const Mat z = nonzero_logits(8, 10, rng);
      double prev = 0.0;
      for (double tau : {0.5, 0.8, 0.95, 1.0}) {
        const double v = ncc(z, w, tau);
        CHECK(v >= prev);
        CHECK(v <= nec(w));
        prev = v;
      }
      CHECK(ncc(3.7 * z, w, 0.95) == ncc(z, w, 0.95));
    }
  }

  TEST_CASE("ncc predicted-class mode") {
    std::mt19937_64 rng(29);
    const Mat w = sparse_weights(6, 1, rng, 0.7);
    const Mat z = nonzero_logits(5, 6, rng);
    const std::vector<int64_t> pred(5, 0);
    CHECK(ncc(z, w, 0.9, NccMode::kPredictedClass, pred) == ncc(z, w, 0.9));
    CHECK_THROWS_AS(ncc(z, w, 0.9, NccMode::kPredictedClass), ContractError);
  }

  TEST_CASE("accuracy and balanced accuracy") {
    const std::vector<int64_t> y = {0, 0, 0, 1};
    const std::vector<int64_t> p = {0, 0, 0, 0};
    CHECK(accuracy(p, y) == 0.75);
    CHECK(balanced_accuracy(p, y) == 0.5);
    CHECK(accuracy(y, y) == 1.0);
    CHECK(balanced_accuracy(y, y) == 1.0);
    const std::vector<int64_t> one = {2, 2, 2};
    const std::vector<int64_t> guess = {2, 1, 2};
    CHECK(balanced_accuracy(guess, one) == accuracy(guess, one));
    CHECK_THROWS(accuracy({}, {}));
  }

  TEST_CASE("roc auc examples") {
    const std::vector<int> y = {0, 1, 1, 0, 1};
    const std::vector<double> s = {0, 1, 1, 0, 1};
    CHECK(roc_auc(s, y) == 1.0);
    const std::vector<double> flat(5, 0.3);
    CHECK(roc_auc(flat, y) == 0.5);
    const std::vector<int> single = {1, 1};
    const std::vector<double> two = {0.1, 0.2};
    CHECK_THROWS_AS(roc_auc(two, single), ContractError);
  }

  TEST_CASE("roc auc equals brute-force pair counting") {
    std::mt19937_64 rng(31);
    std::uniform_int_distribution<int> level(0, 6);
    for (int t = 0; t < 100; ++t) {
      std::vector<double> s(30);
      std::vector<int> y(30);
      for (int i = 0; i < 30; ++i) {
        s[static_cast<size_t>(i)] = level(rng) * 0.25;
        y[static_cast<size_t>(i)] = static_cast<int>(rng() % 2);
      }
      y[0] = 0;
      y[1] = 1;
      CHECK(roc_auc(s, y) == brute_auc(s, y));
    }
  }

  TEST_CASE("concept auc excludes single-class concepts and is rank invariant") {
    std::vector<std::vector<double>> s = {{0.1, 0.9, 0.4, 0.3}, {1, 2, 3}, {0.5, 0.2}};
    std::vector<std::vector<int>> y = {{0, 1, 1, 0}, {1, 1, 1}, {1, 0}};
    const ConceptAucReport r = concept_roc_auc(s, y);
    CHECK(r.concept_ids == std::vector<int64_t>{0, 2});
    CHECK(r.excluded == std::vector<int64_t>{1});
    CHECK(r.macro == doctest::Approx((1.0 + 1.0) / 2.0));
    for (auto& v : s) {
      for (double& x : v) x = std::exp(3.0 * x) + 7.0;
    }
    CHECK(concept_roc_auc(s, y).auc == r.auc);
    CHECK(aggregate(r, AucAggregate::kMacro) == r.macro);
  }

  TEST_CASE("parameter counting") {
    const ParamCounts p = param_counts(std::nullopt, 512, 278, 200);
    CHECK(p.cbl == 512 * 278 + 278);
    CHECK(p.head == 278 * 200 + 200);
    CHECK(millions(p.cbm) == "0.20");
    CHECK_FALSE(p.total.has_value());
    const ParamCounts q = param_counts(1000, 4, 0, 3);
    CHECK(q.cbm == 3);
    CHECK(*q.total == 1003);
  }
}
