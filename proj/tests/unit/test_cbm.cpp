// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "gradcheck.hpp"
#include "mcbm/cbm.hpp"
#include "mcbm/metrics.hpp"
#include "reference_solver.hpp"
#include "test_util.hpp"

using namespace mcbm;
using mcbm::testing::ref_fit;
using mcbm::testing::kkt_residual;

namespace {

struct Problem {
  Mat x;
  std::vector<int64_t> y;
};

// Softmax labels with 30% uniform relabelling, so the classes overlap.
Problem random_problem(uint64_t seed, int64_t n = 50, int64_t k = 10, int64_t c = 3) {
  std::mt19937_64 rng(seed);
  Problem p;
  p.x = testing::random_mat(n, k, rng);
  const Mat w = testing::random_mat(k, c, rng, 0.6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    Vec z = (p.x.row(i) * w).transpose();
    z = (z.array() - z.maxCoeff()).exp();
    z /= z.sum();
    double draw = u(rng);
    int64_t label = c - 1;
    for (int64_t r = 0; r < c; ++r) {
      draw -= z[r];
      if (draw <= 0.0) {
        label = r;
        break;
      }
    }
    if (u(rng) < 0.3) label = static_cast<int64_t>(rng() % static_cast<uint64_t>(c));
    p.y.push_back(label);
  }
  for (int64_t r = 0; r < c; ++r) p.y[static_cast<size_t>(r)] = r;
  return p;
}

SolverConfig tight() {
  SolverConfig s;
  s.max_epochs = 20000;
  s.tol = 1e-14;
  s.seed = 3;
  return s;
}

}  // namespace

TEST_SUITE("cbl") {
  TEST_CASE("balanced concepts get unit weight and plain masked BCE") {
    AnnotationStore store;
    store.add(0, 0, 1);
    store.add(1, 0, 0);
    store.add(2, 1, 1);
    store.add(3, 1, 0);
    const CblTargets t = make_cbl_targets(store, 4, 2);
    CHECK(t.pos_weight == Vec::Ones(2));
    std::mt19937_64 rng(1);
    CblModel m{testing::random_mat(3, 2, rng), testing::random_vec(2, rng), {}};
    const Mat x = testing::random_mat(4, 3, rng);
    const Mat s = concept_logits(m, x);
    auto bce = [](double v, int y) {
      const double p = 1.0 / (1.0 + std::exp(-v));
      return y ? -std::log(p) : -std::log(1.0 - p);
    };
    const double expect = (bce(s(0, 0), 1) + bce(s(1, 0), 0) + bce(s(2, 1), 1) + bce(s(3, 1), 0)) / 4.0;
    CHECK(cbl_loss_and_grads(m, x, t, nullptr) == doctest::Approx(expect).epsilon(1e-12));
  }

  TEST_CASE("imbalance weight is negatives over positives") {
    AnnotationStore store;
    store.add(0, 0, 1);
    for (int i = 1; i < 4; ++i) store.add(i, 0, 0);
    CHECK(make_cbl_targets(store, 4, 1).pos_weight[0] == 3.0);
  }

  TEST_CASE("analytic CBL gradients match central differences") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      CAPTURE(seed);
      auto inst = testing::cbl_instance(seed, 5, 4, 7);
      CHECK(testing::cbl_gradcheck(inst) < 1e-4);
    }
  }

  TEST_CASE("unannotated labels are never read") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 50; ++t) {
      auto inst = testing::cbl_instance(1000 + t, 4, 3, 9);
      CblGrads g1;
      const double before = cbl_loss_and_grads(inst.model, inst.features, inst.targets, &g1);
      for (Eigen::Index i = 0; i < inst.targets.mask.rows(); ++i) {
        for (Eigen::Index k = 0; k < inst.targets.mask.cols(); ++k) {
          if (!inst.targets.mask(i, k)) {
            inst.targets.labels(i, k) = (t % 2) ? std::numeric_limits<double>::quiet_NaN()
                                                : static_cast<double>(rng() % 7);
          }
        }
      }
      CblGrads g2;
      const double after = cbl_loss_and_grads(inst.model, inst.features, inst.targets, &g2);
      CHECK(std::memcmp(&before, &after, sizeof(double)) == 0);
      CHECK(g1.weights == g2.weights);
    }
  }

  TEST_CASE("concept logits") {
    std::mt19937_64 rng(3);
    CblModel zero{Mat::Zero(4, 2), Vec(2), {}};
    zero.bias << 0.5, -1.5;
    const Mat out = concept_logits(zero, testing::random_mat(3, 4, rng));
    for (Eigen::Index i = 0; i < 3; ++i) CHECK(out.row(i) == zero.bias.transpose());
    CblModel m{testing::random_mat(3, 4, rng), testing::random_vec(4, rng), {}};
    const Mat x = testing::random_mat(2, 3, rng);
    const Mat s = concept_logits(m, x);
    for (int i = 0; i < 2; ++i) {
      for (int k = 0; k < 4; ++k) {
        double v = m.bias[k];
        for (int j = 0; j < 3; ++j) v += x(i, j) * m.weights(j, k);
        CHECK(s(i, k) == doctest::Approx(v).epsilon(1e-14));
      }
    }
    CHECK_THROWS_AS(concept_logits(m, testing::random_mat(2, 5, rng)), ContractError);
  }

  TEST_CASE("separable planted concepts are learned") {
    std::mt19937_64 rng(4);
    const Mat x = testing::random_mat(400, 6, rng);
    const Mat dirs = testing::random_mat(6, 3, rng);
    const Mat score = x * dirs;
    AnnotationStore store;
    for (int64_t i = 0; i < 400; ++i) {
      for (int64_t k = 0; k < 3; ++k) {
        if ((i + k) % 4 == 0) continue;
        store.add(i, k, score(i, k) > 0.0 ? 1 : 0);
      }
    }
    CblTrainConfig cfg;
    cfg.lr = 1e-2;
    cfg.epochs = 300;
    cfg.batch_size = 64;
    cfg.seed = 5;
    const CblTrainResult r = train_cbl(x, store, 3, cfg);
    CHECK(r.model.dropped.empty());
    const Mat test_x = testing::random_mat(500, 6, rng);
    const Mat truth = test_x * dirs;
    const Mat pred = concept_logits(r.model, test_x);
    for (Eigen::Index k = 0; k < 3; ++k) {
      int correct = 0;
      for (Eigen::Index i = 0; i < 500; ++i) correct += (pred(i, k) > 0) == (truth(i, k) > 0);
      CHECK(correct / 500.0 >= 0.95);
    }
  }

  TEST_CASE("single-class concepts are dropped and zeroed") {
    std::mt19937_64 rng(6);
    const Mat x = testing::random_mat(40, 3, rng);
    AnnotationStore store;
    for (int64_t i = 0; i < 40; ++i) {
      store.add(i, 0, static_cast<int>(i % 2));
      store.add(i, 1, 1);
    }
    CblTrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 8;
    const CblTrainResult r = train_cbl(x, store, 2, cfg);
    CHECK(r.model.dropped == std::vector<int64_t>{1});
    CHECK(r.model.weights.col(1).isZero());
    CHECK(r.model.bias[1] == 0.0);
    CHECK(r.warnings.size() == 1);
  }

  TEST_CASE("cbl round trips through disk") {
    testing::TempDir dir;
    std::mt19937_64 rng(7);
    CblModel m{testing::random_mat(3, 2, rng), testing::random_vec(2, rng), {1}};
    save_cbl(m, dir.path() / "cbl");
    const CblModel back = load_cbl(dir.path() / "cbl");
    CHECK(back.dropped == m.dropped);
    CHECK((back.weights - m.weights).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_SUITE("sparse head") {
  TEST_CASE("lambda at or above lambda_max gives an all-zero head predicting the prior") {
    const Problem p = random_problem(1);
    const double lmax = lambda_max(p.x, p.y, 3, 0.99);
    for (double scale : {1.0, 2.0, 10.0}) {
      const SparseHead h = fit_sparse_head(p.x, p.y, 3, scale * lmax, 0.99, tight());
      CHECK(h.weights.isZero());
      std::vector<int64_t> counts(3, 0);
      for (int64_t y : p.y) ++counts[static_cast<size_t>(y)];
      const int64_t prior = std::max_element(counts.begin(), counts.end()) - counts.begin();
      for (int64_t pred : argmax_rows(h.logits(p.x))) CHECK(pred == prior);
    }
  }

  TEST_CASE("unregularized fit separates a tiny separable set") {
    Mat x(6, 2);
    x << 2, 0, 3, 1, 0, 2, 1, 3, -2, -2, -3, -1;
    const std::vector<int64_t> y = {0, 0, 1, 1, 2, 2};
    SolverConfig cfg;
    cfg.max_epochs = 3000;
    cfg.tol = 0.0;
    const SparseHead h = fit_sparse_head(x, y, 3, 0.0, 0.99, cfg);
    CHECK(accuracy(argmax_rows(h.logits(x)), y) == 1.0);
    const auto ref = ref_fit(x, y, 3, 0.0, 0.99, 20000);
    CHECK(accuracy(testing::ref_predict(x, ref.weights, ref.bias), y) == 1.0);
  }

  TEST_CASE("objective agrees with an independent implementation") {
    std::mt19937_64 rng(8);
    const Problem p = random_problem(8);
    const Mat w = testing::random_mat(10, 3, rng);
    const Vec b = testing::random_vec(3, rng);
    CHECK(elastic_net_objective(p.x, p.y, w, b, 0.3, 0.7) ==
          doctest::Approx(testing::ref_objective(p.x, p.y, w, b, 0.3, 0.7)).epsilon(1e-12));
  }

  TEST_CASE("SAGA reaches the reference optimum and satisfies KKT") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      const Problem p = random_problem(100 + seed);
      const double lmax = lambda_max(p.x, p.y, 3, 0.99);
      for (double lambda : {0.0, 0.05 * lmax, lmax}) {
        CAPTURE(seed);
        CAPTURE(lambda);
        const auto ref = ref_fit(p.x, p.y, 3, lambda, 0.99);
        const SparseHead h = fit_sparse_head(p.x, p.y, 3, lambda, 0.99, tight());
        const double f = testing::ref_objective(p.x, p.y, h.weights, h.bias, lambda, 0.99);
        CHECK(f <= ref.objective + 1e-6);
        CHECK(std::abs(f - ref.objective) <= 1e-6);
        CHECK(kkt_residual(p.x, p.y, h.weights, h.bias, lambda, 0.99) <= 1e-4);
      }
    }
  }

  TEST_CASE("reference solver is monotone and shrinks the l1 norm as lambda grows") {
    const Problem p = random_problem(200);
    const double lmax = lambda_max(p.x, p.y, 3, 0.99);
    double prev_norm = std::numeric_limits<double>::infinity();
    for (double frac : {0.01, 0.03, 0.1, 0.3, 1.0}) {
      const auto ref = ref_fit(p.x, p.y, 3, frac * lmax, 0.99);
      for (size_t i = 1; i < ref.trace.size(); ++i) CHECK(ref.trace[i] <= ref.trace[i - 1]);
      const double norm = ref.weights.cwiseAbs().sum();
      CHECK(norm <= prev_norm + 1e-9);
      prev_norm = norm;
    }
  }

  TEST_CASE("excluded rows stay zero and warm starts are honoured") {
    const Problem p = random_problem(9);
    std::vector<bool> ex(10, false);
    ex[2] = ex[7] = true;
    const SparseHead h = fit_sparse_head(p.x, p.y, 3, 0.01, 0.99, tight(), nullptr, &ex);
    CHECK(h.weights.row(2).isZero());
    CHECK(h.weights.row(7).isZero());
    CHECK_FALSE(h.weights.isZero());
    SolverConfig one = tight();
    one.max_epochs = 1;
    const SparseHead warm = fit_sparse_head(p.x, p.y, 3, 0.01, 0.99, one, &h, &ex);
    CHECK(std::abs(warm.objective - h.objective) < 1e-8);
  }

  TEST_CASE("an oversized step is reported as divergence") {
    const Problem p = random_problem(10);
    SolverConfig cfg;
    cfg.step_scale = 500.0;
    cfg.max_epochs = 50;
    CHECK_THROWS_AS(fit_sparse_head(p.x, p.y, 3, 0.0, 0.99, cfg), NumericError);
  }

  TEST_CASE("head round trips through disk") {
    testing::TempDir dir;
    const Problem p = random_problem(11);
    SparseHead h = fit_sparse_head(p.x, p.y, 3, 0.01, 0.99, SolverConfig{});
    h.z_stats.mean = std::vector<double>(10, 0.25);
    h.z_stats.std = std::vector<double>(10, 2.0);
    save_head(h, dir.path() / "head");
    const SparseHead back = load_head(dir.path() / "head");
    CHECK(back.lambda == h.lambda);
    CHECK(back.z_stats.mean == h.z_stats.mean);
    CHECK((back.weights - h.weights).cwiseAbs().maxCoeff() < 1e-6);
    // float32 storage keeps exact zeros exact
    CHECK(nec(back.weights) == nec(h.weights));
  }
}

TEST_SUITE("sweep") {
  TEST_CASE("a single concept caps every achieved NCC at one") {
    std::mt19937_64 rng(12);
    Problem p = random_problem(12, 80, 1, 3);
    SweepConfig cfg;
    cfg.targets = {1, 5, 10};
    cfg.grid_points = 8;
    const SweepResult r = sweep_to_ncc(p.x, p.y, p.x, p.y, 3, cfg);
    CHECK(r.grid.size() == 8);
    for (const SweepPoint& g : r.grid) CHECK(g.ncc <= 1.0);
    CHECK(r.targets[0].status == TargetStatus::kHit);
    CHECK(r.targets[1].status == TargetStatus::kInfeasible);
    CHECK(r.targets[2].status == TargetStatus::kInfeasible);
    double sum = 0.0;
    for (const auto& t : r.targets) sum += t.point.accuracy;
    CHECK(r.avg_accuracy == doctest::Approx(sum / 3.0));
  }

  TEST_CASE("grid starts at lambda_max with an empty head") {
    const Problem p = random_problem(13, 120, 8, 3);
    SweepConfig cfg;
    cfg.targets = {2, 4};
    cfg.grid_points = 10;
    const SweepResult r = sweep_to_ncc(p.x, p.y, p.x, p.y, 3, cfg);
    CHECK(r.grid.front().lambda == r.lambda_max);
    CHECK(r.grid.front().nec == 0.0);
    CHECK(r.grid.back().lambda == doctest::Approx(r.lambda_max * 1e-4));
    for (const auto& t : r.targets) {
      if (t.status == TargetStatus::kHit) CHECK(std::abs(t.point.ncc - t.target) <= 0.25);
      CHECK(ncc(p.x, t.head.weights, 0.95) == doctest::Approx(t.point.ncc));
    }
  }

  TEST_CASE("targets must be ascending") {
    const Problem p = random_problem(14);
    SweepConfig cfg;
    cfg.targets = {5, 2};
    CHECK_THROWS_AS(sweep_to_ncc(p.x, p.y, p.x, p.y, 3, cfg), ContractError);
  }
}
