// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <random>

#include <json.hpp>

#include "mcbm/error.hpp"
#include "mcbm/explain.hpp"
#include "mcbm/metrics.hpp"
#include "test_util.hpp"

using namespace mcbm;
using nlohmann::json;

namespace {

std::vector<std::string> names(int64_t k) {
  std::vector<std::string> out;
  for (int64_t i = 0; i < k; ++i) out.push_back("c" + std::to_string(i));
  return out;
}

}  // namespace

TEST_SUITE("explain") {
  TEST_CASE("contributions and bias add up to the class logit") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 50; ++t) {
      const Vec z = testing::random_vec(7, rng);
      const Mat w = testing::random_mat(7, 4, rng);
      const Vec b = testing::random_vec(4, rng);
      const LocalExplanation ex = explain_logits(z, w, b, names(7), std::nullopt, -1);
      double sum = ex.bias;
      for (const Contribution& c : ex.ranked) sum += c.value;
      CHECK(sum == doctest::Approx(ex.class_logit).epsilon(1e-12));
      const Vec logits = (z.transpose() * w).transpose() + b;
      Eigen::Index best = 0;
      logits.maxCoeff(&best);
      CHECK(ex.predicted == best);
      CHECK(ex.coverage == doctest::Approx(1.0));
      for (size_t i = 1; i < ex.ranked.size(); ++i) {
        CHECK(std::abs(ex.ranked[i - 1].value) >= std::abs(ex.ranked[i].value));
      }
    }
  }

  TEST_CASE("negated concepts are labelled") {
    Vec z(2);
    z << -2.0, 1.0;
    Mat w(2, 1);
    w << -1.0, 0.5;
    const LocalExplanation ex = explain_logits(z, w, Vec::Zero(1), {"crest", "bars"}, 0, 5);
    REQUIRE(ex.ranked.size() == 2);
    CHECK(ex.ranked[0].name == "NOT crest");
    CHECK(ex.ranked[0].value == 2.0);
    CHECK(ex.ranked[1].name == "bars");
  }

  TEST_CASE("zero logits explain nothing") {
    std::mt19937_64 rng(2);
    const LocalExplanation ex =
        explain_logits(Vec::Zero(4), testing::random_mat(4, 3, rng), Vec::Zero(3), names(4), 1, 5);
    CHECK(ex.ranked.empty());
    CHECK(ex.coverage == 0.0);
    CHECK(ex.explained_class == 1);
  }

  TEST_CASE("a single contribution has full coverage at top one") {
    Vec z(3);
    z << 0.0, 2.0, 0.0;
    Mat w = Mat::Zero(3, 2);
    w(1, 0) = 0.7;
    w(2, 0) = 5.0;
    const LocalExplanation ex = explain_logits(z, w, Vec::Zero(2), names(3), 0, 1);
    REQUIRE(ex.ranked.size() == 1);
    CHECK(ex.ranked[0].concept_id == 1);
    CHECK(ex.coverage == 1.0);
  }

  TEST_CASE("top lists of contributing-count length reach the coverage level") {
    std::mt19937_64 rng(3);
    const Mat z = testing::random_mat(200, 12, rng);
    const Mat w = testing::random_mat(12, 3, rng);
    const Vec b = Vec::Zero(3);
    double mean_cov = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const Vec zi = z.row(i).transpose();
      const LocalExplanation full = explain_logits(zi, w, b, names(12), std::nullopt, -1);
      std::vector<double> contrib = concept_contributions(zi, w, full.predicted);
      for (double& v : contrib) v = std::abs(v);
      const int64_t count = contributing_count(contrib, 0.95);
      const LocalExplanation top = explain_logits(zi, w, b, names(12), std::nullopt, count);
      CHECK(top.coverage >= 0.95 - 1e-12);
      mean_cov += top.coverage;
    }
    CHECK(mean_cov / 200.0 >= 0.95);
  }

  TEST_CASE("sankey keeps only weights above the threshold") {
    Mat w(3, 2);
    w << 0.5, 0.1,
         -0.2, 0.0,
         0.05, 0.11;
    const json j = json::parse(global_sankey(w, {"a", "b", "c"}, {"X", "Y"}));
    REQUIRE(j["links"].size() == 3);
    CHECK(j["links"][1]["negated"] == true);
    CHECK(j["links"][1]["label"] == "NOT b");
    CHECK(j["links"][2]["source"] == "concept:2");
    CHECK(j["nodes"].size() == 5);

    Mat single = Mat::Zero(2, 2);
    single(0, 1) = 0.5;
    const json s = json::parse(global_sankey(single, {"a", "b"}, {"X", "Y"}, 0.1, {1}));
    REQUIRE(s["links"].size() == 1);
    CHECK(s["links"][0]["value"] == 0.5);
    CHECK(s["links"][0]["target"] == "class:1");
    CHECK(s["nodes"].size() == 2);
    CHECK(json::parse(global_sankey(single, {"a", "b"}, {"X", "Y"}, 0.1, {0}))["links"].empty());
    CHECK_THROWS_AS(global_sankey(single, {"a"}, {"X", "Y"}), ContractError);
  }

  TEST_CASE("counterfactual concept removal") {
    Vec z(2);
    z << 3.0, 1.0;
    Mat w(2, 2);
    w << 1.0, 0.0,
         0.0, 2.0;
    Vec b = Vec::Zero(2);
    CHECK(counterfactual_zero(z, w, b, 0) == std::pair<int64_t, int64_t>{0, 1});
    CHECK(counterfactual_zero(z, w, b, 1) == std::pair<int64_t, int64_t>{0, 0});
    const Mat zero_w = Mat::Zero(2, 2);
    CHECK(counterfactual_zero(z, zero_w, b, 0).first == counterfactual_zero(z, zero_w, b, 0).second);
    Vec bias(2);
    bias << -1.0, 0.5;
    Vec one(2);
    one << 4.0, 0.0;
    CHECK(counterfactual_zero(one, w, bias, 0) == std::pair<int64_t, int64_t>{0, 1});
    CHECK_THROWS_AS(counterfactual_zero(z, w, b, 2), ContractError);
  }

  TEST_CASE("top activating") {
    Vec col(6);
    col << 0.1, 0.9, 0.5, 0.9, -1.0, 0.2;
    CHECK(top_activating(col, 3) == std::vector<int64_t>{1, 3, 2});
    CHECK(top_activating(col, 10).size() == 6);
    CHECK(top_activating(col, 0).empty());
  }

  TEST_CASE("renderings") {
    Vec z(2);
    z << 1.0, -1.0;
    Mat w(2, 2);
    w << 1.0, 0.0,
         0.5, 0.0;
    const LocalExplanation ex = explain_logits(z, w, Vec::Zero(2), {"a", "b"}, std::nullopt, 5, 9);
    const json j = json::parse(explanation_json(ex, {"X", "Y"}));
    CHECK(j["sample"] == 9);
    CHECK(j["contributions"].size() == 2);
    const std::string svg = explanation_svg(ex, {"X", "Y"});
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("NOT b") != std::string::npos);
  }
}
