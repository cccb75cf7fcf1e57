// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

namespace mcbm {

double nec(const Mat& w) {
  if (w.cols() == 0) return 0.0;
  int64_t nonzero = 0;
  for (Eigen::Index i = 0; i < w.size(); ++i) nonzero += w.data()[i] != 0.0;
  return static_cast<double>(nonzero) / static_cast<double>(w.cols());
}

int64_t contributing_count(std::span<const double> u, double tau) {
  std::vector<size_t> order(u.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return u[a] > u[b]; });

  int64_t nonzero = 0;
  double total = 0.0;
  for (size_t idx : order) {
    total += u[idx];
    nonzero += u[idx] > 0.0;
  }
  if (total == 0.0) return 0;
  // Full coverage needs every strictly positive term; decide it by counting
  // rather than by comparing sums, which can absorb tiny trailing terms.
  if (tau >= 1.0) return nonzero;
  // Relative slack keeps the comparison stable against summation rounding
  // (0.5 + 0.3 against 0.8 * 1.0, for instance).
  const double goal = tau * total * (1.0 - 1e-12);
  double prefix = 0.0;
  for (size_t s = 0; s < order.size(); ++s) {
    prefix += u[order[s]];
    if (prefix >= goal) return static_cast<int64_t>(s + 1);
  }
  return nonzero;
}

double ncc(const Mat& logits, const Mat& w, double tau, NccMode mode,
           std::span<const int64_t> predicted) {
  if (!(tau > 0.0 && tau <= 1.0)) throw ContractError("ncc: tau must lie in (0, 1]");
  if (logits.cols() != w.rows()) throw ContractError("ncc: logits width != weight rows");
  const auto n = logits.rows();
  const auto k = w.rows();
  const auto c = w.cols();
  if (mode == NccMode::kPredictedClass && static_cast<Eigen::Index>(predicted.size()) != n) {
    throw ContractError("ncc: predicted-class mode needs one prediction per row");
  }
  if (n == 0 || c == 0) return 0.0;
  std::vector<double> u(static_cast<size_t>(k));
  double sum = 0.0;
  int64_t scope = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index r = 0; r < c; ++r) {
      if (mode == NccMode::kPredictedClass && predicted[static_cast<size_t>(i)] != r) continue;
      for (Eigen::Index j = 0; j < k; ++j) u[static_cast<size_t>(j)] = std::abs(logits(i, j) * w(j, r));
      sum += static_cast<double>(contributing_count(u, tau));
      ++scope;
    }
  }
  return scope ? sum / static_cast<double>(scope) : 0.0;
}

double accuracy(std::span<const int64_t> preds, std::span<const int64_t> labels) {
  if (preds.size() != labels.size()) throw ContractError("accuracy: length mismatch");
  if (preds.empty()) throw ContractError("accuracy of an empty set");
  int64_t hit = 0;
  for (size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

double balanced_accuracy(std::span<const int64_t> preds, std::span<const int64_t> labels) {
  if (preds.size() != labels.size()) throw ContractError("balanced_accuracy: length mismatch");
  if (preds.empty()) throw ContractError("balanced accuracy of an empty set");
  std::map<int64_t, std::pair<int64_t, int64_t>> per_class;  // hits, support
  for (size_t i = 0; i < preds.size(); ++i) {
    auto& [hits, support] = per_class[labels[i]];
    ++support;
    hits += preds[i] == labels[i];
  }
  double sum = 0.0;
  for (const auto& [cls, hs] : per_class) {
    sum += static_cast<double>(hs.first) / static_cast<double>(hs.second);
  }
  return sum / static_cast<double>(per_class.size());
}

std::vector<int64_t> argmax_rows(const Mat& scores) {
  std::vector<int64_t> out(static_cast<size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < scores.cols(); ++j) {
      if (scores(i, j) > scores(i, best)) best = j;
    }
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ContractError("roc_auc: length mismatch");
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Average ranks (1-based) over tie groups.
  std::vector<double> rank(scores.size());
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (size_t t = i; t <= j; ++t) rank[order[t]] = avg;
    i = j + 1;
  }
  double rank_sum = 0.0;
  int64_t pos = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      rank_sum += rank[i];
      ++pos;
    }
  }
  const int64_t neg = static_cast<int64_t>(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw ContractError("roc_auc needs both positive and negative labels");
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

ConceptAucReport concept_roc_auc(const std::vector<std::vector<double>>& scores,
                                 const std::vector<std::vector<int>>& labels) {
  if (scores.size() != labels.size()) throw ContractError("concept_roc_auc: concept count mismatch");
  ConceptAucReport report;
  for (size_t k = 0; k < scores.size(); ++k) {
    const bool has_pos = std::find(labels[k].begin(), labels[k].end(), 1) != labels[k].end();
    const bool has_neg = std::find(labels[k].begin(), labels[k].end(), 0) != labels[k].end();
    if (!has_pos || !has_neg) {
      report.excluded.push_back(static_cast<int64_t>(k));
      continue;
    }
    report.concept_ids.push_back(static_cast<int64_t>(k));
    report.auc.push_back(roc_auc(scores[k], labels[k]));
  }
  if (!report.auc.empty()) {
    report.macro = std::accumulate(report.auc.begin(), report.auc.end(), 0.0) /
                   static_cast<double>(report.auc.size());
    std::vector<double> sorted = report.auc;
    std::sort(sorted.begin(), sorted.end());
    const size_t worst = (sorted.size() + 9) / 10;
    report.worst_decile =
        std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(worst), 0.0) /
        static_cast<double>(worst);
  }
  return report;
}

double aggregate(const ConceptAucReport& report, AucAggregate how) {
  return how == AucAggregate::kMacro ? report.macro : report.worst_decile;
}

ParamCounts param_counts(std::optional<int64_t> backbone, int64_t n, int64_t k, int64_t c) {
  ParamCounts p;
  p.backbone = backbone;
  p.cbl = n * k + k;
  p.head = k * c + c;
  p.cbm = p.cbl + p.head;
  if (backbone) p.total = *backbone + p.cbm;
  return p;
}

std::string millions(int64_t count) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", static_cast<double>(count) / 1e6);
  return buf;
}

}  // namespace mcbm
