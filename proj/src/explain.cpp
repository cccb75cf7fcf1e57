// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

namespace mcbm {

using nlohmann::json;

namespace {

int64_t argmax(const Vec& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

Vec head_row(const Vec& z, const Mat& w, const Vec& b) {
  Vec out(w.cols());
  for (Eigen::Index r = 0; r < w.cols(); ++r) {
    double acc = 0.0;
    for (Eigen::Index k = 0; k < w.rows(); ++k) acc += z[k] * w(k, r);
    out[r] = acc + b[r];
  }
  return out;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::vector<double> concept_contributions(const Vec& z, const Mat& weights, int64_t cls) {
  if (z.size() != weights.rows()) throw ContractError("contribution: logit width mismatch");
  if (cls < 0 || cls >= weights.cols()) throw ContractError("contribution: class out of range");
  std::vector<double> out(static_cast<size_t>(z.size()));
  for (Eigen::Index k = 0; k < z.size(); ++k) out[static_cast<size_t>(k)] = z[k] * weights(k, cls);
  return out;
}

LocalExplanation explain_logits(const Vec& z, const Mat& weights, const Vec& bias,
                                const std::vector<std::string>& names, std::optional<int64_t> cls,
                                int64_t top_k, int64_t sample) {
  if (static_cast<Eigen::Index>(names.size()) != weights.rows()) {
    throw ContractError("explain: one name per concept required");
  }
  LocalExplanation ex;
  ex.sample = sample;
  const Vec logits = head_row(z, weights, bias);
  ex.predicted = argmax(logits);
  ex.explained_class = cls.value_or(ex.predicted);
  const std::vector<double> contrib = concept_contributions(z, weights, ex.explained_class);
  ex.class_logit = logits[ex.explained_class];
  ex.bias = bias[ex.explained_class];

  std::vector<int64_t> order;
  double total = 0.0;
  for (size_t k = 0; k < contrib.size(); ++k) {
    total += std::abs(contrib[k]);
    if (contrib[k] != 0.0) order.push_back(static_cast<int64_t>(k));
  }
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return std::abs(contrib[static_cast<size_t>(a)]) > std::abs(contrib[static_cast<size_t>(b)]);
  });
  if (top_k >= 0 && static_cast<int64_t>(order.size()) > top_k) order.resize(static_cast<size_t>(top_k));
  double listed = 0.0;
  for (int64_t k : order) {
    Contribution c;
    c.concept_id = k;
    c.value = contrib[static_cast<size_t>(k)];
    c.negated = z[k] < 0.0;
    c.name = (c.negated ? "NOT " : "") + names[static_cast<size_t>(k)];
    listed += std::abs(c.value);
    ex.ranked.push_back(std::move(c));
  }
  ex.coverage = total > 0.0 ? listed / total : 0.0;
  return ex;
}

LocalExplanation local_explanation(const CbmModel& model, const ConceptSet& concepts,
                                   const Vec& features, std::optional<int64_t> cls, int64_t top_k,
                                   int64_t sample) {
  const Mat z = model.normalized_logits(features.transpose());
  return explain_logits(z.row(0).transpose(), model.head.weights, model.head.bias,
                        concepts.names(), cls, top_k, sample);
}

std::string explanation_json(const LocalExplanation& ex, const std::vector<std::string>& class_names) {
  json items = json::array();
  for (const Contribution& c : ex.ranked) {
    items.push_back({{"concept_id", c.concept_id},
                     {"name", c.name},
                     {"contribution", c.value},
                     {"negated", c.negated}});
  }
  auto cls_name = [&](int64_t r) {
    return r >= 0 && r < static_cast<int64_t>(class_names.size()) ? class_names[static_cast<size_t>(r)]
                                                                   : std::to_string(r);
  };
  const json j = {{"sample", ex.sample},
                  {"predicted", ex.predicted},
                  {"predicted_name", cls_name(ex.predicted)},
                  {"explained_class", ex.explained_class},
                  {"explained_name", cls_name(ex.explained_class)},
                  {"class_logit", ex.class_logit},
                  {"bias", ex.bias},
                  {"coverage", ex.coverage},
                  {"contributions", items}};
  return j.dump(2) + "\n";
}

std::string explanation_svg(const LocalExplanation& ex, const std::vector<std::string>& class_names) {
  constexpr int kRow = 22;
  constexpr int kLabel = 260;
  constexpr int kBar = 300;
  double peak = 0.0;
  for (const Contribution& c : ex.ranked) peak = std::max(peak, std::abs(c.value));
  const int height = 40 + kRow * static_cast<int>(ex.ranked.size());
  const int width = kLabel + 2 * kBar + 80;
  const int axis = kLabel + kBar;
  const std::string title =
      ex.explained_class >= 0 && ex.explained_class < static_cast<int64_t>(class_names.size())
          ? class_names[static_cast<size_t>(ex.explained_class)]
          : std::to_string(ex.explained_class);
  std::string svg;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" "
                "font-family=\"sans-serif\" font-size=\"12\">\n",
                width, height);
  svg += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"8\" y=\"18\" font-weight=\"bold\">sample %lld: %s (coverage %.2f)</text>\n",
                static_cast<long long>(ex.sample), xml_escape(title).c_str(), ex.coverage);
  svg += buf;
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%d\" y1=\"28\" x2=\"%d\" y2=\"%d\" stroke=\"#444\"/>\n", axis, axis,
                height - 4);
  svg += buf;
  for (size_t i = 0; i < ex.ranked.size(); ++i) {
    const Contribution& c = ex.ranked[i];
    const int y = 32 + kRow * static_cast<int>(i);
    const int len = peak > 0.0 ? static_cast<int>(std::lround(std::abs(c.value) / peak * kBar)) : 0;
    const int x = c.value >= 0.0 ? axis : axis - len;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%d\" y=\"%d\" text-anchor=\"end\">%s</text>\n"
                  "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"%s\"/>\n"
                  "<text x=\"%d\" y=\"%d\">%+.3f</text>\n",
                  kLabel - 8, y + 13, xml_escape(c.name).c_str(), x, y + 2, len, kRow - 6,
                  c.value >= 0.0 ? "#2b7bba" : "#d9534f", axis + kBar + 6, y + 13, c.value);
    svg += buf;
  }
  svg += "</svg>\n";
  return svg;
}

std::string global_sankey(const Mat& weights, const std::vector<std::string>& concept_names,
                          const std::vector<std::string>& class_names, double threshold,
                          const std::vector<int64_t>& classes) {
  if (static_cast<Eigen::Index>(concept_names.size()) != weights.rows() ||
      static_cast<Eigen::Index>(class_names.size()) != weights.cols()) {
    throw ContractError("global_sankey: name lists do not match the weight matrix");
  }
  std::vector<int64_t> cls = classes;
  if (cls.empty()) {
    cls.resize(static_cast<size_t>(weights.cols()));
    std::iota(cls.begin(), cls.end(), 0);
  }
  json nodes = json::array();
  json links = json::array();
  std::vector<bool> used(static_cast<size_t>(weights.rows()), false);
  for (int64_t r : cls) {
    if (r < 0 || r >= weights.cols()) throw ContractError("global_sankey: class out of range");
    for (Eigen::Index k = 0; k < weights.rows(); ++k) {
      const double w = weights(k, r);
      if (!(std::abs(w) > threshold)) continue;
      used[static_cast<size_t>(k)] = true;
      links.push_back({{"source", "concept:" + std::to_string(k)},
                       {"target", "class:" + std::to_string(r)},
                       {"value", std::abs(w)},
                       {"negated", w < 0.0},
                       {"label", (w < 0.0 ? "NOT " : "") + concept_names[static_cast<size_t>(k)]}});
    }
  }
  for (Eigen::Index k = 0; k < weights.rows(); ++k) {
    if (!used[static_cast<size_t>(k)]) continue;
    nodes.push_back({{"id", "concept:" + std::to_string(k)},
                     {"label", concept_names[static_cast<size_t>(k)]},
                     {"kind", "concept"}});
  }
  for (int64_t r : cls) {
    nodes.push_back({{"id", "class:" + std::to_string(r)},
                     {"label", class_names[static_cast<size_t>(r)]},
                     {"kind", "class"}});
  }
  return json{{"nodes", nodes}, {"links", links}, {"threshold", threshold}}.dump(2) + "\n";
}

std::pair<int64_t, int64_t> counterfactual_zero(const Vec& z, const Mat& weights, const Vec& bias,
                                                int64_t concept_id) {
  if (concept_id < 0 || concept_id >= z.size()) {
    throw ContractError("counterfactual_zero: concept out of range");
  }
  Vec edited = z;
  edited[concept_id] = 0.0;
  return {argmax(head_row(z, weights, bias)), argmax(head_row(edited, weights, bias))};
}

std::pair<int64_t, int64_t> counterfactual_zero(const CbmModel& model, const Vec& features,
                                                int64_t concept_id) {
  const Mat z = model.normalized_logits(features.transpose());
  return counterfactual_zero(z.row(0).transpose(), model.head.weights, model.head.bias,
                             concept_id);
}

std::vector<int64_t> top_activating(const Vec& column, int64_t k) {
  std::vector<int64_t> ids(static_cast<size_t>(column.size()));
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int64_t a, int64_t b) { return column[a] > column[b]; });
  ids.resize(static_cast<size_t>(std::clamp<int64_t>(k, 0, column.size())));
  return ids;
}

}  // namespace mcbm
