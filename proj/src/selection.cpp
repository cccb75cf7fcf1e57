// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/selection.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include <json.hpp>

#include "mcbm/image.hpp"
#include "mcbm/numerics.hpp"

namespace mcbm {

using nlohmann::json;

namespace {

constexpr uint64_t kNamingStream = 0x4E414D45;      // "NAME"
constexpr uint64_t kAnnotateStream = 0x414E4E4F;    // "ANNO"
constexpr uint64_t kBatchStream = 0x42415443;       // "BATC"

int64_t floor25(int64_t x) { return x / kGridCells * kGridCells; }

// Ids sorted by value descending, ties to the lower id.
std::vector<int64_t> rank_desc(std::vector<int64_t> ids, const Vec& value) {
  std::stable_sort(ids.begin(), ids.end(), [&](int64_t a, int64_t b) {
    if (value[a] != value[b]) return value[a] > value[b];
    return a < b;
  });
  return ids;
}

Mat unit_rows(const Mat& x) {
  Mat out = x;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double norm = out.row(i).norm();
    if (norm > 0.0) out.row(i) /= norm;
  }
  return out;
}

// Max cosine similarity of each candidate to any of the anchors.
Vec max_similarity(const Mat& unit_features, std::span<const int64_t> candidates,
                   std::span<const int64_t> anchors) {
  Mat c(static_cast<Eigen::Index>(candidates.size()), unit_features.cols());
  Mat a(static_cast<Eigen::Index>(anchors.size()), unit_features.cols());
  for (size_t i = 0; i < candidates.size(); ++i) c.row(i) = unit_features.row(candidates[i]);
  for (size_t i = 0; i < anchors.size(); ++i) a.row(i) = unit_features.row(anchors[i]);
  Vec sim = Vec::Constant(unit_features.rows(), -2.0);
  if (candidates.empty() || anchors.empty()) return sim;
  const Mat dots = c * a.transpose();
  for (size_t i = 0; i < candidates.size(); ++i) sim[candidates[i]] = dots.row(i).maxCoeff();
  return sim;
}

// Picks `total` ids from `ranked` (preference order) with per-class quotas
// proportional to the class mix of `ranked`; shortfalls are backfilled in
// rank order. Result keeps rank order.
std::vector<int64_t> stratified_pick(const std::vector<int64_t>& ranked,
                                     std::span<const int64_t> labels, int64_t total) {
  std::map<int64_t, int64_t> counts;
  for (int64_t id : ranked) ++counts[labels[id]];
  std::vector<int64_t> class_ids;
  std::vector<int64_t> class_counts;
  for (const auto& [c, n] : counts) {
    class_ids.push_back(c);
    class_counts.push_back(n);
  }
  const std::vector<int64_t> targets = proportional_targets(class_counts, total);
  std::map<int64_t, int64_t> quota;
  for (size_t i = 0; i < class_ids.size(); ++i) quota[class_ids[i]] = targets[i];

  std::vector<bool> taken(ranked.size(), false);
  int64_t picked = 0;
  for (size_t i = 0; i < ranked.size() && picked < total; ++i) {
    int64_t& q = quota[labels[ranked[i]]];
    if (q > 0) {
      --q;
      taken[i] = true;
      ++picked;
    }
  }
  for (size_t i = 0; i < ranked.size() && picked < total; ++i) {
    if (!taken[i]) {
      taken[i] = true;
      ++picked;
    }
  }
  std::vector<int64_t> out;
  for (size_t i = 0; i < ranked.size(); ++i) {
    if (taken[i]) out.push_back(ranked[i]);
  }
  return out;
}

std::vector<int64_t> without(const std::vector<int64_t>& ids, const std::vector<int64_t>& drop) {
  const std::set<int64_t> d(drop.begin(), drop.end());
  std::vector<int64_t> out;
  for (int64_t id : ids) {
    if (!d.count(id)) out.push_back(id);
  }
  return out;
}

}  // namespace

Vec concept_activation(const Mat& hidden, std::span<const int64_t> neuron_ids) {
  if (neuron_ids.empty()) throw ContractError("concept_activation: empty neuron group");
  for (int64_t j : neuron_ids) {
    if (j < 0 || j >= hidden.cols()) {
      throw ContractError("concept_activation: neuron id " + std::to_string(j) + " out of range");
    }
  }
  if (neuron_ids.size() == 1) return hidden.col(neuron_ids[0]);
  Vec out = Vec::Zero(hidden.rows());
  for (int64_t j : neuron_ids) {
    const double peak = hidden.col(j).maxCoeff();
    if (peak <= 0.0) continue;
    out = out.cwiseMax(hidden.col(j) / peak);
  }
  return out;
}

Vec concept_activation(const SAEParams& sae, const Mat& features,
                       std::span<const int64_t> neuron_ids) {
  return concept_activation(sae_encode(sae, features), neuron_ids);
}

std::vector<int64_t> proportional_targets(std::span<const int64_t> class_counts, int64_t total) {
  int64_t sum = 0;
  for (int64_t c : class_counts) {
    if (c < 0) throw ContractError("proportional_targets: negative count");
    sum += c;
  }
  std::vector<int64_t> targets(class_counts.size(), 0);
  if (sum == 0 || total == 0) return targets;
  std::vector<std::pair<int64_t, size_t>> remainders;  // (numerator remainder, class)
  int64_t assigned = 0;
  for (size_t i = 0; i < class_counts.size(); ++i) {
    const int64_t num = class_counts[i] * total;
    targets[i] = num / sum;
    assigned += targets[i];
    remainders.emplace_back(num % sum, i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (size_t r = 0; assigned < total; ++r, ++assigned) ++targets[remainders[r].second];
  return targets;
}

std::optional<NamingExamples> select_naming_examples(const Vec& act, const Mat& features,
                                                     uint64_t seed, int64_t concept_id) {
  if (features.rows() != act.size()) {
    throw ContractError("select_naming_examples: activation and feature counts differ");
  }
  std::vector<int64_t> active;
  std::vector<int64_t> zeros;
  for (Eigen::Index i = 0; i < act.size(); ++i) {
    (act[i] > 0.0 ? active : zeros).push_back(i);
  }
  if (static_cast<int64_t>(active.size()) < kNamingActive ||
      static_cast<int64_t>(zeros.size()) < 2 * kNamingHalf) {
    return std::nullopt;
  }
  NamingExamples ex;
  ex.concept_id = concept_id;
  active = rank_desc(active, act);
  ex.activating.assign(active.begin(), active.begin() + kNamingActive);

  const Vec sim = max_similarity(unit_rows(features), zeros, ex.activating);
  const std::vector<int64_t> by_sim = rank_desc(zeros, sim);
  ex.nonactive_similar.assign(by_sim.begin(), by_sim.begin() + kNamingHalf);

  std::vector<int64_t> rest = without(zeros, ex.nonactive_similar);
  std::mt19937_64 rng(derive_seed(seed, kNamingStream ^ static_cast<uint64_t>(concept_id) << 32));
  std::shuffle(rest.begin(), rest.end(), rng);
  ex.nonactive_random.assign(rest.begin(), rest.begin() + kNamingHalf);
  return ex;
}

Tensor saliency_map(const Tensor& spatial, const Vec& decoder_row) {
  if (spatial.rank() != 3) throw ContractError("saliency_map expects an H x W x n tensor");
  const int64_t h = spatial.dim(0);
  const int64_t w = spatial.dim(1);
  const int64_t n = spatial.dim(2);
  if (decoder_row.size() != n) throw ContractError("saliency_map: decoder row width mismatch");
  std::vector<double> s(static_cast<size_t>(h * w), 0.0);
  for (int64_t p = 0; p < h * w; ++p) {
    double acc = 0.0;
    for (int64_t c = 0; c < n; ++c) acc += static_cast<double>(spatial[p * n + c]) * decoder_row[c];
    s[static_cast<size_t>(p)] = std::max(0.0, acc);
  }
  const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
  const double mn = *lo;
  const double mx = *hi;
  Tensor out({h, w});
  for (int64_t p = 0; p < h * w; ++p) {
    out[p] = mx > mn ? static_cast<float>((s[static_cast<size_t>(p)] - mn) / (mx - mn)) : 0.0f;
  }
  return out;
}

AnnotationPlan select_annotation_set(const Vec& act, std::span<const int64_t> labels,
                                     const Mat& features, uint64_t seed, int64_t concept_id,
                                     const AnnotationSelectConfig& config) {
  const int64_t n = act.size();
  if (static_cast<int64_t>(labels.size()) != n || features.rows() != n) {
    throw ContractError("select_annotation_set: activations, labels and features disagree on N");
  }
  AnnotationPlan plan;
  plan.concept_id = concept_id;

  std::vector<int64_t> pool;
  std::vector<int64_t> zeros;
  for (int64_t i = 0; i < n; ++i) (act[i] > 0.0 ? pool : zeros).push_back(i);
  pool = rank_desc(pool, act);
  plan.reference_ids.assign(pool.begin(),
                            pool.begin() + std::min<int64_t>(kGridCells, pool.size()));
  const int64_t pool_size = static_cast<int64_t>(pool.size());
  if (pool_size < kGridCells) {
    plan.skipped = "only " + std::to_string(pool_size) + " active samples, need 25";
    return plan;
  }

  const int64_t cap = floor25(config.cap);
  std::vector<int64_t> candidates = pool;
  int64_t m = floor25(pool_size);
  if (pool_size >= cap) {
    m = cap;
    std::vector<double> values;
    for (int64_t i : pool) values.push_back(act[i]);
    const double threshold = percentile(values, config.percentile);
    std::vector<int64_t> above;
    for (int64_t i : pool) {
      if (act[i] > threshold) above.push_back(i);
    }
    if (static_cast<int64_t>(above.size()) >= cap) candidates = above;
  }
  if (static_cast<int64_t>(zeros.size()) < m) {
    const int64_t shrunk = floor25(static_cast<int64_t>(zeros.size()));
    plan.warnings.push_back("only " + std::to_string(zeros.size()) +
                            " non-active samples; plan shrunk from " + std::to_string(m) +
                            " to " + std::to_string(shrunk) + " per side");
    m = shrunk;
  }
  if (m == 0) {
    plan.skipped = "fewer than 25 non-active samples";
    return plan;
  }

  plan.active_ids = stratified_pick(candidates, labels, m);

  const Vec sim = max_similarity(unit_rows(features), zeros, plan.active_ids);
  const int64_t n_similar = (m + 1) / 2;
  const int64_t n_random = m / 2;
  plan.nonactive_similar = stratified_pick(rank_desc(zeros, sim), labels, n_similar);
  std::vector<int64_t> rest = without(zeros, plan.nonactive_similar);
  std::mt19937_64 rng(derive_seed(seed, kAnnotateStream ^ static_cast<uint64_t>(concept_id) << 32));
  std::shuffle(rest.begin(), rest.end(), rng);
  plan.nonactive_random = stratified_pick(rest, labels, n_random);

  for (int64_t i = 0; i < n_similar; ++i) {
    plan.nonactive_ids.push_back(plan.nonactive_similar[static_cast<size_t>(i)]);
    if (i < n_random) plan.nonactive_ids.push_back(plan.nonactive_random[static_cast<size_t>(i)]);
  }

  size_t ai = 0;
  size_t ni = 0;
  for (int64_t b = 0; ai < plan.active_ids.size(); ++b) {
    const size_t na = b % 2 == 0 ? 13 : 12;
    std::vector<int64_t> batch(plan.active_ids.begin() + ai, plan.active_ids.begin() + ai + na);
    batch.insert(batch.end(), plan.nonactive_ids.begin() + ni,
                 plan.nonactive_ids.begin() + ni + (kGridCells - na));
    ai += na;
    ni += kGridCells - na;
    std::mt19937_64 brng(derive_seed(seed, kBatchStream ^ (static_cast<uint64_t>(concept_id) << 32) ^
                                               static_cast<uint64_t>(b)));
    std::shuffle(batch.begin(), batch.end(), brng);
    plan.batches.push_back(std::move(batch));
  }
  return plan;
}

std::string plan_to_json(const AnnotationPlan& plan) {
  json j = {{"concept_id", plan.concept_id},
            {"active_ids", plan.active_ids},
            {"nonactive_ids", plan.nonactive_ids},
            {"nonactive_similar", plan.nonactive_similar},
            {"nonactive_random", plan.nonactive_random},
            {"batches", plan.batches},
            {"reference_ids", plan.reference_ids},
            {"warnings", plan.warnings}};
  j["skipped"] = plan.skipped ? json(*plan.skipped) : json(nullptr);
  return j.dump(2) + "\n";
}

AnnotationPlan plan_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    AnnotationPlan plan;
    plan.concept_id = j.at("concept_id").get<int64_t>();
    plan.active_ids = j.at("active_ids").get<std::vector<int64_t>>();
    plan.nonactive_ids = j.at("nonactive_ids").get<std::vector<int64_t>>();
    plan.nonactive_similar = j.value("nonactive_similar", std::vector<int64_t>{});
    plan.nonactive_random = j.value("nonactive_random", std::vector<int64_t>{});
    plan.batches = j.at("batches").get<std::vector<std::vector<int64_t>>>();
    plan.reference_ids = j.at("reference_ids").get<std::vector<int64_t>>();
    plan.warnings = j.value("warnings", std::vector<std::string>{});
    if (j.contains("skipped") && !j["skipped"].is_null()) plan.skipped = j["skipped"].get<std::string>();
    for (const auto& batch : plan.batches) {
      if (batch.size() != static_cast<size_t>(kGridCells)) {
        throw ValidationError("annotation plan batch does not hold 25 ids");
      }
    }
    return plan;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed annotation plan: ") + e.what());
  }
}

std::string naming_to_json(const NamingExamples& ex) {
  const json j = {{"concept_id", ex.concept_id},
                  {"activating", ex.activating},
                  {"nonactive_random", ex.nonactive_random},
                  {"nonactive_similar", ex.nonactive_similar}};
  return j.dump(2) + "\n";
}

NamingExamples naming_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    NamingExamples ex;
    ex.concept_id = j.at("concept_id").get<int64_t>();
    ex.activating = j.at("activating").get<std::vector<int64_t>>();
    ex.nonactive_random = j.at("nonactive_random").get<std::vector<int64_t>>();
    ex.nonactive_similar = j.at("nonactive_similar").get<std::vector<int64_t>>();
    return ex;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed naming examples: ") + e.what());
  }
}

}  // namespace mcbm
