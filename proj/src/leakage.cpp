// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/leakage.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>
#include <regex>
#include <set>

#include <json.hpp>

#include "mcbm/error.hpp"
#include "mcbm/numerics.hpp"

namespace mcbm {

using nlohmann::json;

std::vector<std::string> filter_words(const std::vector<std::string>& words, int min_len,
                                      int max_len) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const std::string& w : words) {
    const int len = static_cast<int>(w.size());
    if (len < min_len || len > max_len) continue;
    if (!std::all_of(w.begin(), w.end(), [](char c) { return c >= 'a' && c <= 'z'; })) continue;
    if (seen.insert(w).second) out.push_back(w);
  }
  return out;
}

std::vector<std::string> read_word_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read word list " + path.string());
  std::vector<std::string> words;
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    words.push_back(line);
  }
  return words;
}

std::vector<std::string> random_concept_names(int64_t k, const std::vector<std::string>& words,
                                              const RandomNameConfig& config) {
  std::vector<std::string> pool = filter_words(words, config.min_len, config.max_len);
  if (static_cast<int64_t>(pool.size()) < k) {
    throw ValidationError("word list has " + std::to_string(pool.size()) +
                          " usable words, need " + std::to_string(k));
  }
  std::mt19937_64 rng(config.seed);
  std::vector<std::string> out;
  for (int64_t i = 0; i < k; ++i) {
    const size_t remaining = pool.size() - static_cast<size_t>(i);
    const size_t j = static_cast<size_t>(i) + static_cast<size_t>(rng() % remaining);
    std::swap(pool[static_cast<size_t>(i)], pool[j]);
    out.push_back(config.prefix + pool[static_cast<size_t>(i)]);
  }
  return out;
}

std::vector<std::string> random_concept_names(int64_t k, const RandomNameConfig& config) {
  return random_concept_names(k, read_word_list(config.word_list_path), config);
}

LeakageCurve leakage_curve(std::vector<CurvePoint> real, std::vector<CurvePoint> random) {
  auto by_ncc = [](const CurvePoint& a, const CurvePoint& b) {
    return a.ncc != b.ncc ? a.ncc < b.ncc : a.target < b.target;
  };
  std::stable_sort(real.begin(), real.end(), by_ncc);
  std::stable_sort(random.begin(), random.end(), by_ncc);
  LeakageCurve curve;
  for (const CurvePoint& r : real) {
    const auto it = std::find_if(random.begin(), random.end(),
                                 [&](const CurvePoint& q) { return q.target == r.target; });
    if (it != random.end()) curve.gap.emplace_back(r.target, r.accuracy - it->accuracy);
  }
  std::sort(curve.gap.begin(), curve.gap.end());
  curve.real = std::move(real);
  curve.random = std::move(random);
  return curve;
}

std::string curve_json(const LeakageCurve& curve) {
  auto series = [](const std::vector<CurvePoint>& pts) {
    json arr = json::array();
    for (const CurvePoint& p : pts) {
      arr.push_back({{"target", p.target}, {"ncc", p.ncc}, {"accuracy", p.accuracy}});
    }
    return arr;
  };
  json gap = json::array();
  for (const auto& [t, g] : curve.gap) gap.push_back({{"target", t}, {"gap", g}});
  return json{{"real", series(curve.real)}, {"random", series(curve.random)}, {"gap", gap}}.dump(2) +
         "\n";
}

std::string curve_csv(const LeakageCurve& curve) {
  std::string out = "series,ncc,accuracy\n";
  char buf[128];
  auto emit = [&](const char* name, const std::vector<CurvePoint>& pts) {
    for (const CurvePoint& p : pts) {
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f\n", name, p.ncc, p.accuracy);
      out += buf;
    }
  };
  emit("real", curve.real);
  emit("random", curve.random);
  return out;
}

}  // namespace mcbm
