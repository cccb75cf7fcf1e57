// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mcbm {

struct RandomNameConfig {
  std::filesystem::path word_list_path;
  std::string prefix = "bird ";
  int min_len = 3;
  int max_len = 8;
  uint64_t seed = 0;
};

/// Keeps lowercase alphabetic words within the length bounds, in file order,
/// without duplicates.
std::vector<std::string> filter_words(const std::vector<std::string>& words, int min_len,
                                      int max_len);
std::vector<std::string> read_word_list(const std::filesystem::path& path);

/// k seeded draws without replacement, each prefixed. Throws ValidationError
/// when fewer than k words survive filtering.
std::vector<std::string> random_concept_names(int64_t k, const std::vector<std::string>& words,
                                              const RandomNameConfig& config);
std::vector<std::string> random_concept_names(int64_t k, const RandomNameConfig& config);

struct CurvePoint {
  double target = 0.0;
  double ncc = 0.0;
  double accuracy = 0.0;
};

struct LeakageCurve {
  std::vector<CurvePoint> real;    // ascending NCC
  std::vector<CurvePoint> random;  // ascending NCC
  std::vector<std::pair<double, double>> gap;  // (target, real - random) at shared targets
};

LeakageCurve leakage_curve(std::vector<CurvePoint> real, std::vector<CurvePoint> random);
std::string curve_json(const LeakageCurve& curve);
/// Columns: series, ncc, accuracy.
std::string curve_csv(const LeakageCurve& curve);

}  // namespace mcbm
