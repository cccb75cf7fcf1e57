// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mcbm/tensor.hpp"

namespace mcbm {

struct ConceptSet;

struct Annotation {
  int64_t sample = 0;
  int64_t concept_id = 0;
  int label = 0;  // 0 absent, 1 present

  bool operator==(const Annotation&) const = default;
};

/// Sparse ternary concept labels. Pairs not stored are unannotated (-1).
class AnnotationStore {
 public:
  /// Throws ValidationError on a duplicate (sample, concept) pair.
  void add(int64_t sample, int64_t concept_id, int label);

  bool empty() const { return labels_.empty(); }
  size_t size() const { return labels_.size(); }

  /// -1 when unannotated.
  int ternary(int64_t sample, int64_t concept_id) const;

  /// Triples ordered by (sample, concept).
  std::vector<Annotation> triples() const;

  /// Dense N x K view with -1 for unannotated pairs.
  Mat dense(int64_t num_samples, int64_t num_concepts) const;

  int64_t max_sample() const;
  int64_t max_concept() const;

  bool operator==(const AnnotationStore&) const = default;

 private:
  std::map<std::pair<int64_t, int64_t>, int> labels_;
};

/// One JSON object per line: {"sample": i, "concept": k, "label": 0|1}.
void save_annotations(const AnnotationStore& store, const std::filesystem::path& path);

/// When `concepts` is given, concept ids not in the set are rejected.
AnnotationStore load_annotations(const std::filesystem::path& path,
                                 const ConceptSet* concepts = nullptr,
                                 std::optional<int64_t> num_samples = std::nullopt);

}  // namespace mcbm
