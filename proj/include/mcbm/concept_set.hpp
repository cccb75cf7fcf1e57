// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mcbm {

struct Concept {
  int64_t concept_id = 0;
  std::string name;
  std::vector<int64_t> neuron_ids;       // SAE hidden units, ascending
  std::vector<std::string> merged_from;  // names absorbed by merging

  bool operator==(const Concept&) const = default;
};

struct ConceptSet {
  std::vector<Concept> concepts;

  int64_t size() const { return static_cast<int64_t>(concepts.size()); }
  const Concept& at(int64_t concept_id) const;
  bool contains(int64_t concept_id) const;
  std::vector<std::string> names() const;

  /// Throws ValidationError on overlapping neuron ids, empty names or
  /// non-contiguous ids.
  void validate() const;

  bool operator==(const ConceptSet&) const = default;
};

void save_concept_set(const ConceptSet& set, const std::filesystem::path& path);
ConceptSet load_concept_set(const std::filesystem::path& path);

}  // namespace mcbm
