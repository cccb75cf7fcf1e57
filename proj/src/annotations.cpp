// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/annotations.hpp"

#include <fstream>
#include <set>

#include "json.hpp"
#include "mcbm/concept_set.hpp"

namespace mcbm {

namespace fs = std::filesystem;
using nlohmann::json;

void AnnotationStore::add(int64_t sample, int64_t concept_id, int label) {
  if (sample < 0 || concept_id < 0) throw ValidationError("negative annotation index");
  if (label != 0 && label != 1) throw ValidationError("annotation label must be 0 or 1");
  const auto [it, inserted] = labels_.emplace(std::make_pair(sample, concept_id), label);
  if (!inserted) {
    throw ValidationError("duplicate annotation for sample " + std::to_string(sample) +
                          ", concept " + std::to_string(concept_id));
  }
}

int AnnotationStore::ternary(int64_t sample, int64_t concept_id) const {
  const auto it = labels_.find({sample, concept_id});
  return it == labels_.end() ? -1 : it->second;
}

std::vector<Annotation> AnnotationStore::triples() const {
  std::vector<Annotation> out;
  out.reserve(labels_.size());
  for (const auto& [key, label] : labels_) out.push_back({key.first, key.second, label});
  return out;
}

Mat AnnotationStore::dense(int64_t num_samples, int64_t num_concepts) const {
  Mat z = Mat::Constant(num_samples, num_concepts, -1.0);
  for (const auto& [key, label] : labels_) {
    if (key.first >= num_samples || key.second >= num_concepts) {
      throw ContractError("annotation index outside dense view");
    }
    z(key.first, key.second) = label;
  }
  return z;
}

int64_t AnnotationStore::max_sample() const {
  int64_t mx = -1;
  for (const auto& [key, label] : labels_) mx = std::max(mx, key.first);
  return mx;
}

int64_t AnnotationStore::max_concept() const {
  int64_t mx = -1;
  for (const auto& [key, label] : labels_) mx = std::max(mx, key.second);
  return mx;
}

void save_annotations(const AnnotationStore& store, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  for (const Annotation& a : store.triples()) {
    json j = {{"sample", a.sample}, {"concept", a.concept_id}, {"label", a.label}};
    out << j.dump() << '\n';
  }
}

AnnotationStore load_annotations(const fs::path& path, const ConceptSet* concepts,
                                 std::optional<int64_t> num_samples) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  AnnotationStore store;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("sample") || !j.contains("concept") ||
        !j.contains("label") || !j["sample"].is_number_integer() ||
        !j["concept"].is_number_integer() || !j["label"].is_number_integer()) {
      throw ValidationError(where + ": expected {\"sample\": int, \"concept\": int, \"label\": 0|1}");
    }
    const auto sample = j["sample"].get<int64_t>();
    const auto concept_id = j["concept"].get<int64_t>();
    const auto label = j["label"].get<int>();
    if (concepts && !concepts->contains(concept_id)) {
      throw ValidationError(where + ": unknown concept id " + std::to_string(concept_id));
    }
    if (num_samples && (sample < 0 || sample >= *num_samples)) {
      throw ValidationError(where + ": sample " + std::to_string(sample) + " out of range");
    }
    try {
      store.add(sample, concept_id, label);
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  return store;
}

const Concept& ConceptSet::at(int64_t concept_id) const {
  if (!contains(concept_id)) throw ContractError("unknown concept id " + std::to_string(concept_id));
  return concepts[static_cast<size_t>(concept_id)];
}

bool ConceptSet::contains(int64_t concept_id) const {
  return concept_id >= 0 && concept_id < size();
}

std::vector<std::string> ConceptSet::names() const {
  std::vector<std::string> out;
  for (const auto& c : concepts) out.push_back(c.name);
  return out;
}

void ConceptSet::validate() const {
  std::set<int64_t> seen;
  for (size_t i = 0; i < concepts.size(); ++i) {
    const Concept& c = concepts[i];
    if (c.concept_id != static_cast<int64_t>(i)) {
      throw ValidationError("concept ids must be 0..K-1 in order; found " +
                            std::to_string(c.concept_id) + " at position " + std::to_string(i));
    }
    if (c.name.empty()) throw ValidationError("concept " + std::to_string(i) + " has an empty name");
    if (c.neuron_ids.empty()) {
      throw ValidationError("concept " + std::to_string(i) + " owns no SAE neurons");
    }
    for (int64_t n : c.neuron_ids) {
      if (!seen.insert(n).second) {
        throw ValidationError("SAE neuron " + std::to_string(n) + " belongs to two concepts");
      }
    }
  }
}

void save_concept_set(const ConceptSet& set, const fs::path& path) {
  json arr = json::array();
  for (const auto& c : set.concepts) {
    arr.push_back({{"concept_id", c.concept_id},
                   {"name", c.name},
                   {"neuron_ids", c.neuron_ids},
                   {"merged_from", c.merged_from}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << json{{"concepts", arr}}.dump(2) << '\n';
}

ConceptSet load_concept_set(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  ConceptSet set;
  try {
    const json j = json::parse(in);
    for (const auto& c : j.at("concepts")) {
      Concept concept_entry;
      concept_entry.concept_id = c.at("concept_id").get<int64_t>();
      concept_entry.name = c.at("name").get<std::string>();
      concept_entry.neuron_ids = c.at("neuron_ids").get<std::vector<int64_t>>();
      concept_entry.merged_from = c.value("merged_from", std::vector<std::string>{});
      set.concepts.push_back(std::move(concept_entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  set.validate();
  return set;
}

}  // namespace mcbm
