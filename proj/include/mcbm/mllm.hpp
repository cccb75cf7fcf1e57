// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "mcbm/concept_set.hpp"
#include "mcbm/image.hpp"
#include "mcbm/selection.hpp"
#include "mcbm/tensor.hpp"

namespace mcbm {

struct ChatPart {
  std::string text;
  std::string image;  // encoded bytes; empty for text parts
  std::string media_type;

  static ChatPart Text(std::string t) { return {std::move(t), {}, {}}; }
  static ChatPart Png(std::string bytes) { return {{}, std::move(bytes), "image/png"}; }
  bool is_image() const { return !media_type.empty(); }
};

/// What a request is for. Never serialized; only the mock backend reads it.
struct RequestContext {
  std::string task;                // "name" | "annotate"
  int64_t concept_id = -1;
  std::string concept_name;
  std::vector<int64_t> samples;    // activating (name) or grid order (annotate)
  std::vector<int64_t> contrast;   // non-activating examples (name)
  int attempt = 0;
};

struct ChatRequest {
  std::string model;
  std::vector<ChatPart> parts;
  double temperature = 0.0;
  int max_retries = 2;
  RequestContext context;
};

/// OpenAI-compatible chat payload; byte-identical for identical requests.
std::string chat_payload(const ChatRequest& request);
std::string embedding_payload(const std::string& model, const std::vector<std::string>& inputs);
std::string sha256_hex(const std::string& bytes);

class MllmBackend {
 public:
  virtual ~MllmBackend() = default;
  /// Reply text. Throws ServiceError on transport failure.
  virtual std::string chat(const ChatRequest& request) = 0;
  /// One raw (unnormalized) vector per input.
  virtual std::vector<std::vector<double>> embed(const std::string& model,
                                                 const std::vector<std::string>& inputs) = 0;
};

struct MockConfig {
  Mat oracle;                                    // N x K' planted concept bits
  std::vector<std::string> oracle_names;         // K' names, one per oracle column
  std::map<int64_t, std::vector<std::string>> naming_replies;    // by concept id, per attempt
  std::map<int64_t, std::vector<std::string>> annotate_replies;  // by concept id, per attempt
  int embedding_dim = 64;
  uint64_t seed = 0;
  double min_naming_margin = 0.5;
};

/// Deterministic stand-in: names concepts from the oracle columns that best
/// separate activating from non-activating samples, answers annotation
/// queries from the oracle bits, and embeds text by seeded hash-to-sphere.
class MockBackend : public MllmBackend {
 public:
  explicit MockBackend(MockConfig config);
  std::string chat(const ChatRequest& request) override;
  std::vector<std::vector<double>> embed(const std::string& model,
                                         const std::vector<std::string>& inputs) override;
  const MockConfig& config() const { return config_; }

 private:
  std::string name_reply(const RequestContext& ctx) const;
  std::string annotate_reply(const RequestContext& ctx) const;
  int oracle_bit(const std::string& name, int64_t sample) const;
  MockConfig config_;
};

/// Reads names.json ({"columns": [...]}), oracle.npy and optional
/// canned.json ({"name": {id: [...]}, "annotate": {id: [...]}}).
MockConfig load_mock_config(const std::filesystem::path& dir, uint64_t seed);

struct HttpConfig {
  std::string endpoint;     // base URL, e.g. https://host/v1
  std::string api_key;
  int timeout_seconds = 120;
  int transport_retries = 3;
};

/// Fills endpoint and key from MCBM_MLLM_ENDPOINT / MCBM_MLLM_API_KEY.
HttpConfig http_config_from_env();
std::unique_ptr<MllmBackend> make_http_backend(const HttpConfig& config);

/// Memoizes replies on disk under `dir`, keyed by the SHA-256 of the payload.
/// Each entry also records the text parts and image digests of the request.
class CachingBackend : public MllmBackend {
 public:
  CachingBackend(std::shared_ptr<MllmBackend> inner, std::filesystem::path dir);
  std::string chat(const ChatRequest& request) override;
  std::vector<std::vector<double>> embed(const std::string& model,
                                         const std::vector<std::string>& inputs) override;
  int64_t hits() const { return hits_; }
  int64_t misses() const { return misses_; }

 private:
  std::shared_ptr<MllmBackend> inner_;
  std::filesystem::path dir_;
  std::mutex mu_;
  int64_t hits_ = 0;
  int64_t misses_ = 0;
};

struct PromptSet {
  std::string naming;
  std::string naming_retry;
  std::string saliency_note;
  std::string annotate_grid;
  std::string annotate_single;
  std::string annotate_reparse;
  std::string annotate_single_reparse;
  std::string reference_intro;
  std::string embedding;
};

/// Loads the *.txt templates from `dir`; throws ValidationError if one is missing.
PromptSet load_prompts(const std::filesystem::path& dir);
std::filesystem::path default_prompt_dir();
std::string fill_template(std::string text, const std::map<std::string, std::string>& vars);

struct NamingInput {
  NamingExamples examples;
  std::vector<std::string> activating_png;
  std::vector<std::string> saliency_png;  // parallel to activating_png, or empty
  std::vector<std::string> nonactive_png;
};

struct NamingConfig {
  std::string model = "gpt-4.1";
  int max_retries = 2;
  int max_words = 12;
};

struct NameResult {
  std::optional<std::string> name;  // nullopt: unnamed
  int attempts = 0;
  std::vector<std::string> violations;
};

/// Empty string when acceptable, otherwise the rule the reply breaks.
std::string naming_violation(const std::string& reply, const std::vector<std::string>& class_names,
                             int max_words);

NameResult name_concept(MllmBackend& backend, const NamingInput& input, const std::string& domain,
                        const std::vector<std::string>& class_names, const PromptSet& prompts,
                        const NamingConfig& config);

enum class AnnotateMode { kGrid, kSingle };
AnnotateMode parse_annotate_mode(const std::string& s);

struct AnnotateConfig {
  std::string model = "gpt-4.1";
  AnnotateMode mode = AnnotateMode::kGrid;
};

/// Parses 25 ordered binary marks ("k: yes/no" lines or a 25-char 0/1 string).
std::optional<std::vector<int>> parse_grid_reply(const std::string& reply);
std::optional<int> parse_single_reply(const std::string& reply);

/// 25 labels in grid order, or nullopt when the batch is dropped. A missing
/// `reference_grid` sends no reference images.
std::optional<std::vector<int>> annotate_batch(MllmBackend& backend, int64_t concept_id,
                                               const std::string& concept_name,
                                               const std::optional<std::string>& reference_grid,
                                               const Grid& batch, const PromptSet& prompts,
                                               const AnnotateConfig& config);

/// Unit vectors for `names`, each wrapped in the embedding template first.
std::vector<Vec> embed_names(MllmBackend& backend, const std::vector<std::string>& names,
                             const std::string& domain, const PromptSet& prompts,
                             const std::string& model = "text-embedding-3-large");

struct NamedNeuron {
  int64_t neuron_id = 0;
  std::string name;
  int64_t activation_count = 0;
};

/// Connected components of the graph with an edge where cosine > threshold.
ConceptSet merge_concepts(const std::vector<NamedNeuron>& named, const std::vector<Vec>& embeddings,
                          double threshold = 0.98);

/// Runs fn(0..n-1) with at most `max_in_flight` concurrent calls; results in index order.
template <typename T>
std::vector<T> bounded_parallel_map(int64_t n, int max_in_flight,
                                    const std::function<T(int64_t)>& fn);

}  // namespace mcbm

#include "mcbm/detail/parallel.hpp"
