// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/mllm.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>

#include <json.hpp>
#include <openssl/evp.h>

#include "mcbm/npy.hpp"
#include "mcbm/numerics.hpp"

#ifndef MCBM_ASSET_DIR
#define MCBM_ASSET_DIR "assets"
#endif

namespace mcbm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string base64(const std::string& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<size_t>(n));
  return out;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> word_tokens(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Strips surrounding whitespace, quotes and a trailing period.
std::string clean_name(const std::string& reply) {
  std::string s = trim(reply);
  while (!s.empty() && (s.front() == '"' || s.front() == '\'')) s.erase(s.begin());
  while (!s.empty() && (s.back() == '"' || s.back() == '\'' || s.back() == '.')) s.pop_back();
  return trim(s);
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string join(const std::vector<std::string>& items, const std::string& sep) {
  std::string out;
  for (size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

std::string crop_cell(const Grid& grid, size_t index) {
  const Image canvas = decode_png(grid.png);
  const int cell = canvas.width / kGridSide;
  const GridCell& pos = grid.positions.at(index);
  Image out(cell, cell);
  for (int y = 0; y < cell; ++y) {
    std::copy_n(canvas.px(pos.col * cell, pos.row * cell + y), static_cast<size_t>(cell) * 3,
                out.px(0, y));
  }
  return encode_png(out);
}

}  // namespace

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr)) {
    throw NumericError("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string chat_payload(const ChatRequest& request) {
  if (request.parts.empty()) throw ContractError("chat request needs at least one part");
  json content = json::array();
  for (const ChatPart& part : request.parts) {
    if (part.is_image()) {
      content.push_back({{"type", "image_url"},
                         {"image_url",
                          {{"url", "data:" + part.media_type + ";base64," + base64(part.image)}}}});
    } else {
      content.push_back({{"type", "text"}, {"text", part.text}});
    }
  }
  const json j = {{"model", request.model},
                  {"temperature", request.temperature},
                  {"messages", json::array({{{"role", "user"}, {"content", content}}})}};
  return j.dump();
}

std::string embedding_payload(const std::string& model, const std::vector<std::string>& inputs) {
  return json{{"model", model}, {"input", inputs}}.dump();
}

// ---------------------------------------------------------------- mock

MockBackend::MockBackend(MockConfig config) : config_(std::move(config)) {
  if (config_.oracle.cols() != static_cast<Eigen::Index>(config_.oracle_names.size())) {
    throw ValidationError("mock oracle has " + std::to_string(config_.oracle.cols()) +
                          " columns but " + std::to_string(config_.oracle_names.size()) + " names");
  }
}

std::string MockBackend::chat(const ChatRequest& request) {
  const RequestContext& ctx = request.context;
  if (ctx.task == "name") return name_reply(ctx);
  if (ctx.task == "annotate") return annotate_reply(ctx);
  throw ServiceError("mock backend cannot answer task '" + ctx.task + "'");
}

std::string MockBackend::name_reply(const RequestContext& ctx) const {
  if (auto it = config_.naming_replies.find(ctx.concept_id); it != config_.naming_replies.end()) {
    const auto& seq = it->second;
    if (seq.empty()) return {};
    return seq[std::min<size_t>(static_cast<size_t>(ctx.attempt), seq.size() - 1)];
  }
  auto rate = [&](const std::vector<int64_t>& ids, Eigen::Index k) {
    if (ids.empty()) return 0.0;
    double s = 0.0;
    for (int64_t i : ids) {
      if (i < config_.oracle.rows()) s += config_.oracle(i, k) > 0.5 ? 1.0 : 0.0;
    }
    return s / static_cast<double>(ids.size());
  };
  double best = -2.0;
  Eigen::Index best_k = -1;
  for (Eigen::Index k = 0; k < config_.oracle.cols(); ++k) {
    const double score = rate(ctx.samples, k) - rate(ctx.contrast, k);
    if (score > best) {
      best = score;
      best_k = k;
    }
  }
  if (best_k < 0 || best < config_.min_naming_margin) return {};
  return config_.oracle_names[static_cast<size_t>(best_k)];
}

int MockBackend::oracle_bit(const std::string& name, int64_t sample) const {
  const auto it = std::find(config_.oracle_names.begin(), config_.oracle_names.end(), name);
  if (it != config_.oracle_names.end() && sample >= 0 && sample < config_.oracle.rows()) {
    return config_.oracle(sample, it - config_.oracle_names.begin()) > 0.5 ? 1 : 0;
  }
  const std::string key = name + "#" + std::to_string(sample) + "#" + std::to_string(config_.seed);
  return static_cast<int>(derive_seed(fnv1a(key), 0) & 1ULL);
}

std::string MockBackend::annotate_reply(const RequestContext& ctx) const {
  if (auto it = config_.annotate_replies.find(ctx.concept_id);
      it != config_.annotate_replies.end()) {
    const auto& seq = it->second;
    if (seq.empty()) return {};
    return seq[std::min<size_t>(static_cast<size_t>(ctx.attempt), seq.size() - 1)];
  }
  if (ctx.samples.size() == 1) return oracle_bit(ctx.concept_name, ctx.samples[0]) ? "yes" : "no";
  std::string out;
  for (size_t i = 0; i < ctx.samples.size(); ++i) {
    out += std::to_string(i + 1) + ": " +
           (oracle_bit(ctx.concept_name, ctx.samples[i]) ? "yes" : "no") + "\n";
  }
  return out;
}

std::vector<std::vector<double>> MockBackend::embed(const std::string&,
                                                    const std::vector<std::string>& inputs) {
  std::vector<std::vector<double>> out;
  for (const std::string& text : inputs) {
    std::mt19937_64 rng(derive_seed(config_.seed, fnv1a(text)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> v(static_cast<size_t>(config_.embedding_dim));
    for (double& x : v) x = gauss(rng);
    out.push_back(std::move(v));
  }
  return out;
}

MockConfig load_mock_config(const fs::path& dir, uint64_t seed) {
  MockConfig cfg;
  cfg.seed = seed;
  try {
    const json names = json::parse(read_text(dir / "names.json"));
    cfg.oracle_names = names.at("columns").get<std::vector<std::string>>();
    if (names.contains("embedding_dim")) cfg.embedding_dim = names["embedding_dim"].get<int>();
    if (names.contains("min_naming_margin")) {
      cfg.min_naming_margin = names["min_naming_margin"].get<double>();
    }
    if (fs::exists(dir / "canned.json")) {
      const json canned = json::parse(read_text(dir / "canned.json"));
      auto fill = [&](const char* key, std::map<int64_t, std::vector<std::string>>& dst) {
        if (!canned.contains(key)) return;
        for (const auto& [id, replies] : canned[key].items()) {
          dst[std::stoll(id)] = replies.get<std::vector<std::string>>();
        }
      };
      fill("name", cfg.naming_replies);
      fill("annotate", cfg.annotate_replies);
    }
  } catch (const json::exception& e) {
    throw ValidationError("malformed mock backend config in " + dir.string() + ": " + e.what());
  }
  cfg.oracle = to_matrix(npy::read_tensor(dir / "oracle.npy"));
  if (cfg.oracle.cols() != static_cast<Eigen::Index>(cfg.oracle_names.size())) {
    throw ValidationError("mock oracle.npy has " + std::to_string(cfg.oracle.cols()) +
                          " columns but names.json lists " +
                          std::to_string(cfg.oracle_names.size()));
  }
  return cfg;
}

// ---------------------------------------------------------------- cache

CachingBackend::CachingBackend(std::shared_ptr<MllmBackend> inner, fs::path dir)
    : inner_(std::move(inner)), dir_(std::move(dir)) {
  fs::create_directories(dir_ / "chat");
  fs::create_directories(dir_ / "embed");
}

std::string CachingBackend::chat(const ChatRequest& request) {
  const std::string key = sha256_hex(chat_payload(request));
  const fs::path path = dir_ / "chat" / (key + ".json");
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (fs::exists(path)) {
      ++hits_;
      return json::parse(read_text(path)).at("reply").get<std::string>();
    }
  }
  const std::string reply = inner_->chat(request);
  json texts = json::array();
  json images = json::array();
  for (const ChatPart& part : request.parts) {
    if (part.is_image()) {
      images.push_back(sha256_hex(part.image));
    } else {
      texts.push_back(part.text);
    }
  }
  const json entry = {{"reply", reply},
                      {"request", {{"model", request.model}, {"texts", texts}, {"images", images}}}};
  std::lock_guard<std::mutex> lock(mu_);
  ++misses_;
  write_atomic(path, entry.dump(2) + "\n");
  return reply;
}

std::vector<std::vector<double>> CachingBackend::embed(const std::string& model,
                                                       const std::vector<std::string>& inputs) {
  const std::string key = sha256_hex(embedding_payload(model, inputs));
  const fs::path path = dir_ / "embed" / (key + ".json");
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (fs::exists(path)) {
      ++hits_;
      return json::parse(read_text(path)).at("vectors").get<std::vector<std::vector<double>>>();
    }
  }
  auto vectors = inner_->embed(model, inputs);
  std::lock_guard<std::mutex> lock(mu_);
  ++misses_;
  write_atomic(path, json{{"inputs", inputs}, {"vectors", vectors}}.dump() + "\n");
  return vectors;
}

// ---------------------------------------------------------------- prompts

fs::path default_prompt_dir() { return fs::path(MCBM_ASSET_DIR) / "prompts"; }

PromptSet load_prompts(const fs::path& dir) {
  auto get = [&](const char* file) {
    const fs::path p = dir / file;
    if (!fs::exists(p)) throw ValidationError("missing prompt template " + p.string());
    return read_text(p);
  };
  PromptSet p;
  p.naming = get("naming.txt");
  p.naming_retry = get("naming_retry.txt");
  p.saliency_note = get("saliency_note.txt");
  p.annotate_grid = get("annotate_grid.txt");
  p.annotate_single = get("annotate_single.txt");
  p.annotate_reparse = get("annotate_reparse.txt");
  p.annotate_single_reparse = get("annotate_single_reparse.txt");
  p.reference_intro = get("reference_intro.txt");
  p.embedding = get("embedding.txt");
  return p;
}

std::string fill_template(std::string text, const std::map<std::string, std::string>& vars) {
  for (const auto& [key, value] : vars) {
    const std::string needle = "{" + key + "}";
    for (size_t pos = text.find(needle); pos != std::string::npos;
         pos = text.find(needle, pos + value.size())) {
      text.replace(pos, needle.size(), value);
    }
  }
  return text;
}

// ---------------------------------------------------------------- naming

std::string naming_violation(const std::string& reply, const std::vector<std::string>& class_names,
                             int max_words) {
  const std::string name = clean_name(reply);
  if (name.empty()) return "the reply was empty";
  std::istringstream ss(name);
  int words = 0;
  for (std::string w; ss >> w;) ++words;
  if (words > max_words) {
    return "the reply has " + std::to_string(words) + " words, the limit is " +
           std::to_string(max_words);
  }
  const std::vector<std::string> tokens = word_tokens(name);
  for (const std::string& cls : class_names) {
    const std::vector<std::string> ct = word_tokens(cls);
    if (ct.empty() || ct.size() > tokens.size()) continue;
    for (size_t i = 0; i + ct.size() <= tokens.size(); ++i) {
      if (std::equal(ct.begin(), ct.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i))) {
        return "the reply uses the class name \"" + cls + "\"";
      }
    }
  }
  return {};
}

NameResult name_concept(MllmBackend& backend, const NamingInput& input, const std::string& domain,
                        const std::vector<std::string>& class_names, const PromptSet& prompts,
                        const NamingConfig& config) {
  const bool saliency = !input.saliency_png.empty();
  if (saliency && input.saliency_png.size() != input.activating_png.size()) {
    throw ContractError("name_concept: saliency images must pair with activating images");
  }
  ChatRequest base;
  base.model = config.model;
  base.max_retries = config.max_retries;
  base.context.task = "name";
  base.context.concept_id = input.examples.concept_id;
  base.context.samples = input.examples.activating;
  base.context.contrast = input.examples.nonactive_similar;
  base.context.contrast.insert(base.context.contrast.end(), input.examples.nonactive_random.begin(),
                               input.examples.nonactive_random.end());
  base.parts.push_back(ChatPart::Text(fill_template(
      prompts.naming, {{"domain", domain},
                       {"num_active", std::to_string(input.activating_png.size())},
                       {"num_contrast", std::to_string(input.nonactive_png.size())},
                       {"max_words", std::to_string(config.max_words)},
                       {"class_names", join(class_names, ", ")},
                       {"saliency_note", saliency ? " " + trim(prompts.saliency_note) : ""}})));
  for (size_t i = 0; i < input.activating_png.size(); ++i) {
    base.parts.push_back(ChatPart::Png(input.activating_png[i]));
    if (saliency) base.parts.push_back(ChatPart::Png(input.saliency_png[i]));
  }
  for (const std::string& png : input.nonactive_png) base.parts.push_back(ChatPart::Png(png));

  NameResult result;
  ChatRequest request = base;
  for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
    request.context.attempt = attempt;
    std::string reply;
    try {
      reply = backend.chat(request);
    } catch (const ServiceError& e) {
      throw ServiceError("naming concept " + std::to_string(input.examples.concept_id) + ": " +
                         e.what());
    }
    ++result.attempts;
    const std::string violation = naming_violation(reply, class_names, config.max_words);
    if (violation.empty()) {
      result.name = clean_name(reply);
      return result;
    }
    result.violations.push_back(violation);
    request = base;
    request.parts.push_back(ChatPart::Text(
        fill_template(prompts.naming_retry, {{"previous", clean_name(reply)},
                                             {"violation", violation},
                                             {"attempt", std::to_string(attempt + 2)}})));
  }
  return result;
}

// ---------------------------------------------------------------- annotation

AnnotateMode parse_annotate_mode(const std::string& s) {
  if (s == "grid") return AnnotateMode::kGrid;
  if (s == "single") return AnnotateMode::kSingle;
  throw ValidationError("unknown annotation mode '" + s + "' (expected grid or single)");
}

std::optional<int> parse_single_reply(const std::string& reply) {
  const std::vector<std::string> tokens = word_tokens(reply);
  if (tokens.empty()) return std::nullopt;
  const std::string& t = tokens.front();
  if (t == "yes" || t == "present" || t == "true" || t == "1") return 1;
  if (t == "no" || t == "absent" || t == "false" || t == "0") return 0;
  return std::nullopt;
}

std::optional<std::vector<int>> parse_grid_reply(const std::string& reply) {
  std::string bits;
  for (char c : reply) {
    if (!std::isspace(static_cast<unsigned char>(c)) && c != ',') bits += c;
  }
  if (bits.size() == static_cast<size_t>(kGridCells) &&
      std::all_of(bits.begin(), bits.end(), [](char c) { return c == '0' || c == '1'; })) {
    std::vector<int> out;
    for (char c : bits) out.push_back(c - '0');
    return out;
  }
  static const std::regex line_re(
      R"(^\s*(\d{1,2})\s*[:.)\-]\s*(yes|no|present|absent|true|false|1|0)\b)",
      std::regex::icase);
  std::vector<int> out(static_cast<size_t>(kGridCells), -1);
  std::istringstream ss(reply);
  int marks = 0;
  for (std::string line; std::getline(ss, line);) {
    std::smatch m;
    if (!std::regex_search(line, m, line_re)) continue;
    const int idx = std::stoi(m[1].str());
    if (idx < 1 || idx > kGridCells) return std::nullopt;
    if (out[static_cast<size_t>(idx - 1)] != -1) return std::nullopt;
    const std::string v = lower(m[2].str());
    out[static_cast<size_t>(idx - 1)] = (v == "yes" || v == "present" || v == "true" || v == "1");
    ++marks;
  }
  if (marks != kGridCells) return std::nullopt;
  return out;
}

std::optional<std::vector<int>> annotate_batch(MllmBackend& backend, int64_t concept_id,
                                               const std::string& concept_name,
                                               const std::optional<std::string>& reference_grid,
                                               const Grid& batch, const PromptSet& prompts,
                                               const AnnotateConfig& config) {
  if (batch.positions.size() != static_cast<size_t>(kGridCells)) {
    throw ContractError("annotate_batch expects a 25-cell grid");
  }
  ChatRequest base;
  base.model = config.model;
  base.context.task = "annotate";
  base.context.concept_id = concept_id;
  base.context.concept_name = concept_name;
  if (reference_grid) {
    base.parts.push_back(
        ChatPart::Text(fill_template(prompts.reference_intro, {{"concept", concept_name}})));
    base.parts.push_back(ChatPart::Png(*reference_grid));
  }
  auto call = [&](ChatRequest& req) {
    try {
      return backend.chat(req);
    } catch (const ServiceError& e) {
      throw ServiceError("annotating concept " + std::to_string(concept_id) + ": " + e.what());
    }
  };

  if (config.mode == AnnotateMode::kGrid) {
    ChatRequest req = base;
    for (const GridCell& c : batch.positions) req.context.samples.push_back(c.sample);
    req.parts.push_back(
        ChatPart::Text(fill_template(prompts.annotate_grid, {{"concept", concept_name}})));
    req.parts.push_back(ChatPart::Png(batch.png));
    if (auto labels = parse_grid_reply(call(req))) return labels;
    req.context.attempt = 1;
    req.parts.push_back(ChatPart::Text(prompts.annotate_reparse));
    return parse_grid_reply(call(req));
  }

  std::vector<int> labels;
  for (size_t i = 0; i < batch.positions.size(); ++i) {
    ChatRequest req = base;
    req.context.samples = {batch.positions[i].sample};
    req.parts.push_back(
        ChatPart::Text(fill_template(prompts.annotate_single, {{"concept", concept_name}})));
    req.parts.push_back(ChatPart::Png(crop_cell(batch, i)));
    std::optional<int> label = parse_single_reply(call(req));
    if (!label) {
      req.context.attempt = 1;
      req.parts.push_back(ChatPart::Text(prompts.annotate_single_reparse));
      label = parse_single_reply(call(req));
    }
    if (!label) return std::nullopt;
    labels.push_back(*label);
  }
  return labels;
}

// ---------------------------------------------------------------- embedding + merging

std::vector<Vec> embed_names(MllmBackend& backend, const std::vector<std::string>& names,
                             const std::string& domain, const PromptSet& prompts,
                             const std::string& model) {
  if (names.empty()) throw ContractError("embed_names: no names");
  std::vector<std::string> inputs;
  for (const std::string& name : names) {
    inputs.push_back(fill_template(prompts.embedding, {{"domain", domain}, {"concept", name}}));
  }
  const auto raw = backend.embed(model, inputs);
  if (raw.size() != names.size()) {
    throw ServiceError("embedding service returned " + std::to_string(raw.size()) +
                       " vectors for " + std::to_string(names.size()) + " inputs");
  }
  std::vector<Vec> out;
  for (const auto& r : raw) {
    Vec v = Eigen::Map<const Vec>(r.data(), static_cast<Eigen::Index>(r.size()));
    const double norm = v.norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) throw ServiceError("embedding with zero norm");
    out.push_back(v / norm);
  }
  return out;
}

ConceptSet merge_concepts(const std::vector<NamedNeuron>& named, const std::vector<Vec>& embeddings,
                          double threshold) {
  if (named.size() != embeddings.size()) {
    throw ContractError("merge_concepts: one embedding per name required");
  }
  const size_t n = named.size();
  std::vector<size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<size_t(size_t)> find = [&](size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      const double denom = embeddings[i].norm() * embeddings[j].norm();
      const double cos = denom > 0.0 ? embeddings[i].dot(embeddings[j]) / denom : 0.0;
      if (cos > threshold) parent[find(i)] = find(j);
    }
  }
  std::map<size_t, std::vector<size_t>> groups;
  for (size_t i = 0; i < n; ++i) groups[find(i)].push_back(i);
  std::vector<std::vector<size_t>> comps;
  for (auto& [root, members] : groups) {
    std::sort(members.begin(), members.end(),
              [&](size_t a, size_t b) { return named[a].neuron_id < named[b].neuron_id; });
    comps.push_back(members);
  }
  std::sort(comps.begin(), comps.end(), [&](const auto& a, const auto& b) {
    return named[a.front()].neuron_id < named[b.front()].neuron_id;
  });
  ConceptSet set;
  for (const auto& members : comps) {
    size_t best = members.front();
    for (size_t m : members) {
      if (named[m].activation_count > named[best].activation_count) best = m;
    }
    Concept c;
    c.concept_id = set.size();
    c.name = named[best].name;
    for (size_t m : members) {
      c.neuron_ids.push_back(named[m].neuron_id);
      if (m != best) c.merged_from.push_back(named[m].name);
    }
    set.concepts.push_back(std::move(c));
  }
  return set;
}

}  // namespace mcbm
