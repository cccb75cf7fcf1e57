// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/stages.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "mcbm/annotations.hpp"
#include "mcbm/cbm.hpp"
#include "mcbm/concept_set.hpp"
#include "mcbm/explain.hpp"
#include "mcbm/image.hpp"
#include "mcbm/leakage.hpp"
#include "mcbm/manifest.hpp"
#include "mcbm/metrics.hpp"
#include "mcbm/mllm.hpp"
#include "mcbm/sae.hpp"
#include "mcbm/selection.hpp"

namespace mcbm {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

fs::path RunConfig::resolve(const std::string& path) const {
  const fs::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

namespace {

void merge_json(json& dst, const json& src) {
  for (const auto& [key, value] : src.items()) {
    if (value.is_object() && dst.contains(key) && dst[key].is_object()) {
      merge_json(dst[key], value);
    } else {
      dst[key] = value;
    }
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

}  // namespace

RunConfig make_run_config(const std::optional<fs::path>& manifest,
                          const std::optional<fs::path>& out,
                          const std::optional<fs::path>& config_path,
                          const std::optional<uint64_t>& seed, const json& overrides) {
  RunConfig cfg;
  cfg.base_dir = fs::current_path();
  if (config_path) {
    cfg.settings = read_json(*config_path);
    if (!cfg.settings.is_object()) throw ValidationError("config must be a JSON object");
    cfg.base_dir = fs::absolute(*config_path).parent_path();
  }
  merge_json(cfg.settings, overrides);
  if (manifest) {
    cfg.manifest = fs::absolute(*manifest);
  } else if (cfg.settings.contains("manifest")) {
    cfg.manifest = cfg.resolve(cfg.settings["manifest"].get<std::string>());
  } else {
    throw ValidationError("no manifest given (use --manifest or a config 'manifest' key)");
  }
  if (out) {
    cfg.out = fs::absolute(*out);
  } else if (cfg.settings.contains("out")) {
    cfg.out = cfg.resolve(cfg.settings["out"].get<std::string>());
  } else {
    throw ValidationError("no output directory given (use --out or a config 'out' key)");
  }
  if (seed) {
    cfg.seed = *seed;
  } else if (cfg.settings.contains("seed")) {
    cfg.seed = cfg.settings["seed"].get<uint64_t>();
  }
  return cfg;
}

const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> stages = {
      "train-sae", "sae-report", "prune", "select-naming", "name",     "merge",
      "select-annotation", "annotate", "train-cbl", "fit-head", "sweep", "evaluate",
      "explain", "params", "leakage"};
  return stages;
}

bool is_stage(const std::string& name) {
  if (name == "pipeline") return true;
  const auto& s = pipeline_stages();
  return std::find(s.begin(), s.end(), name) != s.end();
}

RunLock::RunLock(const fs::path& out_dir) : path_(out_dir / ".lock") {
  fs::create_directories(out_dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw ValidationError("output directory is locked by another run (" + path_.string() +
                          "); remove the file if no run is active");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const ssize_t n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const ContractError*>(&e)) return 2;
  if (dynamic_cast<const ServiceError*>(&e)) return 3;
  return 1;
}

// ---------------------------------------------------------------- stage machinery

namespace {

/// Artifact roots for a run. The leakage variant writes its own concept
/// set, annotations, CBL and sweep under `root` while reading shared
/// upstream artifacts (SAE, plans) from `out`.
struct Workspace {
  const RunConfig& cfg;
  fs::path out;
  fs::path root;
  bool random_names = false;

  fs::path shared(const std::string& rel) const { return out / rel; }
  fs::path local(const std::string& rel) const { return root / rel; }
  std::string rel(const fs::path& p) const { return fs::relative(p, out).generic_string(); }
};

fs::path require(const Workspace& ws, const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) {
    throw ValidationError("missing upstream artifact " + ws.rel(p) + " (run '" + producer +
                          "' first)");
  }
  return p;
}

void write_report(const Workspace& ws, const std::string& stage, json body) {
  body["stage"] = stage;
  const std::string prefix = ws.root == ws.out ? "" : ws.rel(ws.root) + "-";
  write_json(ws.out / "reports" / (prefix + stage + ".json"), body);
}

std::vector<int64_t> split_ids(const Dataset& ds, const std::string& split) {
  return ds.manifest.indices(parse_split(split));
}

struct Loaded {
  Dataset ds;
  std::vector<int64_t> train;
  std::vector<int64_t> val;
  std::vector<int64_t> test;
};

Loaded load(const Workspace& ws) {
  Loaded l{load_dataset(ws.cfg.manifest), {}, {}, {}};
  l.train = split_ids(l.ds, "train");
  l.val = split_ids(l.ds, "val");
  l.test = split_ids(l.ds, "test");
  if (l.train.empty()) throw ValidationError("manifest has no train samples");
  if (l.val.empty()) l.val = l.train;
  if (l.test.empty()) l.test = l.val;
  return l;
}

std::vector<int64_t> eval_ids(const Loaded& l, const std::string& split) {
  if (split == "train") return l.train;
  if (split == "val") return l.val;
  if (split == "test") return l.test;
  throw ValidationError("unknown split '" + split + "'");
}

std::shared_ptr<MllmBackend> make_backend(const Workspace& ws) {
  const RunConfig& cfg = ws.cfg;
  const std::string kind = cfg.get<std::string>("backend", "kind", "mock");
  std::shared_ptr<MllmBackend> inner;
  if (kind == "mock") {
    const std::string dir = cfg.get<std::string>("backend", "mock_dir", "");
    if (dir.empty()) throw ValidationError("mock backend needs backend.mock_dir");
    inner = std::make_shared<MockBackend>(load_mock_config(cfg.resolve(dir), cfg.seed));
  } else if (kind == "http") {
    HttpConfig http = http_config_from_env();
    http.timeout_seconds = cfg.get<int>("backend", "timeout_seconds", http.timeout_seconds);
    inner = std::shared_ptr<MllmBackend>(make_http_backend(http).release());
  } else {
    throw ValidationError("unknown backend kind '" + kind + "' (expected mock or http)");
  }
  return std::make_shared<CachingBackend>(inner, ws.out / "cache");
}

PromptSet prompts(const Workspace& ws) {
  const std::string dir = ws.cfg.get<std::string>("backend", "prompt_dir", "");
  return load_prompts(dir.empty() ? default_prompt_dir() : ws.cfg.resolve(dir));
}

int max_in_flight(const Workspace& ws) { return ws.cfg.get<int>("backend", "max_in_flight", 4); }

Mat rows_of(const Mat& m, std::span<const int64_t> ids) {
  Mat out(static_cast<Eigen::Index>(ids.size()), m.cols());
  for (size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(ids[i]);
  return out;
}

std::vector<int64_t> labels_of(const Loaded& l, std::span<const int64_t> ids) {
  return l.ds.labels_of(ids);
}

std::vector<int64_t> map_ids(const std::vector<int64_t>& local, const std::vector<int64_t>& global) {
  std::vector<int64_t> out;
  out.reserve(local.size());
  for (int64_t i : local) out.push_back(global[static_cast<size_t>(i)]);
  return out;
}

json sae_metrics_json(const SAEMetrics& m) {
  return {{"recon_l2", m.recon_l2},
          {"avg_l0", m.avg_l0},
          {"recovered_loss", m.recovered_loss},
          {"recovered_accuracy", m.recovered_accuracy},
          {"recovered_balanced_accuracy", m.recovered_balanced_accuracy},
          {"loss_original", m.loss_original},
          {"loss_reconstructed", m.loss_reconstructed},
          {"loss_zero", m.loss_zero}};
}

// ---------------------------------------------------------------- SAE stages

void stage_train_sae(const Workspace& ws) {
  const Loaded l = load(ws);
  const RunConfig& c = ws.cfg;
  SaeTrainConfig tc;
  const int64_t n = l.ds.features.cols();
  tc.hidden_dim = c.get<int64_t>("sae", "hidden_dim", 0);
  if (tc.hidden_dim == 0) {
    tc.hidden_dim = std::max<int64_t>(
        1, std::llround(c.get<double>("sae", "expansion", 1.0) * static_cast<double>(n)));
  }
  tc.lambda_sae = c.get<double>("sae", "lambda", tc.lambda_sae);
  tc.lr = c.get<double>("sae", "lr", tc.lr);
  tc.epochs = c.get<int64_t>("sae", "epochs", tc.epochs);
  tc.patience = c.get<int64_t>("sae", "patience", tc.patience);
  tc.batch_size = c.get<int64_t>("sae", "batch_size", tc.batch_size);
  tc.seed = c.seed;
  const SaeTrainResult r = train_sae(l.ds.rows(l.train), l.ds.rows(l.val), tc);
  save_sae(r.params, ws.shared("sae"));
  json hist = json::array();
  for (const SaeEpoch& e : r.history) {
    hist.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"val_loss", e.val_loss},
                    {"val_recon_l2", e.val_recon_l2},
                    {"val_avg_l0", e.val_avg_l0}});
  }
  write_json(ws.shared("sae/history.json"), hist);
  const SaeEpoch& best = r.history.at(static_cast<size_t>(r.best_epoch - 1));
  write_report(ws, "train-sae",
               {{"input_dim", n},
                {"hidden_dim", tc.hidden_dim},
                {"epochs_run", r.history.size()},
                {"best_epoch", r.best_epoch},
                {"early_stopped", r.early_stopped},
                {"best_val_loss", best.val_loss},
                {"artifacts", {"sae/sae.json", "sae/history.json"}}});
}

void stage_sae_report(const Workspace& ws) {
  require(ws, ws.shared("sae/sae.json"), "train-sae");
  const Loaded l = load(ws);
  const SAEParams sae = load_sae(ws.shared("sae"));
  const Mat train = l.ds.rows(l.train);
  const DensityHistogram h = density_histogram(sae, train, ws.cfg.get<int64_t>("sae", "bins", 20));
  const SAEMetrics val = sae_metrics(sae, l.ds.rows(l.val), labels_of(l, l.val), l.ds.head);
  const SAEMetrics tr = sae_metrics(sae, train, labels_of(l, l.train), l.ds.head);
  json density = {{"num_samples", h.num_samples},
                  {"counts", h.counts},
                  {"bin_edges", h.bin_edges},
                  {"bin_counts", h.bin_counts},
                  {"dead", h.dead}};
  write_json(ws.shared("sae/density.json"), density);
  write_report(ws, "sae-report",
               {{"validation", sae_metrics_json(val)},
                {"train_avg_l0", tr.avg_l0},
                {"expansion", sae.expansion()},
                {"dead", h.dead},
                {"hidden_dim", sae.hidden_dim()},
                {"artifacts", {"sae/density.json"}}});
}

void stage_prune(const Workspace& ws) {
  require(ws, ws.shared("sae/sae.json"), "train-sae");
  const Loaded l = load(ws);
  const SAEParams sae = load_sae(ws.shared("sae"));
  const DensityHistogram h = density_histogram(sae, l.ds.rows(l.train));
  const PruneResult p = prune(sae, h.counts, l.ds.rows(l.val), labels_of(l, l.val), l.ds.head,
                              ws.cfg.get<double>("prune", "tolerance", 0.01));
  json sweep = json::array();
  for (const CutoffPoint& c : p.sweep) {
    sweep.push_back({{"cutoff", c.cutoff}, {"kept", c.kept}, {"recovered_loss", c.recovered_loss}});
  }
  const json body = {{"kept_neurons", p.kept_neurons},
                     {"cutoff", p.cutoff},
                     {"activation_counts", h.counts},
                     {"unpruned_recovered_loss", p.unpruned_recovered_loss},
                     {"pruned_recovered_loss", p.pruned_recovered_loss},
                     {"sweep", sweep}};
  write_json(ws.shared("sae/prune.json"), body);
  write_report(ws, "prune",
               {{"kept", p.kept_neurons.size()},
                {"hidden_dim", sae.hidden_dim()},
                {"cutoff", p.cutoff},
                {"unpruned_recovered_loss", p.unpruned_recovered_loss},
                {"pruned_recovered_loss", p.pruned_recovered_loss},
                {"artifacts", {"sae/prune.json"}}});
}

// ---------------------------------------------------------------- naming + merging

void stage_select_naming(const Workspace& ws) {
  const json pr = read_json(require(ws, ws.shared("sae/prune.json"), "prune"));
  const Loaded l = load(ws);
  const SAEParams sae = load_sae(ws.shared("sae"));
  const Mat train = l.ds.rows(l.train);
  const Mat hidden = sae_encode(sae, train);
  json neurons = json::array();
  int64_t nameable = 0;
  for (int64_t j : pr.at("kept_neurons").get<std::vector<int64_t>>()) {
    const int64_t ids[] = {j};
    const Vec act = concept_activation(hidden, ids);
    const auto ex = select_naming_examples(act, train, ws.cfg.seed, j);
    if (!ex) {
      neurons.push_back({{"neuron_id", j}, {"examples", nullptr}});
      continue;
    }
    NamingExamples g = *ex;
    g.activating = map_ids(g.activating, l.train);
    g.nonactive_random = map_ids(g.nonactive_random, l.train);
    g.nonactive_similar = map_ids(g.nonactive_similar, l.train);
    neurons.push_back({{"neuron_id", j}, {"examples", json::parse(naming_to_json(g))}});
    ++nameable;
  }
  write_json(ws.shared("naming/examples.json"), {{"neurons", neurons}});
  write_report(ws, "select-naming", {{"candidates", neurons.size()},
                                     {"nameable", nameable},
                                     {"artifacts", {"naming/examples.json"}}});
}

std::string cell_png(const DatasetManifest& m, int64_t sample, int cell) {
  return encode_png(letterbox(read_image(m.image_path(sample)), cell));
}

void stage_name(const Workspace& ws) {
  const json ex = read_json(require(ws, ws.shared("naming/examples.json"), "select-naming"));
  const json pr = read_json(require(ws, ws.shared("sae/prune.json"), "prune"));
  const Loaded l = load(ws);
  const SAEParams sae = load_sae(ws.shared("sae"));
  const auto counts = pr.at("activation_counts").get<std::vector<int64_t>>();
  const auto backend = make_backend(ws);
  const PromptSet ps = prompts(ws);
  const int cell = ws.cfg.get<int>("naming", "cell_size", 224);
  NamingConfig nc;
  nc.model = ws.cfg.get<std::string>("backend", "chat_model", nc.model);
  nc.max_retries = ws.cfg.get<int>("naming", "max_retries", nc.max_retries);
  nc.max_words = ws.cfg.get<int>("naming", "max_words", nc.max_words);
  const bool saliency = l.ds.manifest.saliency_available() &&
                        ws.cfg.get<bool>("naming", "saliency", true);

  const json& neurons = ex.at("neurons");
  const auto results = bounded_parallel_map<json>(
      static_cast<int64_t>(neurons.size()), max_in_flight(ws), [&](int64_t idx) -> json {
        const json& item = neurons[static_cast<size_t>(idx)];
        const int64_t j = item.at("neuron_id").get<int64_t>();
        json out = {{"neuron_id", j},
                    {"activation_count", counts.at(static_cast<size_t>(j))},
                    {"name", nullptr},
                    {"attempts", 0},
                    {"violations", json::array()}};
        if (item.at("examples").is_null()) {
          out["violations"].push_back("too few active or non-active samples");
          return out;
        }
        NamingInput in;
        in.examples = naming_from_json(item.at("examples").dump());
        for (int64_t s : in.examples.activating) {
          in.activating_png.push_back(cell_png(l.ds.manifest, s, cell));
          if (saliency) {
            const Tensor map = saliency_map(spatial_features(l.ds.manifest, s),
                                            sae.decoder_weights.row(j).transpose());
            in.saliency_png.push_back(encode_png(render_saliency(map, cell)));
          }
        }
        for (int64_t s : in.examples.nonactive_similar) {
          in.nonactive_png.push_back(cell_png(l.ds.manifest, s, cell));
        }
        for (int64_t s : in.examples.nonactive_random) {
          in.nonactive_png.push_back(cell_png(l.ds.manifest, s, cell));
        }
        const NameResult r = name_concept(*backend, in, l.ds.manifest.domain,
                                          l.ds.manifest.class_names, ps, nc);
        if (r.name) out["name"] = *r.name;
        out["attempts"] = r.attempts;
        out["violations"] = r.violations;
        return out;
      });
  int64_t named = 0;
  for (const json& r : results) named += r["name"].is_null() ? 0 : 1;
  write_json(ws.shared("naming/names.json"), {{"neurons", results}});
  write_report(ws, "name", {{"candidates", results.size()},
                            {"named", named},
                            {"unnamed", static_cast<int64_t>(results.size()) - named},
                            {"saliency", saliency},
                            {"artifacts", {"naming/names.json"}}});
}

void stage_merge(const Workspace& ws) {
  const json names = read_json(require(ws, ws.shared("naming/names.json"), "name"));
  const Loaded l = load(ws);
  std::vector<NamedNeuron> named;
  for (const json& n : names.at("neurons")) {
    if (n.at("name").is_null()) continue;
    named.push_back({n.at("neuron_id").get<int64_t>(), n.at("name").get<std::string>(),
                     n.at("activation_count").get<int64_t>()});
  }
  if (named.empty()) throw ValidationError("no named concepts to merge");
  const auto backend = make_backend(ws);
  std::vector<std::string> texts;
  for (const NamedNeuron& n : named) texts.push_back(n.name);
  const std::vector<Vec> emb =
      embed_names(*backend, texts, l.ds.manifest.domain, prompts(ws),
                  ws.cfg.get<std::string>("backend", "embedding_model", "text-embedding-3-large"));
  const ConceptSet set =
      merge_concepts(named, emb, ws.cfg.get<double>("merge", "threshold", 0.98));
  set.validate();
  save_concept_set(set, ws.shared("concepts.json"));
  write_report(ws, "merge", {{"named_neurons", named.size()},
                             {"concepts", set.size()},
                             {"merged_away", static_cast<int64_t>(named.size()) - set.size()},
                             {"artifacts", {"concepts.json"}}});
}

// ---------------------------------------------------------------- annotation

std::vector<std::string> annotation_splits(const Workspace& ws) {
  return ws.cfg.get<std::vector<std::string>>("annotation", "splits", {"train", "test"});
}

void stage_select_annotation(const Workspace& ws) {
  const ConceptSet concepts = load_concept_set(require(ws, ws.shared("concepts.json"), "merge"));
  const Loaded l = load(ws);
  const SAEParams sae = load_sae(ws.shared("sae"));
  const Mat hidden = sae_encode(sae, l.ds.features);
  AnnotationSelectConfig sc;
  sc.cap = ws.cfg.get<int64_t>("annotation", "cap", sc.cap);
  sc.percentile = ws.cfg.get<double>("annotation", "percentile", sc.percentile);

  std::vector<std::vector<int64_t>> references;
  const Mat train_hidden = rows_of(hidden, l.train);
  for (const Concept& c : concepts.concepts) {
    const Vec act = concept_activation(train_hidden, c.neuron_ids);
    std::vector<int64_t> ids = top_activating(act, kGridCells);
    std::erase_if(ids, [&](int64_t i) { return !(act[i] > 0.0); });
    references.push_back(map_ids(ids, l.train));
  }

  json report = {{"splits", json::object()}};
  json artifacts = json::array();
  for (const std::string& split : annotation_splits(ws)) {
    const std::vector<int64_t> ids = eval_ids(l, split);
    const Mat feats = l.ds.rows(ids);
    const std::vector<int64_t> labels = labels_of(l, ids);
    const Mat h = rows_of(hidden, ids);
    json plans = json::array();
    int64_t skipped = 0;
    int64_t batches = 0;
    for (const Concept& c : concepts.concepts) {
      const Vec act = concept_activation(h, c.neuron_ids);
      AnnotationPlan p = select_annotation_set(act, labels, feats, ws.cfg.seed, c.concept_id, sc);
      p.active_ids = map_ids(p.active_ids, ids);
      p.nonactive_ids = map_ids(p.nonactive_ids, ids);
      p.nonactive_similar = map_ids(p.nonactive_similar, ids);
      p.nonactive_random = map_ids(p.nonactive_random, ids);
      for (auto& b : p.batches) b = map_ids(b, ids);
      p.reference_ids = references[static_cast<size_t>(c.concept_id)];
      if (p.reference_ids.size() < static_cast<size_t>(kGridCells) && !p.skipped) {
        p.skipped = "fewer than 25 active training samples for the reference grid";
      }
      if (p.skipped) {
        p.batches.clear();
        ++skipped;
      }
      batches += static_cast<int64_t>(p.batches.size());
      plans.push_back(json::parse(plan_to_json(p)));
    }
    const fs::path path = ws.shared("plans/" + split + ".json");
    write_json(path, {{"split", split}, {"plans", plans}});
    artifacts.push_back(ws.rel(path));
    report["splits"][split] = {{"concepts", plans.size()}, {"skipped", skipped}, {"batches", batches}};
  }
  report["artifacts"] = artifacts;
  write_report(ws, "select-annotation", report);
}

struct BatchTask {
  std::string split;
  int64_t concept_id = 0;
  size_t batch = 0;
  std::vector<int64_t> ids;
};

void stage_annotate(const Workspace& ws) {
  const ConceptSet concepts =
      load_concept_set(require(ws, ws.local("concepts.json"), ws.random_names ? "leakage" : "merge"));
  const Loaded l = load(ws);
  const auto backend = make_backend(ws);
  const PromptSet ps = prompts(ws);
  const int cell = ws.cfg.get<int>("annotation", "cell_size", 128);
  AnnotateConfig ac;
  ac.model = ws.cfg.get<std::string>("backend", "chat_model", ac.model);
  ac.mode = parse_annotate_mode(ws.cfg.get<std::string>("annotation", "mode", "grid"));

  auto grid_for = [&](const std::vector<int64_t>& ids, const fs::path& out) {
    std::vector<fs::path> paths;
    for (int64_t s : ids) paths.push_back(l.ds.manifest.image_path(s));
    Grid g = compose_grid(paths, ids, cell);
    write_text(out, g.png);
    return g;
  };

  std::map<int64_t, std::string> reference;
  json report = {{"mode", ac.mode == AnnotateMode::kGrid ? "grid" : "single"},
                 {"reference_grids", !ws.random_names},
                 {"splits", json::object()}};
  json artifacts = json::array();
  for (const std::string& split : annotation_splits(ws)) {
    const json plans = read_json(require(ws, ws.shared("plans/" + split + ".json"), "select-annotation"));
    std::vector<BatchTask> tasks;
    for (const json& pj : plans.at("plans")) {
      const AnnotationPlan p = plan_from_json(pj.dump());
      if (!concepts.contains(p.concept_id)) {
        throw ValidationError("plan refers to unknown concept " + std::to_string(p.concept_id));
      }
      if (p.skipped) continue;
      if (!ws.random_names && !reference.count(p.concept_id)) {
        reference[p.concept_id] =
            grid_for(p.reference_ids,
                     ws.local("grids/reference/" + std::to_string(p.concept_id) + ".png"))
                .png;
      }
      for (size_t b = 0; b < p.batches.size(); ++b) tasks.push_back({split, p.concept_id, b, p.batches[b]});
    }
    const auto labels = bounded_parallel_map<std::optional<std::vector<int>>>(
        static_cast<int64_t>(tasks.size()), max_in_flight(ws), [&](int64_t t) {
          const BatchTask& task = tasks[static_cast<size_t>(t)];
          const Grid g = grid_for(task.ids, ws.local("grids/" + split + "/" +
                                                     std::to_string(task.concept_id) + "_" +
                                                     std::to_string(task.batch) + ".png"));
          std::optional<std::string> ref;
          if (!ws.random_names) ref = reference.at(task.concept_id);
          return annotate_batch(*backend, task.concept_id, concepts.at(task.concept_id).name, ref,
                                g, ps, ac);
        });
    AnnotationStore store;
    json dropped = json::array();
    for (size_t t = 0; t < tasks.size(); ++t) {
      if (!labels[t]) {
        dropped.push_back({{"concept", tasks[t].concept_id}, {"batch", tasks[t].batch}});
        continue;
      }
      for (size_t i = 0; i < tasks[t].ids.size(); ++i) {
        store.add(tasks[t].ids[i], tasks[t].concept_id, (*labels[t])[i]);
      }
    }
    const fs::path path = ws.local("annotations/" + split + ".jsonl");
    fs::create_directories(path.parent_path());
    save_annotations(store, path);
    artifacts.push_back(ws.rel(path));
    report["splits"][split] = {{"batches", tasks.size()},
                               {"annotated_pairs", store.size()},
                               {"dropped_batches", dropped}};
  }
  report["artifacts"] = artifacts;
  write_report(ws, "annotate", report);
}

// ---------------------------------------------------------------- CBM

ZStats train_z_stats(const CblModel& cbl, const Loaded& l) {
  ZStats stats;
  zscore_fit(concept_logits(cbl, l.ds.rows(l.train)), stats);
  return stats;
}

std::vector<bool> excluded_rows(const CblModel& cbl) {
  std::vector<bool> ex(static_cast<size_t>(cbl.num_concepts()), false);
  for (int64_t k : cbl.dropped) ex[static_cast<size_t>(k)] = true;
  return ex;
}

SolverConfig solver_config(const RunConfig& c) {
  SolverConfig s;
  s.max_epochs = c.get<int64_t>("head", "max_epochs", s.max_epochs);
  s.tol = c.get<double>("head", "tol", s.tol);
  s.step_scale = c.get<double>("head", "step_scale", s.step_scale);
  s.seed = c.seed;
  return s;
}

void stage_train_cbl(const Workspace& ws) {
  const ConceptSet concepts = load_concept_set(require(ws, ws.local("concepts.json"), "merge"));
  const AnnotationStore store = load_annotations(
      require(ws, ws.local("annotations/train.jsonl"), "annotate"), &concepts);
  const Loaded l = load(ws);
  CblTrainConfig tc;
  tc.lr = ws.cfg.get<double>("cbl", "lr", tc.lr);
  tc.epochs = ws.cfg.get<int64_t>("cbl", "epochs", tc.epochs);
  tc.patience = ws.cfg.get<int64_t>("cbl", "patience", tc.patience);
  tc.batch_size = ws.cfg.get<int64_t>("cbl", "batch_size", tc.batch_size);
  tc.holdout = ws.cfg.get<double>("cbl", "holdout", tc.holdout);
  tc.seed = ws.cfg.seed;
  const CblTrainResult r = train_cbl(l.ds.features, store, concepts.size(), tc);
  save_cbl(r.model, ws.local("cbl"));
  const auto& best = r.history.at(static_cast<size_t>(r.best_epoch));
  write_report(ws, "train-cbl", {{"concepts", concepts.size()},
                                 {"dropped", r.model.dropped},
                                 {"warnings", r.warnings},
                                 {"epochs_run", r.history.size()},
                                 {"best_epoch", r.best_epoch},
                                 {"train_loss", best.first},
                                 {"holdout_loss", best.second},
                                 {"artifacts", {ws.rel(ws.local("cbl/cbl.json"))}}});
}

void stage_fit_head(const Workspace& ws) {
  const CblModel cbl = load_cbl(require(ws, ws.local("cbl"), "train-cbl"));
  const Loaded l = load(ws);
  const double tau = ws.cfg.get<double>("sweep", "tau", 0.95);
  const double alpha = ws.cfg.get<double>("head", "alpha", 0.99);
  SparseHead head;
  head.z_stats = train_z_stats(cbl, l);
  const Mat z_train = zscore_apply(concept_logits(cbl, l.ds.rows(l.train)), head.z_stats);
  const Mat z_test = zscore_apply(concept_logits(cbl, l.ds.rows(l.test)), head.z_stats);
  const std::vector<int64_t> y_train = labels_of(l, l.train);
  const std::vector<int64_t> y_test = labels_of(l, l.test);
  const int64_t c = l.ds.manifest.num_classes;
  const double lmax = lambda_max(z_train, y_train, c, alpha);
  const double lambda = ws.cfg.get<double>("head", "lambda", 1e-3);
  const std::vector<bool> ex = excluded_rows(cbl);
  const ZStats stats = head.z_stats;
  head = fit_sparse_head(z_train, y_train, c, lambda, alpha, solver_config(ws.cfg), nullptr, &ex);
  head.z_stats = stats;
  save_head(head, ws.local("head"));
  write_report(ws, "fit-head",
               {{"lambda", lambda},
                {"lambda_max", lmax},
                {"alpha", alpha},
                {"epochs", head.epochs},
                {"converged", head.converged},
                {"objective", head.objective},
                {"train_accuracy", accuracy(argmax_rows(head.logits(z_train)), y_train)},
                {"test_accuracy", accuracy(argmax_rows(head.logits(z_test)), y_test)},
                {"nec", nec(head.weights)},
                {"ncc", ncc(z_test, head.weights, tau)},
                {"tau", tau},
                {"artifacts", {ws.rel(ws.local("head/head.json"))}}});
}

std::string target_dir_name(double t) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "target_%g", t);
  return buf;
}

void stage_sweep(const Workspace& ws) {
  const CblModel cbl = load_cbl(require(ws, ws.local("cbl"), "train-cbl"));
  const Loaded l = load(ws);
  SweepConfig sc;
  sc.tau = ws.cfg.get<double>("sweep", "tau", sc.tau);
  sc.targets = ws.cfg.get<std::vector<double>>("sweep", "targets", sc.targets);
  std::sort(sc.targets.begin(), sc.targets.end());
  sc.grid_points = ws.cfg.get<int64_t>("sweep", "grid_points", sc.grid_points);
  sc.decades = ws.cfg.get<double>("sweep", "decades", sc.decades);
  sc.tolerance = ws.cfg.get<double>("sweep", "tolerance", sc.tolerance);
  sc.max_bisections = ws.cfg.get<int64_t>("sweep", "max_bisections", sc.max_bisections);
  sc.alpha = ws.cfg.get<double>("head", "alpha", sc.alpha);
  sc.solver = solver_config(ws.cfg);
  const std::string eval_split = ws.cfg.get<std::string>("sweep", "eval_split", "test");

  const ZStats stats = train_z_stats(cbl, l);
  const Mat z_fit = zscore_apply(concept_logits(cbl, l.ds.rows(l.train)), stats);
  const std::vector<int64_t> eval = eval_ids(l, eval_split);
  const Mat z_eval = zscore_apply(concept_logits(cbl, l.ds.rows(eval)), stats);
  const std::vector<bool> ex = excluded_rows(cbl);
  const SweepResult r = sweep_to_ncc(z_fit, labels_of(l, l.train), z_eval, labels_of(l, eval),
                                     l.ds.manifest.num_classes, sc, &ex);
  auto point_json = [](const SweepPoint& p) {
    return json{{"lambda", p.lambda}, {"ncc", p.ncc}, {"accuracy", p.accuracy}, {"nec", p.nec}};
  };
  json grid = json::array();
  for (const SweepPoint& p : r.grid) grid.push_back(point_json(p));
  json targets = json::array();
  for (const TargetResult& t : r.targets) {
    SparseHead h = t.head;
    h.z_stats = stats;
    const fs::path dir = ws.local("sweep/" + target_dir_name(t.target));
    save_head(h, dir);
    json tj = point_json(t.point);
    tj["target"] = t.target;
    tj["status"] = status_name(t.status);
    tj["bisection_steps"] = t.bisection_steps;
    tj["head"] = ws.rel(dir);
    targets.push_back(tj);
  }
  const json body = {{"tau", sc.tau},
                     {"eval_split", eval_split},
                     {"lambda_max", r.lambda_max},
                     {"grid", grid},
                     {"targets", targets},
                     {"avg_accuracy", r.avg_accuracy}};
  write_json(ws.local("sweep/sweep.json"), body);
  json report = body;
  report.erase("grid");
  report["artifacts"] = {ws.rel(ws.local("sweep/sweep.json"))};
  write_report(ws, "sweep", report);
}

// ---------------------------------------------------------------- evaluation

void stage_evaluate(const Workspace& ws) {
  const CblModel cbl = load_cbl(require(ws, ws.local("cbl"), "train-cbl"));
  const ConceptSet concepts = load_concept_set(ws.local("concepts.json"));
  const Loaded l = load(ws);
  const double tau = ws.cfg.get<double>("sweep", "tau", 0.95);
  const Mat test_feats = l.ds.rows(l.test);
  const std::vector<int64_t> y = labels_of(l, l.test);
  const Mat raw = concept_logits(cbl, test_feats);

  std::vector<std::pair<std::string, fs::path>> heads;
  if (fs::exists(ws.local("head/head.json"))) heads.emplace_back("head", ws.local("head"));
  if (fs::exists(ws.local("sweep/sweep.json"))) {
    for (const json& t : read_json(ws.local("sweep/sweep.json")).at("targets")) {
      heads.emplace_back(target_dir_name(t.at("target").get<double>()),
                         ws.out / t.at("head").get<std::string>());
    }
  }
  if (heads.empty()) throw ValidationError("no fitted head found (run 'fit-head' or 'sweep' first)");

  json models = json::array();
  for (const auto& [name, dir] : heads) {
    const SparseHead h = load_head(dir);
    const Mat z = zscore_apply(raw, h.z_stats);
    const std::vector<int64_t> pred = argmax_rows(h.logits(z));
    models.push_back({{"name", name},
                      {"head", ws.rel(dir)},
                      {"lambda", h.lambda},
                      {"accuracy", accuracy(pred, y)},
                      {"balanced_accuracy", balanced_accuracy(pred, y)},
                      {"nec", nec(h.weights)},
                      {"ncc", ncc(z, h.weights, tau)},
                      {"ncc_predicted", ncc(z, h.weights, tau, NccMode::kPredictedClass, pred)}});
  }
  json body = {{"split", "test"}, {"tau", tau}, {"models", models}};

  const fs::path test_ann = ws.local("annotations/test.jsonl");
  if (fs::exists(test_ann)) {
    const AnnotationStore store = load_annotations(test_ann, &concepts);
    std::vector<std::vector<double>> scores(static_cast<size_t>(concepts.size()));
    std::vector<std::vector<int>> labels(static_cast<size_t>(concepts.size()));
    std::map<int64_t, Eigen::Index> row_of;
    for (size_t r = 0; r < l.test.size(); ++r) row_of[l.test[r]] = static_cast<Eigen::Index>(r);
    for (const Annotation& a : store.triples()) {
      const auto it = row_of.find(a.sample);
      if (it == row_of.end()) continue;
      scores[static_cast<size_t>(a.concept_id)].push_back(raw(it->second, a.concept_id));
      labels[static_cast<size_t>(a.concept_id)].push_back(a.label);
    }
    for (int64_t k : cbl.dropped) {
      scores[static_cast<size_t>(k)].clear();
      labels[static_cast<size_t>(k)].clear();
    }
    const ConceptAucReport auc = concept_roc_auc(scores, labels);
    body["concept_auc"] = {{"macro", auc.macro},
                           {"worst_decile", auc.worst_decile},
                           {"concept_ids", auc.concept_ids},
                           {"auc", auc.auc},
                           {"excluded", auc.excluded}};
  }
  write_json(ws.local("evaluation.json"), body);
  body["artifacts"] = {ws.rel(ws.local("evaluation.json"))};
  write_report(ws, "evaluate", body);
}

fs::path explain_head_dir(const Workspace& ws) {
  const json target = ws.cfg.settings.contains("explain") && ws.cfg.settings["explain"].contains("target")
                          ? ws.cfg.settings["explain"]["target"]
                          : json(nullptr);
  if (!target.is_null()) {
    const fs::path dir = ws.local("sweep/" + target_dir_name(target.get<double>()));
    return require(ws, dir / "head.json", "sweep").parent_path();
  }
  if (fs::exists(ws.local("head/head.json"))) return ws.local("head");
  throw ValidationError("no fitted head found (run 'fit-head' or set explain.target)");
}

void stage_explain(const Workspace& ws) {
  CbmModel model;
  model.cbl = load_cbl(require(ws, ws.local("cbl"), "train-cbl"));
  const fs::path head_dir = explain_head_dir(ws);
  model.head = load_head(head_dir);
  model.tau = ws.cfg.get<double>("sweep", "tau", 0.95);
  const ConceptSet concepts = load_concept_set(ws.local("concepts.json"));
  const Loaded l = load(ws);
  const auto& classes = l.ds.manifest.class_names;
  const int64_t top_k = ws.cfg.get<int64_t>("explain", "top_k", 5);
  std::vector<int64_t> samples = ws.cfg.get<std::vector<int64_t>>("explain", "samples", {});
  if (samples.empty()) {
    samples.assign(l.test.begin(), l.test.begin() + std::min<size_t>(5, l.test.size()));
  }
  json artifacts = json::array();
  json counterfactuals = json::array();
  for (int64_t s : samples) {
    if (s < 0 || s >= l.ds.manifest.num_samples) {
      throw ValidationError("explain sample " + std::to_string(s) + " is out of range");
    }
    const Vec f = l.ds.features.row(s).transpose();
    const LocalExplanation ex = local_explanation(model, concepts, f, std::nullopt, top_k, s);
    const std::string stem = "explain/local_" + std::to_string(s);
    write_text(ws.local(stem + ".json"), explanation_json(ex, classes));
    write_text(ws.local(stem + ".svg"), explanation_svg(ex, classes));
    artifacts.push_back(ws.rel(ws.local(stem + ".json")));
    artifacts.push_back(ws.rel(ws.local(stem + ".svg")));
    json flips = json::array();
    for (const Contribution& c : ex.ranked) {
      const auto [before, after] = counterfactual_zero(model, f, c.concept_id);
      flips.push_back({{"concept_id", c.concept_id},
                       {"name", c.name},
                       {"before", before},
                       {"after", after},
                       {"flipped", before != after}});
    }
    counterfactuals.push_back({{"sample", s}, {"label", l.ds.labels[static_cast<size_t>(s)]},
                               {"zeroed", flips}});
  }
  write_json(ws.local("explain/counterfactual.json"), counterfactuals);
  write_text(ws.local("explain/sankey.json"),
             global_sankey(model.head.weights, concepts.names(), classes,
                           ws.cfg.get<double>("explain", "threshold", 0.1),
                           ws.cfg.get<std::vector<int64_t>>("explain", "classes", {})));
  const Mat test_logits = concept_logits(model.cbl, l.ds.rows(l.test));
  json tops = json::array();
  for (const Concept& c : concepts.concepts) {
    tops.push_back({{"concept_id", c.concept_id},
                    {"name", c.name},
                    {"samples", map_ids(top_activating(test_logits.col(c.concept_id), 5), l.test)}});
  }
  write_json(ws.local("explain/top_activating.json"), tops);
  for (const char* f : {"explain/counterfactual.json", "explain/sankey.json", "explain/top_activating.json"}) {
    artifacts.push_back(ws.rel(ws.local(f)));
  }
  write_report(ws, "explain", {{"head", ws.rel(head_dir)},
                               {"samples", samples},
                               {"artifacts", artifacts}});
}

void stage_params(const Workspace& ws) {
  const ConceptSet concepts = load_concept_set(require(ws, ws.shared("concepts.json"), "merge"));
  const DatasetManifest m = load_manifest(ws.cfg.manifest);
  const ParamCounts p = param_counts(m.backbone_params, m.feature_dim, concepts.size(), m.num_classes);
  json body = {{"n", m.feature_dim},
               {"K", concepts.size()},
               {"C", m.num_classes},
               {"cbl", p.cbl},
               {"head", p.head},
               {"cbm", p.cbm},
               {"cbm_millions", millions(p.cbm)}};
  body["backbone"] = p.backbone ? json(*p.backbone) : json(nullptr);
  body["total"] = p.total ? json(*p.total) : json(nullptr);
  body["total_millions"] = p.total ? json(millions(*p.total)) : json(nullptr);
  write_report(ws, "params", body);
}

// ---------------------------------------------------------------- leakage

std::vector<CurvePoint> curve_points(const fs::path& sweep_json) {
  std::vector<CurvePoint> pts;
  for (const json& t : read_json(sweep_json).at("targets")) {
    if (t.at("status").get<std::string>() == "infeasible") continue;
    pts.push_back({t.at("target").get<double>(), t.at("ncc").get<double>(),
                   t.at("accuracy").get<double>()});
  }
  return pts;
}

void stage_leakage(const Workspace& ws) {
  const std::string words = ws.cfg.get<std::string>("leakage", "word_list", "");
  if (words.empty()) throw ValidationError("leakage needs leakage.word_list in the config");
  const ConceptSet real = load_concept_set(require(ws, ws.shared("concepts.json"), "merge"));
  require(ws, ws.shared("sweep/sweep.json"), "sweep");
  RandomNameConfig rc;
  rc.word_list_path = ws.cfg.resolve(words);
  rc.prefix = ws.cfg.get<std::string>("leakage", "prefix", rc.prefix);
  rc.min_len = ws.cfg.get<int>("leakage", "min_len", rc.min_len);
  rc.max_len = ws.cfg.get<int>("leakage", "max_len", rc.max_len);
  rc.seed = ws.cfg.seed;
  const std::vector<std::string> names = random_concept_names(real.size(), rc);

  Workspace variant{ws.cfg, ws.out, ws.out / "leakage", true};
  ConceptSet renamed = real;
  for (size_t k = 0; k < renamed.concepts.size(); ++k) {
    renamed.concepts[k].name = names[k];
    renamed.concepts[k].merged_from.clear();
  }
  fs::create_directories(variant.root);
  save_concept_set(renamed, variant.local("concepts.json"));
  stage_annotate(variant);
  stage_train_cbl(variant);
  stage_sweep(variant);

  const LeakageCurve curve =
      leakage_curve(curve_points(ws.shared("sweep/sweep.json")),
                    curve_points(variant.local("sweep/sweep.json")));
  write_text(variant.local("curve.json"), curve_json(curve));
  write_text(variant.local("curve.csv"), curve_csv(curve));
  json gap = json::array();
  for (const auto& [t, g] : curve.gap) gap.push_back({{"target", t}, {"gap", g}});
  write_report(ws, "leakage", {{"random_names", names},
                               {"gap", gap},
                               {"artifacts", {"leakage/curve.json", "leakage/curve.csv",
                                              "leakage/concepts.json"}}});
}

// ---------------------------------------------------------------- dispatch

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void log_line(const fs::path& out, const std::string& line) {
  fs::create_directories(out);
  std::ofstream log(out / "run.log", std::ios::app);
  log << timestamp() << " " << line << "\n";
}

void dispatch(const std::string& stage, const Workspace& ws) {
  static const std::map<std::string, std::function<void(const Workspace&)>> table = {
      {"train-sae", stage_train_sae},
      {"sae-report", stage_sae_report},
      {"prune", stage_prune},
      {"select-naming", stage_select_naming},
      {"name", stage_name},
      {"merge", stage_merge},
      {"select-annotation", stage_select_annotation},
      {"annotate", stage_annotate},
      {"train-cbl", stage_train_cbl},
      {"fit-head", stage_fit_head},
      {"sweep", stage_sweep},
      {"evaluate", stage_evaluate},
      {"explain", stage_explain},
      {"params", stage_params},
      {"leakage", stage_leakage},
  };
  const auto it = table.find(stage);
  if (it == table.end()) throw ValidationError("unknown stage '" + stage + "'");
  const auto start = std::chrono::steady_clock::now();
  log_line(ws.out, stage + " started");
  try {
    it->second(ws);
  } catch (const std::exception& e) {
    log_line(ws.out, stage + " failed: " + e.what());
    throw;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  char buf[64];
  std::snprintf(buf, sizeof buf, " finished in %.2fs", secs);
  log_line(ws.out, stage + buf);
}

}  // namespace

void run_stage(const std::string& stage, const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  const Workspace ws{cfg, cfg.out, cfg.out, false};
  if (stage != "pipeline") {
    dispatch(stage, ws);
    return;
  }
  const bool leakage = cfg.settings.contains("leakage") &&
                       cfg.get<std::string>("leakage", "word_list", "") != "";
  for (const std::string& s : pipeline_stages()) {
    if (s == "leakage" && !leakage) continue;
    dispatch(s, ws);
  }
}

}  // namespace mcbm
