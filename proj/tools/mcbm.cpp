// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mcbm/error.hpp"
#include "mcbm/stages.hpp"

namespace {

using nlohmann::json;

struct Flags {
  std::string manifest;
  std::string out;
  std::string config;
  std::optional<uint64_t> seed;
  std::optional<double> lambda;
  std::optional<double> tau;
  std::string targets;
  std::optional<double> threshold;
  std::string mode;
  std::string backend;
};

std::vector<double> parse_targets(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw mcbm::ValidationError("bad --targets entry '" + item + "'");
    }
  }
  if (out.empty()) throw mcbm::ValidationError("--targets is empty");
  return out;
}

json overrides(const Flags& f) {
  json o = json::object();
  if (f.lambda) o["head"]["lambda"] = *f.lambda;
  if (f.tau) o["sweep"]["tau"] = *f.tau;
  if (!f.targets.empty()) o["sweep"]["targets"] = parse_targets(f.targets);
  if (f.threshold) {
    o["merge"]["threshold"] = *f.threshold;
    o["explain"]["threshold"] = *f.threshold;
  }
  if (!f.mode.empty()) o["annotation"]["mode"] = f.mode;
  if (!f.backend.empty()) o["backend"]["kind"] = f.backend;
  return o;
}

int run(const std::string& stage, const Flags& f) {
  try {
    auto opt = [](const std::string& s) {
      return s.empty() ? std::nullopt : std::optional<std::filesystem::path>(s);
    };
    const mcbm::RunConfig cfg =
        mcbm::make_run_config(opt(f.manifest), opt(f.out), opt(f.config), f.seed, overrides(f));
    mcbm::RunLock lock(cfg.out);
    mcbm::run_stage(stage, cfg);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "mcbm " << stage << ": " << e.what() << "\n";
    return mcbm::exit_code_for(e);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal concept bottleneck pipeline"};
  app.require_subcommand(1);
  Flags flags;
  std::vector<std::string> stages = mcbm::pipeline_stages();
  stages.push_back("pipeline");
  for (const std::string& stage : stages) {
    CLI::App* sub = app.add_subcommand(stage, "Run the " + stage + " stage");
    sub->add_option("--manifest", flags.manifest, "Dataset manifest JSON");
    sub->add_option("--out", flags.out, "Run output directory");
    sub->add_option("--config", flags.config, "JSON config overriding defaults");
    sub->add_option("--seed", flags.seed, "Global seed");
    sub->add_option("--lambda", flags.lambda, "Head regularization strength");
    sub->add_option("--tau", flags.tau, "NCC coverage fraction");
    sub->add_option("--targets", flags.targets, "Comma-separated NCC targets");
    sub->add_option("--threshold", flags.threshold, "Merge / sankey threshold");
    sub->add_option("--mode", flags.mode, "Annotation mode: grid or single");
    sub->add_option("--backend", flags.backend, "MLLM backend: mock or http");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  for (CLI::App* sub : app.get_subcommands()) return run(sub->get_name(), flags);
  return 2;
}
