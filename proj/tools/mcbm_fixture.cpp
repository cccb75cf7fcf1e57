// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mcbm/stages.hpp"
#include "mcbm/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write the planted-concept fixture"};
  mcbm::SyntheticConfig cfg;
  std::string out;
  app.add_option("out", out, "Destination directory")->required();
  app.add_option("--samples", cfg.num_samples, "Number of samples");
  app.add_option("--dim", cfg.feature_dim, "Feature dimension");
  app.add_option("--noise", cfg.noise, "Feature noise scale");
  app.add_option("--seed", cfg.seed, "Generator seed");
  CLI11_PARSE(app, argc, argv);
  try {
    mcbm::write_synthetic_fixture(cfg, out);
  } catch (const std::exception& e) {
    std::cerr << "mcbm-fixture: " << e.what() << "\n";
    return mcbm::exit_code_for(e);
  }
  return 0;
}
