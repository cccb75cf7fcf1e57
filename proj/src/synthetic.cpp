// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/synthetic.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "mcbm/cbm.hpp"
#include "mcbm/image.hpp"
#include "mcbm/npy.hpp"

namespace mcbm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<std::array<uint8_t, 3>, 6> kPatchColors = {{
    {220, 40, 40}, {40, 200, 60}, {250, 250, 250}, {240, 210, 30}, {60, 90, 230}, {150, 60, 180},
}};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
}

Image render_sample(int64_t sample, const Mat& concepts, int size) {
  Image img(size, size);
  const uint8_t r = static_cast<uint8_t>(sample & 255);
  const uint8_t g = static_cast<uint8_t>((sample >> 8) & 255);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      uint8_t* p = img.px(x, y);
      p[0] = static_cast<uint8_t>(60 + (r % 40));
      p[1] = static_cast<uint8_t>(60 + (g % 40));
      p[2] = 70;
    }
  }
  // Unique identity stripe on the first row.
  for (int x = 0; x < size; ++x) {
    uint8_t* p = img.px(x, 0);
    p[0] = r;
    p[1] = g;
    p[2] = static_cast<uint8_t>(x * 16);
  }
  const int patch = std::max(2, size / 4);
  for (Eigen::Index k = 0; k < concepts.cols(); ++k) {
    if (concepts(sample, k) < 0.5) continue;
    const int cx = static_cast<int>(k % 3) * (size / 3) + 1;
    const int cy = static_cast<int>(k / 3) * (size / 2) + 2;
    const auto& col = kPatchColors[static_cast<size_t>(k) % kPatchColors.size()];
    for (int y = cy; y < std::min(size, cy + patch); ++y) {
      for (int x = cx; x < std::min(size, cx + patch); ++x) std::copy_n(col.data(), 3, img.px(x, y));
    }
  }
  return img;
}

}  // namespace

int64_t synthetic_class(const std::vector<int>& c) {
  if (c.size() != 6) throw ContractError("synthetic_class needs 6 concepts");
  const int left = c[0] + c[1] + c[4];
  const int right = c[2] + c[3] + c[5];
  if (left > right) return 0;
  if (left < right) return 1;
  return 2;
}

std::vector<std::string> synthetic_concept_names() {
  return {"red crown patch", "green wing bars", "white eyebrow stripe",
          "yellow belly",    "blue tail tip",   "purple throat spot"};
}

std::vector<std::string> synthetic_class_names() {
  return {"alder warbler", "birch finch", "cedar sparrow"};
}

SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.num_concepts != 6) throw ContractError("synthetic fixture has exactly 6 concepts");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const int64_t n = cfg.num_samples;
  const int64_t d = cfg.feature_dim;
  const int64_t k = cfg.num_concepts;
  const int64_t s = cfg.spatial_side;
  const int64_t cells = s * s;

  SyntheticData data;
  data.directions.resize(k, d);
  for (int64_t j = 0; j < k; ++j) {
    for (int64_t c = 0; c < d; ++c) data.directions(j, c) = gauss(rng);
    data.directions.row(j).normalize();
  }
  data.concepts = Mat::Zero(n, k);
  data.features = Mat::Zero(n, d);
  data.spatial = Tensor({n, s, s, d});
  std::vector<double> cell(static_cast<size_t>(cells * d));
  for (int64_t i = 0; i < n; ++i) {
    std::vector<int> bits(static_cast<size_t>(k));
    std::fill(cell.begin(), cell.end(), 0.0);
    for (int64_t j = 0; j < k; ++j) {
      bits[static_cast<size_t>(j)] = unif(rng) < cfg.concept_prob ? 1 : 0;
      const double scale = 0.75 + 0.5 * unif(rng);
      if (!bits[static_cast<size_t>(j)]) continue;
      data.concepts(i, j) = 1.0;
      const int64_t home = j % cells;
      for (int64_t c = 0; c < d; ++c) {
        cell[static_cast<size_t>(home * d + c)] += scale * data.directions(j, c);
      }
    }
    for (double& v : cell) v += 0.5 * cfg.noise * gauss(rng);
    for (int64_t p = 0; p < cells; ++p) {
      for (int64_t c = 0; c < d; ++c) {
        const double v = cell[static_cast<size_t>(p * d + c)];
        data.spatial[(i * cells + p) * d + c] = static_cast<float>(v);
        data.features(i, c) += v;
      }
    }
    data.labels.push_back(synthetic_class(bits));
  }

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<int64_t>(cfg.train_fraction * static_cast<double>(n));
  const auto n_val = static_cast<int64_t>(cfg.val_fraction * static_cast<double>(n));
  data.splits.assign(static_cast<size_t>(n), Split::kTest);
  for (int64_t r = 0; r < n; ++r) {
    const Split tag = r < n_train ? Split::kTrain : (r < n_train + n_val ? Split::kVal : Split::kTest);
    data.splits[static_cast<size_t>(order[static_cast<size_t>(r)])] = tag;
  }
  return data;
}

void write_synthetic_fixture(const SyntheticConfig& cfg, const fs::path& dir) {
  const SyntheticData data = generate_synthetic(cfg);
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "mock");

  const Tensor features = from_matrix(data.features);
  npy::write_tensor(dir / "features.npy", features);
  npy::write_tensor(dir / "spatial.npy", data.spatial);
  npy::write_tensor(dir / "labels.npy", from_labels(data.labels));

  // Black-box head: ridge-regularized multinomial logistic fit on the
  // float32 features of the training split.
  const Mat stored = to_matrix(features);
  std::vector<int64_t> train_ids;
  for (size_t i = 0; i < data.splits.size(); ++i) {
    if (data.splits[i] == Split::kTrain) train_ids.push_back(static_cast<int64_t>(i));
  }
  Mat xt(static_cast<Eigen::Index>(train_ids.size()), stored.cols());
  std::vector<int64_t> yt;
  for (size_t r = 0; r < train_ids.size(); ++r) {
    xt.row(static_cast<Eigen::Index>(r)) = stored.row(train_ids[r]);
    yt.push_back(data.labels[static_cast<size_t>(train_ids[r])]);
  }
  SolverConfig solver;
  solver.max_epochs = 500;
  solver.tol = 1e-9;
  solver.seed = cfg.seed;
  const SparseHead head = fit_sparse_head(xt, yt, kSyntheticClasses, 1e-3, 0.0, solver);
  npy::write_tensor(dir / "head_weights.npy", from_matrix(head.weights));
  npy::write_tensor(dir / "head_bias.npy", from_vector(head.bias));

  DatasetManifest m;
  m.features_path = "features.npy";
  m.spatial_features_path = "spatial.npy";
  m.labels_path = "labels.npy";
  m.head_weights_path = "head_weights.npy";
  m.head_bias_path = "head_bias.npy";
  for (int64_t i = 0; i < cfg.num_samples; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%04lld.png", static_cast<long long>(i));
    m.image_paths.emplace_back(name);
    write_text(dir / name, encode_png(render_sample(i, data.concepts, cfg.image_size)));
  }
  m.splits = data.splits;
  m.class_names = synthetic_class_names();
  m.domain = "bird species";
  m.backbone_params = 0;
  m.preprocessing = "synthetic planted-concept fixture";
  save_manifest(m, dir / "manifest.json");

  const std::vector<std::string> names = synthetic_concept_names();
  npy::write_tensor(dir / "mock" / "oracle.npy", from_matrix(data.concepts));
  write_text(dir / "mock" / "names.json", json{{"columns", names}}.dump(2) + "\n");
  npy::write_tensor(dir / "concepts.npy", from_matrix(data.concepts));

  const std::vector<std::string> words = {
      "pizza",  "lamp",   "river",  "candle", "violin", "tulip",  "anchor", "basket", "cactus",
      "dune",   "ember",  "fjord",  "garnet", "harbor", "igloo",  "jigsaw", "kettle", "lantern",
      "meadow", "nickel", "oyster", "pebble", "quartz", "ribbon", "saddle", "teapot", "umbra",
      "velvet", "walnut", "yarn",   "zephyr", "ab",     "Capital", "toolongword", "x1y"};
  std::string list;
  for (const std::string& w : words) list += w + "\n";
  write_text(dir / "words.txt", list);

  const json config = {
      {"seed", cfg.seed},
      {"backend", {{"kind", "mock"}, {"mock_dir", "mock"}, {"max_in_flight", 4}}},
      {"sae",
       {{"expansion", 2.0},
        {"lambda", 8e-2},
        {"lr", 3e-3},
        {"epochs", 600},
        {"patience", 40},
        {"batch_size", 32}}},
      {"prune", {{"tolerance", 0.01}}},
      {"naming", {{"cell_size", 32}}},
      {"annotation", {{"cell_size", 32}, {"mode", "grid"}}},
      {"cbl", {{"lr", 1e-2}, {"epochs", 500}, {"patience", 40}, {"batch_size", 64}}},
      {"head", {{"lambda", 1e-2}}},
      {"sweep", {{"tau", 0.95}, {"targets", {2, 3, 4, 5}}}},
      {"explain", {{"target", 4}}},
      {"leakage", {{"word_list", "words.txt"}, {"prefix", "bird "}}}};
  write_text(dir / "config.json", config.dump(2) + "\n");
}

}  // namespace mcbm
