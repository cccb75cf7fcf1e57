// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/manifest.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mcbm/npy.hpp"

namespace mcbm {

namespace fs = std::filesystem;
using nlohmann::json;

Split parse_split(const std::string& tag) {
  if (tag == "train") return Split::kTrain;
  if (tag == "val") return Split::kVal;
  if (tag == "test") return Split::kTest;
  throw ValidationError("invalid split tag '" + tag + "' (expected train, val or test)");
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

fs::path DatasetManifest::image_path(int64_t sample) const {
  const fs::path p = image_paths.at(static_cast<size_t>(sample));
  return p.is_absolute() ? p : root / p;
}

std::vector<int64_t> DatasetManifest::indices(Split s) const {
  std::vector<int64_t> out;
  for (size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == s) out.push_back(static_cast<int64_t>(i));
  }
  return out;
}

namespace {

fs::path resolve(const fs::path& root, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : root / path;
}

std::string relative_to(const fs::path& root, const fs::path& p) {
  if (p.is_relative()) return p.generic_string();
  return fs::relative(p, root).generic_string();
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }

  DatasetManifest m;
  m.root = fs::absolute(path).parent_path();
  std::vector<std::string> problems;

  auto require_string = [&](const char* key) -> std::string {
    if (!j.contains(key) || !j[key].is_string()) {
      problems.push_back(std::string("missing string field '") + key + "'");
      return {};
    }
    return j[key].get<std::string>();
  };
  auto require_strings = [&](const char* key) -> std::vector<std::string> {
    if (!j.contains(key) || !j[key].is_array()) {
      problems.push_back(std::string("missing array field '") + key + "'");
      return {};
    }
    try {
      return j[key].get<std::vector<std::string>>();
    } catch (const json::exception&) {
      problems.push_back(std::string("field '") + key + "' must hold strings");
      return {};
    }
  };

  const std::string features = require_string("features_path");
  const std::string labels = require_string("labels_path");
  const std::string head_w = require_string("head_weights_path");
  const std::string head_b = require_string("head_bias_path");
  m.image_paths = require_strings("image_paths");
  const auto split_tags = require_strings("splits");
  m.class_names = require_strings("class_names");
  m.domain = require_string("domain");
  if (j.contains("spatial_features_path") && !j["spatial_features_path"].is_null()) {
    m.spatial_features_path = resolve(m.root, j["spatial_features_path"].get<std::string>());
  }
  if (j.contains("backbone_params") && j["backbone_params"].is_number_integer()) {
    m.backbone_params = j["backbone_params"].get<int64_t>();
  }
  if (j.contains("preprocessing")) {
    m.preprocessing = j["preprocessing"].is_string() ? j["preprocessing"].get<std::string>()
                                                     : j["preprocessing"].dump();
  }
  if (!problems.empty()) {
    std::ostringstream os;
    os << "manifest " << path.string() << " is invalid:";
    for (const auto& p : problems) os << "\n  - " << p;
    throw ValidationError(os.str());
  }

  m.features_path = resolve(m.root, features);
  m.labels_path = resolve(m.root, labels);
  m.head_weights_path = resolve(m.root, head_w);
  m.head_bias_path = resolve(m.root, head_b);

  for (size_t i = 0; i < split_tags.size(); ++i) {
    try {
      m.splits.push_back(parse_split(split_tags[i]));
    } catch (const ValidationError& e) {
      problems.push_back("splits[" + std::to_string(i) + "]: " + e.what());
    }
  }

  auto header = [&](const fs::path& p, const char* field) -> std::optional<npy::Header> {
    try {
      return npy::read_header(p);
    } catch (const std::exception& e) {
      problems.push_back(std::string(field) + ": " + e.what());
      return std::nullopt;
    }
  };

  const auto fh = header(m.features_path, "features_path");
  const auto lh = header(m.labels_path, "labels_path");
  const auto hw = header(m.head_weights_path, "head_weights_path");
  const auto hb = header(m.head_bias_path, "head_bias_path");

  if (fh) {
    if (fh->dtype != npy::Dtype::kFloat32 || fh->shape.size() != 2) {
      problems.push_back("features_path must be a float32 N x n matrix, got shape " +
                         shape_string(fh->shape));
    } else {
      m.num_samples = fh->shape[0];
      m.feature_dim = fh->shape[1];
    }
  }
  if (lh) {
    if (lh->dtype != npy::Dtype::kInt64 || lh->shape.size() != 1) {
      problems.push_back("labels_path must be an int64 vector, got shape " +
                         shape_string(lh->shape));
    } else if (m.num_samples && lh->shape[0] != m.num_samples) {
      problems.push_back("labels_path has " + std::to_string(lh->shape[0]) +
                         " entries but features_path has " + std::to_string(m.num_samples) +
                         " rows");
    }
  }
  m.num_classes = static_cast<int64_t>(m.class_names.size());
  if (hw) {
    if (hw->dtype != npy::Dtype::kFloat32 || hw->shape.size() != 2) {
      problems.push_back("head_weights_path must be a float32 n x C matrix");
    } else {
      if (m.feature_dim && hw->shape[0] != m.feature_dim) {
        problems.push_back("head_weights_path has " + std::to_string(hw->shape[0]) +
                           " rows but features_path has width " + std::to_string(m.feature_dim));
      }
      if (hw->shape[1] != m.num_classes) {
        problems.push_back("head_weights_path has " + std::to_string(hw->shape[1]) +
                           " columns but class_names lists " + std::to_string(m.num_classes));
      }
    }
  }
  if (hb) {
    if (hb->dtype != npy::Dtype::kFloat32 || hb->shape.size() != 1) {
      problems.push_back("head_bias_path must be a float32 vector");
    } else if (hb->shape[0] != m.num_classes) {
      problems.push_back("head_bias_path has " + std::to_string(hb->shape[0]) +
                         " entries but class_names lists " + std::to_string(m.num_classes));
    }
  }
  if (m.num_samples) {
    if (static_cast<int64_t>(m.image_paths.size()) != m.num_samples) {
      problems.push_back("image_paths has " + std::to_string(m.image_paths.size()) +
                         " entries but features_path has " + std::to_string(m.num_samples) +
                         " rows");
    }
    if (static_cast<int64_t>(split_tags.size()) != m.num_samples) {
      problems.push_back("splits has " + std::to_string(split_tags.size()) +
                         " entries but features_path has " + std::to_string(m.num_samples) +
                         " rows");
    }
  }
  if (m.spatial_features_path) {
    const auto sh = header(*m.spatial_features_path, "spatial_features_path");
    if (sh) {
      if (sh->dtype != npy::Dtype::kFloat32 || sh->shape.size() != 4) {
        problems.push_back("spatial_features_path must be a float32 N x H x W x n tensor");
      } else {
        if (m.num_samples && sh->shape[0] != m.num_samples) {
          problems.push_back("spatial_features_path has " + std::to_string(sh->shape[0]) +
                             " samples but features_path has " + std::to_string(m.num_samples));
        }
        if (m.feature_dim && sh->shape[3] != m.feature_dim) {
          problems.push_back("spatial_features_path has " + std::to_string(sh->shape[3]) +
                             " channels but features_path has width " +
                             std::to_string(m.feature_dim));
        }
        m.spatial_h = sh->shape[1];
        m.spatial_w = sh->shape[2];
      }
    }
  }
  if (m.class_names.empty()) problems.push_back("class_names is empty");

  if (!problems.empty()) {
    std::ostringstream os;
    os << "manifest " << path.string() << " failed validation:";
    for (const auto& p : problems) os << "\n  - " << p;
    throw ValidationError(os.str());
  }
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  const fs::path root = fs::absolute(path).parent_path();
  json j;
  j["features_path"] = relative_to(root, m.features_path);
  if (m.spatial_features_path) {
    j["spatial_features_path"] = relative_to(root, *m.spatial_features_path);
  }
  j["labels_path"] = relative_to(root, m.labels_path);
  j["head_weights_path"] = relative_to(root, m.head_weights_path);
  j["head_bias_path"] = relative_to(root, m.head_bias_path);
  j["image_paths"] = m.image_paths;
  std::vector<std::string> tags;
  for (Split s : m.splits) tags.emplace_back(split_name(s));
  j["splits"] = tags;
  j["class_names"] = m.class_names;
  j["domain"] = m.domain;
  if (m.backbone_params) j["backbone_params"] = *m.backbone_params;
  if (!m.preprocessing.empty()) j["preprocessing"] = m.preprocessing;
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
}

Mat LinearHead::logits(const Mat& x) const {
  if (x.cols() != weights.rows()) throw ContractError("head input width mismatch");
  Mat out = x * weights;
  out.rowwise() += bias.transpose();
  return out;
}

Mat Dataset::rows(std::span<const int64_t> ids) const {
  Mat out(static_cast<Eigen::Index>(ids.size()), features.cols());
  for (size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = features.row(ids[i]);
  return out;
}

std::vector<int64_t> Dataset::labels_of(std::span<const int64_t> ids) const {
  std::vector<int64_t> out;
  out.reserve(ids.size());
  for (int64_t i : ids) out.push_back(labels[static_cast<size_t>(i)]);
  return out;
}

Dataset load_dataset(const fs::path& manifest_path) {
  Dataset d;
  d.manifest = load_manifest(manifest_path);
  d.features = to_matrix(npy::read_tensor(d.manifest.features_path));
  d.labels = to_labels(npy::read_labels(d.manifest.labels_path));
  for (size_t i = 0; i < d.labels.size(); ++i) {
    if (d.labels[i] < 0 || d.labels[i] >= d.manifest.num_classes) {
      throw ValidationError("labels_path: sample " + std::to_string(i) + " has class id " +
                            std::to_string(d.labels[i]) + " outside [0, " +
                            std::to_string(d.manifest.num_classes) + ")");
    }
  }
  d.head.weights = to_matrix(npy::read_tensor(d.manifest.head_weights_path));
  d.head.bias = to_vector(npy::read_tensor(d.manifest.head_bias_path));
  return d;
}

Tensor read_rows(const fs::path& path, std::span<const int64_t> rows) {
  const npy::Header h = npy::read_header(path);
  if (h.dtype != npy::Dtype::kFloat32) throw FormatError(path.string() + ": expected '<f4'");
  int64_t row_elems = 1;
  for (size_t i = 1; i < h.shape.size(); ++i) row_elems *= h.shape[i];
  std::ifstream in(path, std::ios::binary);
  std::vector<float> data(rows.size() * static_cast<size_t>(row_elems));
  for (size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= h.shape[0]) throw ContractError("read_rows: row out of range");
    in.seekg(static_cast<std::streamoff>(h.data_offset +
                                         static_cast<size_t>(rows[r] * row_elems) * sizeof(float)));
    in.read(reinterpret_cast<char*>(data.data() + r * static_cast<size_t>(row_elems)),
            static_cast<std::streamsize>(row_elems * sizeof(float)));
    if (!in) throw FormatError(path.string() + ": truncated data section");
  }
  std::vector<int64_t> shape = h.shape;
  shape[0] = static_cast<int64_t>(rows.size());
  return Tensor(shape, std::move(data));
}

Tensor spatial_features(const DatasetManifest& manifest, int64_t sample) {
  if (!manifest.spatial_features_path) {
    throw ValidationError("saliency unavailable: manifest has no spatial_features_path");
  }
  const int64_t id[] = {sample};
  Tensor t = read_rows(*manifest.spatial_features_path, id);
  return Tensor({t.dim(1), t.dim(2), t.dim(3)}, std::move(t.storage()));
}

}  // namespace mcbm
