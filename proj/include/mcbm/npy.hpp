// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcbm/tensor.hpp"

namespace mcbm::npy {

// Supported subset: format version 1.0, C order, little-endian '<f4' or '<i8'.

enum class Dtype { kFloat32, kInt64 };

struct Header {
  Dtype dtype = Dtype::kFloat32;
  std::vector<int64_t> shape;
  size_t data_offset = 0;  // bytes from file start to the first element
};

/// Parses only the header; used to validate shapes without loading data.
Header read_header(const std::filesystem::path& path);

Tensor read_tensor(const std::filesystem::path& path);
LabelTensor read_labels(const std::filesystem::path& path);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
void write_tensor(const std::filesystem::path& path, const LabelTensor& t);

/// In-memory encoding, exposed for byte-level tests.
std::string encode(const Tensor& t);
std::string encode(const LabelTensor& t);
Tensor decode_tensor(const std::string& bytes, const std::string& origin = "<memory>");
LabelTensor decode_labels(const std::string& bytes, const std::string& origin = "<memory>");

}  // namespace mcbm::npy
