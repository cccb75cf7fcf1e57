// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/tensor.hpp"

#include <sstream>

namespace mcbm {

std::string shape_string(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Mat to_matrix(const Tensor& t) {
  if (t.rank() == 1) {
    Mat m(1, t.dim(0));
    for (int64_t j = 0; j < t.dim(0); ++j) m(0, j) = t[j];
    return m;
  }
  if (t.rank() != 2) {
    throw ContractError("expected a rank-2 tensor, got shape " + shape_string(t.shape()));
  }
  Mat m(t.dim(0), t.dim(1));
  const auto src = t.data();
  for (int64_t i = 0; i < m.size(); ++i) m.data()[i] = src[static_cast<size_t>(i)];
  return m;
}

Vec to_vector(const Tensor& t) {
  Vec v(t.size());
  for (int64_t i = 0; i < t.size(); ++i) v[i] = t[i];
  return v;
}

Tensor from_matrix(const Mat& m) {
  Tensor t({m.rows(), m.cols()});
  for (int64_t i = 0; i < m.size(); ++i) t[i] = static_cast<float>(m.data()[i]);
  return t;
}

Tensor from_vector(const Vec& v) {
  Tensor t({v.size()});
  for (int64_t i = 0; i < v.size(); ++i) t[i] = static_cast<float>(v[i]);
  return t;
}

std::vector<int64_t> to_labels(const LabelTensor& t) {
  if (t.rank() != 1) throw ContractError("label tensor must be rank 1");
  return t.storage();
}

LabelTensor from_labels(std::span<const int64_t> labels) {
  return LabelTensor({static_cast<int64_t>(labels.size())},
                     std::vector<int64_t>(labels.begin(), labels.end()));
}

}  // namespace mcbm
