// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcbm/error.hpp"

namespace mcbm {

// Dense compute types. Samples are rows throughout.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

/// Shape-tagged row-major buffer, the unit of on-disk storage.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_)) {}

  BasicTensor(std::vector<int64_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != checked_size(shape_)) {
      throw ContractError("tensor data length does not match shape");
    }
  }

  const std::vector<int64_t>& shape() const noexcept { return shape_; }
  int64_t rank() const noexcept { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t axis) const { return shape_.at(static_cast<size_t>(axis)); }
  int64_t size() const noexcept { return static_cast<int64_t>(data_.size()); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  bool operator==(const BasicTensor&) const = default;

 private:
  static int64_t checked_size(const std::vector<int64_t>& shape) {
    if (shape.empty()) throw ContractError("tensor must have rank >= 1");
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d <= 0) throw ContractError("tensor extents must be positive");
      n *= d;
    }
    return n;
  }

  std::vector<int64_t> shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using LabelTensor = BasicTensor<int64_t>;

std::string shape_string(const std::vector<int64_t>& shape);

/// Rank-1 or rank-2 float tensor to a compute matrix (rank-1 becomes a row).
Mat to_matrix(const Tensor& t);
Vec to_vector(const Tensor& t);
Tensor from_matrix(const Mat& m);
Tensor from_vector(const Vec& v);

std::vector<int64_t> to_labels(const LabelTensor& t);
LabelTensor from_labels(std::span<const int64_t> labels);

}  // namespace mcbm
