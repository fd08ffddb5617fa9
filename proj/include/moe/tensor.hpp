// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace moe {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

/// Dense row-major tensor of doubles. Rank 1 tensors behave as 1×n rows in
/// matrix contexts.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::initializer_list<double> v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Matrix view: rank 1 [n] is 1×n.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() & { return data_; }
  const std::vector<double>& values() const& { return data_; }
  std::vector<double> values() && { return std::move(data_); }

  double item() const;
  bool all_finite() const;
  void fill(double v);
  Tensor reshaped(Shape shape) const;

  /// Rows [begin, end) as a new tensor.
  Tensor row_slice(std::size_t begin, std::size_t end) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t shape_numel(const Shape& shape);

// Plain (non-recording) kernels. All reject shape mismatches with
// std::invalid_argument.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

double max_abs_diff(const Tensor& a, const Tensor& b);
double dot(std::span<const double> a, std::span<const double> b);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// FNV-1a over the raw little-endian bytes of the values and the shape.
std::uint64_t tensor_hash(const Tensor& t, std::uint64_t seed = 14695981039346656037ULL);

void require(bool cond, const std::string& message);

}  // namespace moe
