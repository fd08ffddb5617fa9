// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace moe {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

}  // namespace

void require(bool cond, const std::string& message) {
  if (!cond) throw std::invalid_argument(message);
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_) require(d > 0, "tensor dimensions must be positive, got " + shape_str(shape_));
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  for (auto d : shape_) require(d > 0, "tensor dimensions must be positive, got " + shape_str(shape_));
  require(shape_numel(shape_) == data_.size(),
          "tensor " + shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)) + " values, got " +
              std::to_string(data_.size()));
}

Tensor Tensor::vector(std::initializer_list<double> v) {
  return Tensor({v.size()}, std::vector<double>(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> values;
  std::size_t c = rows.begin()->size();
  for (auto& r : rows) {
    require(r.size() == c, "ragged matrix literal");
    values.insert(values.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), c}, std::move(values));
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 2) return shape_[0];
  if (shape_.size() == 1) return 1;
  std::size_t n = 1;
  for (std::size_t i = 0; i + 1 < shape_.size(); ++i) n *= shape_[i];
  return n;
}

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

double Tensor::item() const {
  require(data_.size() == 1, "item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
  require(shape_numel(shape) == data_.size(), "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::row_slice(std::size_t begin, std::size_t end) const {
  require(begin < end && end <= rows(), "row slice out of range");
  std::vector<double> v(data_.begin() + static_cast<long>(begin * cols()),
                        data_.begin() + static_cast<long>(end * cols()));
  return Tensor({end - begin, cols()}, std::move(v));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows() || a.rank() > 2 || b.rank() > 2) {
    throw std::invalid_argument("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  Map(out.data().data(), static_cast<long>(a.rows()), static_cast<long>(b.cols())).noalias() =
      ConstMap(a.data().data(), static_cast<long>(a.rows()), static_cast<long>(a.cols())) *
      ConstMap(b.data().data(), static_cast<long>(b.rows()), static_cast<long>(b.cols()));
  return out;
}

Tensor transpose(const Tensor& a) {
  require(a.rank() <= 2, "transpose expects rank <= 2, got " + shape_str(a.shape()));
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
  return out;
}

namespace {

void softmax_inplace(double* row, std::size_t n, std::size_t stride) {
  double m = row[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, row[j * stride]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j * stride] = std::exp(row[j * stride] - m);
    s += row[j * stride];
  }
  for (std::size_t j = 0; j < n; ++j) row[j * stride] /= s;
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  require(!x.empty(), "softmax over empty tensor");
  require(x.rank() <= 2 && axis < 2 && (x.rank() == 2 || axis == 0),
          "softmax axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  Tensor out = x;
  if (x.rank() == 1) {
    softmax_inplace(out.data().data(), out.size(), 1);
  } else if (axis == 1) {
    for (std::size_t i = 0; i < x.rows(); ++i) softmax_inplace(&out(i, 0), x.cols(), 1);
  } else {
    for (std::size_t j = 0; j < x.cols(); ++j) softmax_inplace(&out(0, j), x.rows(), x.cols());
  }
  return out;
}

Tensor log_softmax_rows(const Tensor& x) {
  require(!x.empty(), "log_softmax over empty tensor");
  Tensor out = x;
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double* row = &out.data()[i * c];
    double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < c; ++j) row[j] -= lse;
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t f = x.cols();
  require(f > 0, "layer_norm over zero-width features");
  require(gain.size() == f && bias.size() == f,
          "layer_norm parameter width mismatch: x " + shape_str(x.shape()) + ", gain " + shape_str(gain.shape()));
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double* row = &out.data()[i * f];
    double mean = 0.0;
    for (std::size_t j = 0; j < f; ++j) mean += row[j];
    mean /= static_cast<double>(f);
    double var = 0.0;
    for (std::size_t j = 0; j < f; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(f);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < f; ++j) row[j] = (row[j] - mean) * inv * gain[j] + bias[j];
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.size() == b.size(), "max_abs_diff size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "dot length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

std::uint64_t tensor_hash(const Tensor& t, std::uint64_t h) {
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (auto d : t.shape()) {
    const std::uint64_t d64 = d;
    mix(&d64, sizeof d64);
  }
  mix(t.data().data(), t.size() * sizeof(double));
  return h;
}

}  // namespace moe
