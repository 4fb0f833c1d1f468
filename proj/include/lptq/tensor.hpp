// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lptq/error.hpp"

namespace lptq {

/// Dense row-major n-dimensional array. Feature maps use NCHW, conv weights
/// use OIHW.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(std::vector<int> shape, T fill = T{0})
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 4-D accessors (NCHW / OIHW).
  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) *
               shape_[3] +
           w;
  }
  T& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const {
    return data_[offset(n, c, h, w)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// View of sample `n` along the leading axis.
  std::span<T> slice(int n) {
    const std::size_t stride = data_.size() / static_cast<std::size_t>(shape_[0]);
    return std::span<T>(data_).subspan(stride * n, stride);
  }
  std::span<const T> slice(int n) const {
    const std::size_t stride = data_.size() / static_cast<std::size_t>(shape_[0]);
    return std::span<const T>(data_).subspan(stride * n, stride);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ShapeError("negative dimension in " + shape_string(shape));
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  static std::string shape_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) os << 'x';
      os << shape[i];
    }
    os << ')';
    return os.str();
  }

  std::string shape_str() const { return shape_string(shape_); }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

/// Stack equally-shaped samples along a new leading batch axis. Each input
/// must itself have a leading batch dimension of 1 or none at all.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>* const> items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  std::vector<int> inner = items.front()->shape();
  if (!inner.empty() && inner.front() == 1 && inner.size() == 4) inner.erase(inner.begin());
  std::vector<int> shape{static_cast<int>(items.size())};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor<T> out(shape);
  const std::size_t stride = Tensor<T>::count(inner);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->size() != stride) {
      throw ShapeError("stack: sample " + std::to_string(i) + " has shape " +
                       items[i]->shape_str());
    }
    std::copy(items[i]->vec().begin(), items[i]->vec().end(),
              out.vec().begin() + static_cast<std::ptrdiff_t>(stride * i));
  }
  return out;
}

/// Copy sample `n` of a batched tensor into a batch-of-one tensor.
template <typename T>
Tensor<T> take(const Tensor<T>& batch, int n) {
  std::vector<int> shape = batch.shape();
  shape[0] = 1;
  auto s = batch.slice(n);
  return Tensor<T>(shape, std::vector<T>(s.begin(), s.end()));
}

}  // namespace lptq
