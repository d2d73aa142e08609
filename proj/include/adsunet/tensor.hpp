#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "adsunet/errors.hpp"

namespace adsunet {

// Storage for anything Eigen maps over. Vectorized Eigen reductions peel
// elements up to the first aligned address, so summation order (and the last
// bits of the result) would otherwise depend on where the heap placed a
// buffer. Aligned storage makes results a function of shapes alone.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const {
    return "[" + std::to_string(n) + "x" + std::to_string(c) + "x" +
           std::to_string(h) + "x" + std::to_string(w) + "]";
  }
};

// Dense NCHW tensor with value semantics.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : Tensor(Shape{n, c, h, w}, fill) {}

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  Buffer<T>& storage() { return data_; }
  const Buffer<T>& storage() const { return data_; }

  std::size_t plane_size() const {
    return static_cast<std::size_t>(shape_.h) * shape_.w;
  }
  std::size_t sample_size() const { return plane_size() * shape_.c; }

  T* sample(int n) { return data_.data() + n * sample_size(); }
  const T* sample(int n) const { return data_.data() + n * sample_size(); }
  T* plane(int n, int c) { return sample(n) + c * plane_size(); }
  const T* plane(int n, int c) const { return sample(n) + c * plane_size(); }

  T& at(int n, int c, int y, int x) {
    return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) *
                     shape_.w + x];
  }
  const T& at(int n, int c, int y, int x) const {
    return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) *
                     shape_.w + x];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  Tensor& operator+=(const Tensor& other) {
    if (other.shape_ != shape_) {
      throw DimensionError("tensor add: " + shape_.str() + " vs " +
                           other.shape_.str());
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

 private:
  Shape shape_{};
  Buffer<T> data_;
};

// Channel-wise concatenation of two batches with equal N, H, W.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw DimensionError("concat_channels: " + a.shape().str() + " vs " +
                         b.shape().str());
  }
  Tensor<T> out(a.n(), a.c() + b.c(), a.h(), a.w());
  for (int n = 0; n < a.n(); ++n) {
    std::copy_n(a.sample(n), a.sample_size(), out.sample(n));
    std::copy_n(b.sample(n), b.sample_size(), out.sample(n) + a.sample_size());
  }
  return out;
}

// Inverse of concat_channels: splits the first `first_channels` channels off.
template <typename T>
void split_channels(const Tensor<T>& src, int first_channels, Tensor<T>& a,
                    Tensor<T>& b) {
  a = Tensor<T>(src.n(), first_channels, src.h(), src.w());
  b = Tensor<T>(src.n(), src.c() - first_channels, src.h(), src.w());
  for (int n = 0; n < src.n(); ++n) {
    std::copy_n(src.sample(n), a.sample_size(), a.sample(n));
    std::copy_n(src.sample(n) + a.sample_size(), b.sample_size(), b.sample(n));
  }
}

// Copies sample `n` of `src` into a batch of one.
template <typename T>
Tensor<T> slice_sample(const Tensor<T>& src, int n) {
  Tensor<T> out(1, src.c(), src.h(), src.w());
  std::copy_n(src.sample(n), src.sample_size(), out.data());
  return out;
}

}  // namespace adsunet
