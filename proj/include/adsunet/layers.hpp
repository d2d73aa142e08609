#pragma once

// Primitive layers with hand-written backward passes. Every layer caches what
// its backward pass needs during `forward`, so a layer instance serves exactly
// one forward/backward pair at a time.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "adsunet/tensor.hpp"

namespace adsunet {

enum class Mode { kTrain, kEval };

template <typename T>
struct Param {
  Buffer<T> value;
  Buffer<T> grad;

  void resize(std::size_t n) {
    value.assign(n, T(0));
    grad.assign(n, T(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
  std::size_t size() const { return value.size(); }
};

// Convolution with square kernel (1 or 3), stride 1, "same" zero padding.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel);

  void init_he_uniform(std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x);
  // Accumulates parameter gradients; returns dL/dx when requested.
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = true);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }

  Param<T> weight;  // [out][in * k * k]
  Param<T> bias;    // [out]

 private:
  int in_ = 0;
  int out_ = 0;
  int k_ = 0;
  Tensor<T> input_;
  Buffer<T> col_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

  Param<T> gamma;
  Param<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

 private:
  Mode last_mode_ = Mode::kEval;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy) const;

 private:
  std::vector<std::uint8_t> active_;
};

// 2x2 max pooling, stride 2.
template <typename T>
class MaxPool2 {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy) const;

 private:
  Shape in_shape_{};
  std::vector<std::uint32_t> argmax_;
};

// 2x2 transposed convolution, stride 2 (doubles H and W).
template <typename T>
class ConvTranspose2x2 {
 public:
  ConvTranspose2x2() = default;
  ConvTranspose2x2(int in_channels, int out_channels);

  void init_he_uniform(std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = true);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

  Param<T> weight;  // [in][out * 4]
  Param<T> bias;    // [out]

 private:
  int in_ = 0;
  int out_ = 0;
  Tensor<T> input_;
};

// Bilinear x2 upsampling (half-pixel centers, edge clamped). Parameter free.
template <typename T>
class BilinearUp2 {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy) const;

 private:
  Shape in_shape_{};
};

// Bilinear resize of every plane to (out_h, out_w), half-pixel centers.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w);

// Per-pixel softmax over channels.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits);

}  // namespace adsunet
