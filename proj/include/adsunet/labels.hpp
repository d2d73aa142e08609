#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "adsunet/tensor.hpp"

namespace adsunet {

// One-hot encodes n label maps of h x w into an n x classes x h x w tensor.
template <typename T>
Tensor<T> one_hot(std::span<const std::uint8_t> labels, int n, int classes,
                  int h, int w) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  if (labels.size() != hw * n) {
    throw DimensionError("one_hot: label count does not match n*h*w");
  }
  Tensor<T> out(n, classes, h, w);
  for (int k = 0; k < n; ++k) {
    for (std::size_t p = 0; p < hw; ++p) {
      const int c = labels[k * hw + p];
      if (c >= classes) {
        throw ValueError("one_hot: label " + std::to_string(c) +
                         " out of range for " + std::to_string(classes) +
                         " classes");
      }
      out.plane(k, c)[p] = T(1);
    }
  }
  return out;
}

// Per-pixel argmax over channels; ties go to the lowest class index.
template <typename T>
std::vector<std::uint8_t> argmax_labels(const Tensor<T>& probs) {
  const std::size_t hw = probs.plane_size();
  std::vector<std::uint8_t> out(hw * probs.n());
  for (int k = 0; k < probs.n(); ++k) {
    const T* s = probs.sample(k);
    for (std::size_t p = 0; p < hw; ++p) {
      int best = 0;
      T best_v = s[p];
      for (int c = 1; c < probs.c(); ++c) {
        if (s[c * hw + p] > best_v) {
          best_v = s[c * hw + p];
          best = c;
        }
      }
      out[k * hw + p] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

// Validates that every pixel of `t` is an exact one-hot vector.
template <typename T>
void require_one_hot(const Tensor<T>& t, const char* what) {
  const std::size_t hw = t.plane_size();
  for (int k = 0; k < t.n(); ++k) {
    const T* s = t.sample(k);
    for (std::size_t p = 0; p < hw; ++p) {
      int ones = 0;
      for (int c = 0; c < t.c(); ++c) {
        const T v = s[c * hw + p];
        if (v == T(1)) {
          ++ones;
        } else if (v != T(0)) {
          throw ValueError(std::string(what) + ": input is not one-hot");
        }
      }
      if (ones != 1) {
        throw ValueError(std::string(what) + ": input is not one-hot");
      }
    }
  }
}

}  // namespace adsunet
