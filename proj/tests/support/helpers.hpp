#pragma once

// Generators and brute-force oracles shared by the test binaries. Nothing here
// calls into the code under test except for the tensor container.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "adsunet/tensor.hpp"

namespace testing {

using adsunet::Tensor;

inline std::mt19937_64& rng() {
  static std::mt19937_64 r(20240917);
  return r;
}

template <typename T>
Tensor<T> random_tensor(int n, int c, int h, int w, double lo = -1.0, double hi = 1.0,
                        std::mt19937_64& g = rng()) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(n, c, h, w);
  for (auto& v : t.storage()) v = static_cast<T>(u(g));
  return t;
}

inline std::vector<std::uint8_t> random_labels(std::size_t count, int classes,
                                               std::mt19937_64& g = rng()) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<std::uint8_t> out(count);
  for (auto& v : out) v = static_cast<std::uint8_t>(u(g));
  return out;
}

// Random simplex vector of length n with strictly positive entries.
inline std::vector<double> random_simplex(std::size_t n, std::mt19937_64& g = rng()) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> v(n);
  double s = 0;
  for (auto& x : v) s += (x = e(g) + 1e-3);
  for (auto& x : v) x /= s;
  return v;
}

// Same-padded direct 2-D convolution, weights [out][in][k][k].
inline Tensor<double> direct_conv(const Tensor<double>& x, const adsunet::Buffer<double>& w,
                                  const adsunet::Buffer<double>& b, int out, int k) {
  const int pad = k / 2;
  Tensor<double> y(x.n(), out, x.h(), x.w());
  for (int n = 0; n < x.n(); ++n)
    for (int o = 0; o < out; ++o)
      for (int r = 0; r < x.h(); ++r)
        for (int c = 0; c < x.w(); ++c) {
          double s = b.empty() ? 0.0 : b[o];
          for (int i = 0; i < x.c(); ++i)
            for (int dy = 0; dy < k; ++dy)
              for (int dx = 0; dx < k; ++dx) {
                const int yy = r + dy - pad;
                const int xx = c + dx - pad;
                if (yy < 0 || xx < 0 || yy >= x.h() || xx >= x.w()) continue;
                s += w[((o * x.c() + i) * k + dy) * k + dx] * x.at(n, i, yy, xx);
              }
          y.at(n, o, r, c) = s;
        }
  return y;
}

// Central difference of f at parameter p.
inline double central_difference(const std::function<double()>& f, double& p,
                                 double h = 1e-6) {
  const double keep = p;
  p = keep + h;
  const double up = f();
  p = keep - h;
  const double down = f();
  p = keep;
  return (up - down) / (2 * h);
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("adsunet_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
