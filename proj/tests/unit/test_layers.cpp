#include <doctest.h>

#include <cmath>
#include <functional>

#include "adsunet/layers.hpp"
#include "support/helpers.hpp"

using namespace adsunet;
using testing::central_difference;
using testing::random_tensor;
using testing::relative_error;

namespace {

// Sum of y * r for a fixed random projection r; its gradient w.r.t. y is r.
double project(const Tensor<double>& y, const Tensor<double>& r) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * r.data()[i];
  return s;
}

}  // namespace

TEST_CASE("conv3x3 matches direct convolution") {
  std::mt19937_64 g(1);
  Conv2d<double> conv(3, 4, 3);
  conv.init_he_uniform(g);
  for (auto& b : conv.bias.value) b = std::uniform_real_distribution<double>(-1, 1)(g);
  const auto x = random_tensor<double>(2, 3, 7, 5, -1, 1, g);
  const auto y = conv.forward(x);
  const auto ref = testing::direct_conv(x, conv.weight.value, conv.bias.value, 4, 3);
  REQUIRE(y.shape() == ref.shape());
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
}

TEST_CASE("conv1x1 matches direct convolution") {
  std::mt19937_64 g(2);
  Conv2d<double> conv(5, 3, 1);
  conv.init_he_uniform(g);
  const auto x = random_tensor<double>(1, 5, 4, 6, -1, 1, g);
  const auto y = conv.forward(x);
  const auto ref = testing::direct_conv(x, conv.weight.value, conv.bias.value, 3, 1);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
}

TEST_CASE("identity-delta kernel followed by ReLU reproduces ReLU(input)") {
  Conv2d<double> conv(1, 1, 3);
  conv.weight.value.assign(9, 0.0);
  conv.weight.value[4] = 1.0;  // centre tap
  ReLU<double> relu;
  const auto x = random_tensor<double>(1, 1, 5, 5);
  const auto y = relu.forward(conv.forward(x));
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) CHECK(y.at(0, 0, r, c) == std::max(0.0, x.at(0, 0, r, c)));
}

TEST_CASE("conv rejects wrong channel count") {
  Conv2d<float> conv(3, 2, 3);
  CHECK_THROWS_AS(conv.forward(Tensor<float>(1, 4, 4, 4)), DimensionError);
}

TEST_CASE("conv gradients match central differences") {
  std::mt19937_64 g(3);
  for (int k : {1, 3}) {
    Conv2d<double> conv(2, 3, k);
    conv.init_he_uniform(g);
    auto x = random_tensor<double>(2, 2, 4, 4, -1, 1, g);
    const auto r = random_tensor<double>(2, 3, 4, 4, -1, 1, g);
    conv.forward(x);
    conv.weight.zero_grad();
    conv.bias.zero_grad();
    const auto dx = conv.backward(r);
    auto f = [&] { return project(conv.forward(x), r); };
    for (std::size_t i = 0; i < conv.weight.size(); i += 3) {
      CHECK(relative_error(conv.weight.grad[i],
                           central_difference(f, conv.weight.value[i])) < 1e-6);
    }
    for (std::size_t i = 0; i < conv.bias.size(); ++i) {
      CHECK(relative_error(conv.bias.grad[i], central_difference(f, conv.bias.value[i])) < 1e-6);
    }
    for (std::size_t i = 0; i < x.size(); i += 5) {
      CHECK(relative_error(dx.data()[i], central_difference(f, x.data()[i])) < 1e-6);
    }
  }
}

TEST_CASE("batch norm in training mode normalizes per channel") {
  BatchNorm2d<double> bn(3);
  const auto x = random_tensor<double>(4, 3, 5, 5, -3, 7);
  const auto y = bn.forward(x, Mode::kTrain);
  for (int c = 0; c < 3; ++c) {
    double mean = 0;
    double sq = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) {
        mean += y.plane(n, c)[i];
        sq += y.plane(n, c)[i] * y.plane(n, c)[i];
      }
    CHECK(mean / 100 == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(sq / 100 == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("batch norm running statistics use momentum 0.1") {
  BatchNorm2d<double> bn(1);
  Tensor<double> x(1, 1, 1, 2);
  x.data()[0] = 1.0;
  x.data()[1] = 3.0;
  bn.forward(x, Mode::kTrain);
  // mean 2, unbiased variance 2
  CHECK(bn.running_mean[0] == doctest::Approx(0.2));
  CHECK(bn.running_var[0] == doctest::Approx(0.9 + 0.1 * 2.0));
  const auto before = bn.running_mean;
  bn.forward(x, Mode::kEval);
  CHECK(bn.running_mean == before);
}

TEST_CASE("batch norm gradients match central differences") {
  std::mt19937_64 g(4);
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    BatchNorm2d<double> bn(2);
    bn.gamma.value = {1.3, 0.7};
    bn.beta.value = {0.1, -0.2};
    bn.running_mean = {0.2, -0.1};
    bn.running_var = {1.5, 0.8};
    auto x = random_tensor<double>(3, 2, 3, 3, -1, 1, g);
    const auto r = random_tensor<double>(3, 2, 3, 3, -1, 1, g);
    bn.forward(x, mode);
    const auto dx = bn.backward(r);
    auto f = [&] {
      BatchNorm2d<double> probe = bn;
      return project(probe.forward(x, mode), r);
    };
    for (std::size_t i = 0; i < x.size(); i += 4) {
      CHECK(relative_error(dx.data()[i], central_difference(f, x.data()[i])) < 1e-6);
    }
    for (std::size_t c = 0; c < 2; ++c) {
      CHECK(relative_error(bn.gamma.grad[c], central_difference(f, bn.gamma.value[c])) < 1e-6);
      CHECK(relative_error(bn.beta.grad[c], central_difference(f, bn.beta.value[c])) < 1e-6);
    }
  }
}

TEST_CASE("max pooling keeps the window maximum and routes gradient to it") {
  MaxPool2<double> pool;
  Tensor<double> x(1, 1, 2, 4);
  x.storage() = {1, 5, 2, 0, 3, 4, 9, 8};
  const auto y = pool.forward(x);
  REQUIRE(y.shape() == Shape{1, 1, 1, 2});
  CHECK(y.data()[0] == 5);
  CHECK(y.data()[1] == 9);
  Tensor<double> dy(1, 1, 1, 2);
  dy.storage() = {1.5, -2.0};
  const auto dx = pool.backward(dy);
  CHECK(dx.storage() == Buffer<double>{0, 1.5, 0, 0, 0, 0, -2.0, 0});
}

TEST_CASE("transposed convolution scatters each input pixel to a 2x2 block") {
  std::mt19937_64 g(5);
  ConvTranspose2x2<double> up(2, 3);
  up.init_he_uniform(g);
  for (auto& b : up.bias.value) b = 0.25;
  const auto x = random_tensor<double>(1, 2, 3, 2, -1, 1, g);
  const auto y = up.forward(x);
  REQUIRE(y.shape() == Shape{1, 3, 6, 4});
  for (int o = 0; o < 3; ++o)
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 2; ++c)
        for (int k = 0; k < 4; ++k) {
          double s = 0.25;
          for (int i = 0; i < 2; ++i) s += x.at(0, i, r, c) * up.weight.value[i * 12 + o * 4 + k];
          CHECK(y.at(0, o, 2 * r + k / 2, 2 * c + k % 2) == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("transposed convolution gradients match central differences") {
  std::mt19937_64 g(6);
  ConvTranspose2x2<double> up(2, 2);
  up.init_he_uniform(g);
  auto x = random_tensor<double>(2, 2, 2, 3, -1, 1, g);
  const auto r = random_tensor<double>(2, 2, 4, 6, -1, 1, g);
  up.forward(x);
  const auto dx = up.backward(r);
  auto f = [&] { return project(up.forward(x), r); };
  for (std::size_t i = 0; i < up.weight.size(); ++i) {
    CHECK(relative_error(up.weight.grad[i], central_difference(f, up.weight.value[i])) < 1e-6);
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(relative_error(dx.data()[i], central_difference(f, x.data()[i])) < 1e-6);
  }
}

TEST_CASE("bilinear x2 uses half-pixel centres") {
  Tensor<double> x(1, 1, 2, 2);
  x.storage() = {1, 2, 3, 4};
  BilinearUp2<double> up;
  const auto y = up.forward(x);
  // Rows 0 and 1 of the 4x4 result, computed by hand from source coordinates
  // (o + 0.5) / 2 - 0.5 clamped at 0.
  const std::vector<double> row0 = {1.0, 1.25, 1.75, 2.0};
  const std::vector<double> row1 = {1.5, 1.75, 2.25, 2.5};
  for (int c = 0; c < 4; ++c) {
    CHECK(y.at(0, 0, 0, c) == doctest::Approx(row0[c]));
    CHECK(y.at(0, 0, 1, c) == doctest::Approx(row1[c]));
  }
}

TEST_CASE("bilinear backward is the adjoint of forward") {
  BilinearUp2<double> up;
  const auto x = random_tensor<double>(2, 2, 3, 5);
  const auto r = random_tensor<double>(2, 2, 6, 10);
  const auto y = up.forward(x);
  const auto dx = up.backward(r);
  CHECK(project(y, r) == doctest::Approx(project(x, dx)).epsilon(1e-12));
}

TEST_CASE("bilinear resize preserves constants") {
  Tensor<float> x(1, 2, 4, 4, 0.375f);
  const auto y = bilinear_resize(x, 16, 16);
  for (float v : y.storage()) CHECK(v == doctest::Approx(0.375f));
}

TEST_CASE("softmax over channels sums to one") {
  const auto logits = random_tensor<float>(3, 5, 4, 4, -20, 20);
  const auto p = softmax_channels(logits);
  for (int n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < p.plane_size(); ++i) {
      double s = 0;
      for (int c = 0; c < 5; ++c) {
        CHECK(p.plane(n, c)[i] >= 0.0f);
        s += p.plane(n, c)[i];
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
}
