#include "adsunet/layers.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>

namespace adsunet {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// col layout: [(c * k + ky) * k + kx][y * W + x]
template <typename T>
void im2col3(const T* src, int channels, int h, int w, T* col) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    const T* plane = src + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = col + ((c * 3 + ky) * 3 + kx) * hw;
        const int dy = ky - 1;
        const int dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          T* out = row + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill_n(out, w, T(0));
            continue;
          }
          const T* in = plane + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(w, w - dx);
          for (int x = 0; x < x0; ++x) out[x] = T(0);
          for (int x = x0; x < x1; ++x) out[x] = in[x + dx];
          for (int x = x1; x < w; ++x) out[x] = T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im3(const T* col, int channels, int h, int w, T* dst) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    T* plane = dst + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = col + ((c * 3 + ky) * 3 + kx) * hw;
        const int dy = ky - 1;
        const int dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const T* in = row + static_cast<std::size_t>(y) * w;
          T* out = plane + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(w, w - dx);
          for (int x = x0; x < x1; ++x) out[x + dx] += in[x];
        }
      }
    }
  }
}

template <typename T>
void he_uniform(Buffer<T>& values, int fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : values) v = static_cast<T>(dist(rng));
}

struct LerpIndex {
  int i0;
  int i1;
  double frac;
};

std::vector<LerpIndex> lerp_table(int in_size, int out_size) {
  std::vector<LerpIndex> table(out_size);
  const double scale = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in_size - 1) i0 = in_size - 1;
    const int i1 = std::min(i0 + 1, in_size - 1);
    table[o] = {i0, i1, src - i0};
  }
  return table;
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(int in_channels, int out_channels, int kernel)
    : in_(in_channels), out_(out_channels), k_(kernel) {
  if (kernel != 1 && kernel != 3) {
    throw ValueError("Conv2d supports kernel 1 or 3, got " +
                     std::to_string(kernel));
  }
  weight.resize(static_cast<std::size_t>(out_) * in_ * k_ * k_);
  bias.resize(out_);
}

template <typename T>
void Conv2d<T>::init_he_uniform(std::mt19937_64& rng) {
  he_uniform(weight.value, in_ * k_ * k_, rng);
  std::fill(bias.value.begin(), bias.value.end(), T(0));
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) {
  if (x.c() != in_) {
    throw DimensionError("Conv2d expects " + std::to_string(in_) +
                         " input channels, got " + x.shape().str());
  }
  input_ = x;
  const int hw = x.h() * x.w();
  const int rows = in_ * k_ * k_;
  Tensor<T> y(x.n(), out_, x.h(), x.w());
  CMapMat<T> wmat(weight.value.data(), out_, rows);
  if (k_ == 3) col_.resize(static_cast<std::size_t>(rows) * hw);
  for (int n = 0; n < x.n(); ++n) {
    const T* colp = x.sample(n);
    if (k_ == 3) {
      im2col3(x.sample(n), in_, x.h(), x.w(), col_.data());
      colp = col_.data();
    }
    CMapMat<T> col(colp, rows, hw);
    MapMat<T> out(y.sample(n), out_, hw);
    out.noalias() = wmat * col;
    for (int o = 0; o < out_; ++o) out.row(o).array() += bias.value[o];
  }
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& dy, bool need_input_grad) {
  const Tensor<T>& x = input_;
  const int hw = x.h() * x.w();
  const int rows = in_ * k_ * k_;
  MapMat<T> dw(weight.grad.data(), out_, rows);
  CMapMat<T> wmat(weight.value.data(), out_, rows);
  Tensor<T> dx;
  if (need_input_grad) dx = Tensor<T>(x.shape());
  Buffer<T> dcol;
  if (k_ == 3) {
    col_.resize(static_cast<std::size_t>(rows) * hw);
    if (need_input_grad) dcol.resize(col_.size());
  }
  for (int n = 0; n < x.n(); ++n) {
    CMapMat<T> g(dy.sample(n), out_, hw);
    const T* colp = x.sample(n);
    if (k_ == 3) {
      im2col3(x.sample(n), in_, x.h(), x.w(), col_.data());
      colp = col_.data();
    }
    CMapMat<T> col(colp, rows, hw);
    dw.noalias() += g * col.transpose();
    for (int o = 0; o < out_; ++o) bias.grad[o] += g.row(o).sum();
    if (!need_input_grad) continue;
    if (k_ == 3) {
      MapMat<T> dc(dcol.data(), rows, hw);
      dc.noalias() = wmat.transpose() * g;
      col2im3(dcol.data(), in_, x.h(), x.w(), dx.sample(n));
    } else {
      MapMat<T> dc(dx.sample(n), rows, hw);
      dc.noalias() = wmat.transpose() * g;
    }
  }
  return dx;
}

// ----------------------------------------------------------- BatchNorm2d

template <typename T>
BatchNorm2d<T>::BatchNorm2d(int channels)
    : running_mean(channels, T(0)), running_var(channels, T(1)) {
  gamma.resize(channels);
  beta.resize(channels);
  std::fill(gamma.value.begin(), gamma.value.end(), T(1));
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, Mode mode) {
  const int channels = static_cast<int>(gamma.size());
  if (x.c() != channels) {
    throw DimensionError("BatchNorm2d expects " + std::to_string(channels) +
                         " channels, got " + x.shape().str());
  }
  last_mode_ = mode;
  const std::size_t hw = x.plane_size();
  const double count = static_cast<double>(hw) * x.n();
  Tensor<T> y(x.shape());
  xhat_ = Tensor<T>(x.shape());
  inv_std_.assign(channels, T(0));
  for (int c = 0; c < channels; ++c) {
    double mean = 0;
    double var = 0;
    if (mode == Mode::kTrain) {
      for (int n = 0; n < x.n(); ++n) {
        const T* p = x.plane(n, c);
        for (std::size_t i = 0; i < hw; ++i) mean += p[i];
      }
      mean /= count;
      for (int n = 0; n < x.n(); ++n) {
        const T* p = x.plane(n, c);
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = p[i] - mean;
          var += d * d;
        }
      }
      var /= count;
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] +
                                       momentum * mean);
      running_var[c] = static_cast<T>((1 - momentum) * running_var[c] +
                                      momentum * unbiased);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(var + eps));
    inv_std_[c] = inv;
    const T m = static_cast<T>(mean);
    const T g = gamma.value[c];
    const T b = beta.value[c];
    for (int n = 0; n < x.n(); ++n) {
      const T* p = x.plane(n, c);
      T* xh = xhat_.plane(n, c);
      T* out = y.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        xh[i] = (p[i] - m) * inv;
        out[i] = g * xh[i] + b;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& dy) {
  const int channels = static_cast<int>(gamma.size());
  const std::size_t hw = dy.plane_size();
  const T count = static_cast<T>(hw * dy.n());
  Tensor<T> dx(dy.shape());
  for (int c = 0; c < channels; ++c) {
    T sum_dy = 0;
    T sum_dy_xhat = 0;
    for (int n = 0; n < dy.n(); ++n) {
      const T* g = dy.plane(n, c);
      const T* xh = xhat_.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += g[i];
        sum_dy_xhat += g[i] * xh[i];
      }
    }
    gamma.grad[c] += sum_dy_xhat;
    beta.grad[c] += sum_dy;
    const T scale = gamma.value[c] * inv_std_[c];
    for (int n = 0; n < dy.n(); ++n) {
      const T* g = dy.plane(n, c);
      const T* xh = xhat_.plane(n, c);
      T* out = dx.plane(n, c);
      if (last_mode_ == Mode::kTrain) {
        for (std::size_t i = 0; i < hw; ++i) {
          out[i] = scale * (g[i] - sum_dy / count - xh[i] * sum_dy_xhat / count);
        }
      } else {
        for (std::size_t i = 0; i < hw; ++i) out[i] = scale * g[i];
      }
    }
  }
  return dx;
}

// ------------------------------------------------------------------ ReLU

template <typename T>
Tensor<T> ReLU<T>::forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  active_.resize(x.size());
  const T* in = x.data();
  T* out = y.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool on = in[i] > T(0);
    active_[i] = on;
    out[i] = on ? in[i] : T(0);
  }
  return y;
}

template <typename T>
Tensor<T> ReLU<T>::backward(const Tensor<T>& dy) const {
  Tensor<T> dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) {
    dx.data()[i] = active_[i] ? dy.data()[i] : T(0);
  }
  return dx;
}

// -------------------------------------------------------------- MaxPool2

template <typename T>
Tensor<T> MaxPool2<T>::forward(const Tensor<T>& x) {
  if (x.h() % 2 != 0 || x.w() % 2 != 0) {
    throw InputSizeError("MaxPool2 needs even spatial size, got " +
                         x.shape().str());
  }
  in_shape_ = x.shape();
  const int oh = x.h() / 2;
  const int ow = x.w() / 2;
  Tensor<T> y(x.n(), x.c(), oh, ow);
  argmax_.resize(y.size());
  std::size_t o = 0;
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T* p = x.plane(n, c);
      T* out = y.plane(n, c);
      for (int yy = 0; yy < oh; ++yy) {
        for (int xx = 0; xx < ow; ++xx, ++o) {
          const std::uint32_t base = (2 * yy) * x.w() + 2 * xx;
          std::uint32_t best = base;
          for (std::uint32_t cand : {base + 1, base + x.w(), base + x.w() + 1}) {
            if (p[cand] > p[best]) best = cand;
          }
          argmax_[o] = best;
          out[yy * ow + xx] = p[best];
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> MaxPool2<T>::backward(const Tensor<T>& dy) const {
  Tensor<T> dx(in_shape_);
  std::size_t o = 0;
  for (int n = 0; n < dy.n(); ++n) {
    for (int c = 0; c < dy.c(); ++c) {
      const T* g = dy.plane(n, c);
      T* out = dx.plane(n, c);
      for (std::size_t i = 0; i < dy.plane_size(); ++i, ++o) {
        out[argmax_[o]] += g[i];
      }
    }
  }
  return dx;
}

// ------------------------------------------------------ ConvTranspose2x2

template <typename T>
ConvTranspose2x2<T>::ConvTranspose2x2(int in_channels, int out_channels)
    : in_(in_channels), out_(out_channels) {
  weight.resize(static_cast<std::size_t>(in_) * out_ * 4);
  bias.resize(out_);
}

template <typename T>
void ConvTranspose2x2<T>::init_he_uniform(std::mt19937_64& rng) {
  he_uniform(weight.value, in_, rng);
  std::fill(bias.value.begin(), bias.value.end(), T(0));
}

template <typename T>
Tensor<T> ConvTranspose2x2<T>::forward(const Tensor<T>& x) {
  if (x.c() != in_) {
    throw DimensionError("ConvTranspose2x2 expects " + std::to_string(in_) +
                         " input channels, got " + x.shape().str());
  }
  input_ = x;
  const int h = x.h();
  const int w = x.w();
  const int hw = h * w;
  Tensor<T> y(x.n(), out_, 2 * h, 2 * w);
  CMapMat<T> wmat(weight.value.data(), in_, out_ * 4);
  RowMat<T> cols(out_ * 4, hw);
  for (int n = 0; n < x.n(); ++n) {
    CMapMat<T> xin(x.sample(n), in_, hw);
    cols.noalias() = wmat.transpose() * xin;
    for (int o = 0; o < out_; ++o) {
      T* plane = y.plane(n, o);
      const T b = bias.value[o];
      for (int k = 0; k < 4; ++k) {
        const int di = k / 2;
        const int dj = k % 2;
        const T* row = cols.data() + static_cast<std::size_t>(o * 4 + k) * hw;
        for (int yy = 0; yy < h; ++yy) {
          T* out = plane + static_cast<std::size_t>(2 * yy + di) * (2 * w) + dj;
          const T* in = row + static_cast<std::size_t>(yy) * w;
          for (int xx = 0; xx < w; ++xx) out[2 * xx] = in[xx] + b;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> ConvTranspose2x2<T>::backward(const Tensor<T>& dy,
                                        bool need_input_grad) {
  const Tensor<T>& x = input_;
  const int h = x.h();
  const int w = x.w();
  const int hw = h * w;
  CMapMat<T> wmat(weight.value.data(), in_, out_ * 4);
  MapMat<T> dw(weight.grad.data(), in_, out_ * 4);
  RowMat<T> cols(out_ * 4, hw);
  Tensor<T> dx;
  if (need_input_grad) dx = Tensor<T>(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int o = 0; o < out_; ++o) {
      const T* plane = dy.plane(n, o);
      T bsum = 0;
      for (int k = 0; k < 4; ++k) {
        const int di = k / 2;
        const int dj = k % 2;
        T* row = cols.data() + static_cast<std::size_t>(o * 4 + k) * hw;
        for (int yy = 0; yy < h; ++yy) {
          const T* in =
              plane + static_cast<std::size_t>(2 * yy + di) * (2 * w) + dj;
          T* out = row + static_cast<std::size_t>(yy) * w;
          for (int xx = 0; xx < w; ++xx) {
            out[xx] = in[2 * xx];
            bsum += in[2 * xx];
          }
        }
      }
      bias.grad[o] += bsum;
    }
    CMapMat<T> xin(x.sample(n), in_, hw);
    dw.noalias() += xin * cols.transpose();
    if (need_input_grad) {
      MapMat<T> dxin(dx.sample(n), in_, hw);
      dxin.noalias() = wmat * cols;
    }
  }
  return dx;
}

// ----------------------------------------------------------- BilinearUp2

template <typename T>
Tensor<T> BilinearUp2<T>::forward(const Tensor<T>& x) {
  in_shape_ = x.shape();
  return bilinear_resize(x, 2 * x.h(), 2 * x.w());
}

template <typename T>
Tensor<T> BilinearUp2<T>::backward(const Tensor<T>& dy) const {
  Tensor<T> dx(in_shape_);
  const auto ty = lerp_table(in_shape_.h, dy.h());
  const auto tx = lerp_table(in_shape_.w, dy.w());
  for (int n = 0; n < dy.n(); ++n) {
    for (int c = 0; c < dy.c(); ++c) {
      const T* g = dy.plane(n, c);
      T* out = dx.plane(n, c);
      for (int yy = 0; yy < dy.h(); ++yy) {
        const auto& ly = ty[yy];
        for (int xx = 0; xx < dy.w(); ++xx) {
          const auto& lx = tx[xx];
          const T v = g[yy * dy.w() + xx];
          const T wy1 = static_cast<T>(ly.frac);
          const T wx1 = static_cast<T>(lx.frac);
          out[ly.i0 * in_shape_.w + lx.i0] += v * (1 - wy1) * (1 - wx1);
          out[ly.i0 * in_shape_.w + lx.i1] += v * (1 - wy1) * wx1;
          out[ly.i1 * in_shape_.w + lx.i0] += v * wy1 * (1 - wx1);
          out[ly.i1 * in_shape_.w + lx.i1] += v * wy1 * wx1;
        }
      }
    }
  }
  return dx;
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w) {
  if (out_h == x.h() && out_w == x.w()) return x;
  Tensor<T> y(x.n(), x.c(), out_h, out_w);
  const auto ty = lerp_table(x.h(), out_h);
  const auto tx = lerp_table(x.w(), out_w);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T* p = x.plane(n, c);
      T* out = y.plane(n, c);
      for (int yy = 0; yy < out_h; ++yy) {
        const auto& ly = ty[yy];
        const T* r0 = p + ly.i0 * x.w();
        const T* r1 = p + ly.i1 * x.w();
        const T wy1 = static_cast<T>(ly.frac);
        for (int xx = 0; xx < out_w; ++xx) {
          const auto& lx = tx[xx];
          const T wx1 = static_cast<T>(lx.frac);
          const T top = r0[lx.i0] * (1 - wx1) + r0[lx.i1] * wx1;
          const T bot = r1[lx.i0] * (1 - wx1) + r1[lx.i1] * wx1;
          out[yy * out_w + xx] = top * (1 - wy1) + bot * wy1;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tensor<T> probs(logits.shape());
  const std::size_t hw = logits.plane_size();
  const int channels = logits.c();
  for (int n = 0; n < logits.n(); ++n) {
    const T* in = logits.sample(n);
    T* out = probs.sample(n);
    for (std::size_t i = 0; i < hw; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (int c = 0; c < channels; ++c) mx = std::max(mx, in[c * hw + i]);
      T sum = 0;
      for (int c = 0; c < channels; ++c) {
        const T e = std::exp(in[c * hw + i] - mx);
        out[c * hw + i] = e;
        sum += e;
      }
      for (int c = 0; c < channels; ++c) out[c * hw + i] /= sum;
    }
  }
  return probs;
}

#define ADSUNET_INSTANTIATE(T)                                          \
  template class Conv2d<T>;                                             \
  template class BatchNorm2d<T>;                                        \
  template class ReLU<T>;                                               \
  template class MaxPool2<T>;                                           \
  template class ConvTranspose2x2<T>;                                   \
  template class BilinearUp2<T>;                                        \
  template Tensor<T> bilinear_resize<T>(const Tensor<T>&, int, int);    \
  template Tensor<T> softmax_channels<T>(const Tensor<T>&);

ADSUNET_INSTANTIATE(float)
ADSUNET_INSTANTIATE(double)

#undef ADSUNET_INSTANTIATE

}  // namespace adsunet
