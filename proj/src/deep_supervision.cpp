#include "adsunet/deep_supervision.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "adsunet/labels.hpp"

namespace adsunet {

namespace {

constexpr double kLogClamp = 1e-12;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": " + a.shape().str() + " vs " +
                         b.shape().str());
  }
}

template <typename T>
T class_weight(std::span<const T> weights, int c) {
  return weights.empty() ? T(1) : weights[c];
}

}  // namespace

template <typename T>
SoftMask<T> downsample_mask(const Tensor<T>& onehot, int factor,
                            bool validate) {
  if (factor < 1 || (factor & (factor - 1)) != 0) {
    throw ValueError("downsample factor must be a power of two, got " +
                     std::to_string(factor));
  }
  if (onehot.h() % factor != 0 || onehot.w() % factor != 0) {
    throw InputSizeError("mask " + onehot.shape().str() +
                         " not divisible by factor " + std::to_string(factor));
  }
  if (validate) require_one_hot(onehot, "downsample_mask");
  if (factor == 1) return {onehot, 1};
  const int oh = onehot.h() / factor;
  const int ow = onehot.w() / factor;
  Tensor<T> out(onehot.n(), onehot.c(), oh, ow);
  const T inv = T(1) / static_cast<T>(factor * factor);
  for (int n = 0; n < onehot.n(); ++n) {
    for (int c = 0; c < onehot.c(); ++c) {
      const T* p = onehot.plane(n, c);
      T* o = out.plane(n, c);
      for (int y = 0; y < onehot.h(); ++y) {
        const T* row = p + static_cast<std::size_t>(y) * onehot.w();
        T* orow = o + static_cast<std::size_t>(y / factor) * ow;
        for (int x = 0; x < onehot.w(); ++x) orow[x / factor] += row[x];
      }
      for (std::size_t i = 0; i < out.plane_size(); ++i) o[i] *= inv;
    }
  }
  return {std::move(out), factor};
}

template <typename T>
SoftMask<T> harden(const SoftMask<T>& mask) {
  const auto labels = argmax_labels(mask.values);
  return {one_hot<T>(labels, mask.values.n(), mask.values.c(), mask.values.h(),
                     mask.values.w()),
          mask.scale};
}

template <typename T>
std::vector<T> block_losses(const Tensor<T>& probs, const Tensor<T>& target,
                            std::span<const T> class_weights) {
  require_same_shape(probs, target, "block_loss");
  if (!class_weights.empty() &&
      class_weights.size() != static_cast<std::size_t>(probs.c())) {
    throw DimensionError("block_loss: class weight count does not match C");
  }
  const std::size_t hw = probs.plane_size();
  std::vector<T> out(probs.n(), T(0));
  for (int n = 0; n < probs.n(); ++n) {
    double acc = 0;
    for (int c = 0; c < probs.c(); ++c) {
      const T* p = probs.plane(n, c);
      const T* y = target.plane(n, c);
      const double wc = class_weight(class_weights, c);
      if (wc == 0) continue;
      for (std::size_t i = 0; i < hw; ++i) {
        if (y[i] == T(0)) continue;
        acc += wc * y[i] * std::log(std::max<double>(p[i], kLogClamp));
      }
    }
    out[n] = static_cast<T>(-acc / static_cast<double>(hw));
  }
  return out;
}

template <typename T>
T block_loss(const Tensor<T>& probs, const Tensor<T>& target,
             std::span<const T> class_weights) {
  const auto per_sample = block_losses(probs, target, class_weights);
  if (per_sample.empty()) return T(0);
  return std::accumulate(per_sample.begin(), per_sample.end(), T(0)) /
         static_cast<T>(per_sample.size());
}

template <typename T>
Tensor<T> block_loss_logit_grad(const Tensor<T>& probs, const Tensor<T>& target,
                                std::span<const T> sample_scales,
                                std::span<const T> class_weights) {
  require_same_shape(probs, target, "block_loss_logit_grad");
  if (sample_scales.size() != static_cast<std::size_t>(probs.n())) {
    throw DimensionError("block_loss_logit_grad: one scale per sample needed");
  }
  const std::size_t hw = probs.plane_size();
  const int classes = probs.c();
  Tensor<T> grad(probs.shape());
  for (int n = 0; n < probs.n(); ++n) {
    const T scale = sample_scales[n] / static_cast<T>(hw);
    const T* p = probs.sample(n);
    const T* y = target.sample(n);
    T* g = grad.sample(n);
    for (std::size_t i = 0; i < hw; ++i) {
      T mass = 0;
      for (int c = 0; c < classes; ++c) {
        mass += class_weight(class_weights, c) * y[c * hw + i];
      }
      for (int c = 0; c < classes; ++c) {
        g[c * hw + i] =
            scale * (p[c * hw + i] * mass -
                     class_weight(class_weights, c) * y[c * hw + i]);
      }
    }
  }
  return grad;
}

std::string to_string(EtaMode mode) {
  switch (mode) {
    case EtaMode::kUnconstrained:
      return "unconstrained";
    case EtaMode::kBounded:
      return "bounded";
    case EtaMode::kBoundedSum:
      return "bounded_sum";
  }
  return "unknown";
}

EtaMode eta_mode_from_string(const std::string& s) {
  if (s == "unconstrained") return EtaMode::kUnconstrained;
  if (s == "bounded") return EtaMode::kBounded;
  if (s == "bounded_sum") return EtaMode::kBoundedSum;
  throw ConfigError("unknown eta mode '" + s +
                    "' (expected unconstrained, bounded or bounded_sum)");
}

EtaWeights EtaWeights::uniform(std::vector<GridIndex> blocks, EtaMode mode) {
  EtaWeights out;
  out.raw_logits.assign(blocks.size(), 0.0);
  out.blocks = std::move(blocks);
  out.mode = mode;
  return out;
}

std::vector<double> EtaWeights::eta() const {
  if (raw_logits.empty()) return {};
  const double mx = *std::max_element(raw_logits.begin(), raw_logits.end());
  std::vector<double> out(raw_logits.size());
  double sum = 0;
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = std::exp(raw_logits[k] - mx);
    sum += out[k];
  }
  for (auto& v : out) v /= sum;
  return out;
}

std::vector<double> EtaWeights::loss_weights() const {
  return bounded() ? constrain_eta(*this) : eta();
}

std::vector<double> constrain_eta(const EtaWeights& eta) {
  auto out = eta.eta();
  const double floor = eta_tilde_lower_bound(out.size());
  for (auto& v : out) v = v / 2 + floor;
  return out;
}

double eta_tilde_lower_bound(std::size_t blocks) {
  return 1.0 / (2.0 * static_cast<double>(blocks));
}

double eta_tilde_upper_bound(std::size_t blocks) {
  return (static_cast<double>(blocks) + 1.0) / (2.0 * static_cast<double>(blocks));
}

double combined_loss(std::span<const double> block_losses,
                     const EtaWeights& eta) {
  if (block_losses.size() != eta.size()) {
    throw DimensionError("combined_loss: " + std::to_string(block_losses.size()) +
                         " losses for " + std::to_string(eta.size()) +
                         " weights");
  }
  const auto w = eta.loss_weights();
  double acc = 0;
  for (std::size_t k = 0; k < w.size(); ++k) acc += w[k] * block_losses[k];
  return acc;
}

CombinedLossGrad combined_loss_grad(std::span<const double> block_losses,
                                    const EtaWeights& eta) {
  if (block_losses.size() != eta.size()) {
    throw DimensionError("combined_loss_grad: length mismatch");
  }
  const auto e = eta.eta();
  // d eta_tilde / d eta = 1/2 in bounded modes.
  const double chain = eta.bounded() ? 0.5 : 1.0;
  double mean = 0;
  for (std::size_t k = 0; k < e.size(); ++k) mean += e[k] * block_losses[k];
  CombinedLossGrad out;
  out.block_weights = eta.loss_weights();
  out.raw_logits.resize(e.size());
  for (std::size_t k = 0; k < e.size(); ++k) {
    out.raw_logits[k] = chain * e[k] * (block_losses[k] - mean);
  }
  return out;
}

template <typename T>
Tensor<T> combined_prediction(const std::map<GridIndex, Tensor<T>>& block_probs,
                              const EtaWeights& eta, int target_h,
                              int target_w) {
  if (eta.blocks.empty()) throw ValueError("combined_prediction: no blocks");
  auto fetch = [&](GridIndex idx) -> const Tensor<T>& {
    auto it = block_probs.find(idx);
    if (it == block_probs.end()) {
      throw ValueError("combined_prediction: missing map for block " + idx.str());
    }
    return it->second;
  };
  const auto weights = eta.loss_weights();
  if (eta.mode != EtaMode::kBoundedSum) {
    const std::size_t best = static_cast<std::size_t>(
        std::max_element(weights.begin(), weights.end()) - weights.begin());
    return bilinear_resize(fetch(eta.blocks[best]), target_h, target_w);
  }
  Tensor<T> out;
  for (std::size_t k = 0; k < eta.blocks.size(); ++k) {
    Tensor<T> up = bilinear_resize(fetch(eta.blocks[k]), target_h, target_w);
    if (out.empty()) out = Tensor<T>(up.shape());
    if (up.shape() != out.shape()) {
      throw DimensionError("combined_prediction: block maps disagree on N or C");
    }
    const T wk = static_cast<T>(weights[k]);
    T* o = out.data();
    const T* u = up.data();
    for (std::size_t i = 0; i < out.size(); ++i) o[i] += wk * u[i];
  }
  return out;
}

#define ADSUNET_INSTANTIATE(T)                                                  \
  template SoftMask<T> downsample_mask<T>(const Tensor<T>&, int, bool);         \
  template SoftMask<T> harden<T>(const SoftMask<T>&);                           \
  template std::vector<T> block_losses<T>(const Tensor<T>&, const Tensor<T>&,   \
                                          std::span<const T>);                  \
  template T block_loss<T>(const Tensor<T>&, const Tensor<T>&,                  \
                           std::span<const T>);                                 \
  template Tensor<T> block_loss_logit_grad<T>(                                  \
      const Tensor<T>&, const Tensor<T>&, std::span<const T>,                   \
      std::span<const T>);                                                      \
  template Tensor<T> combined_prediction<T>(                                    \
      const std::map<GridIndex, Tensor<T>>&, const EtaWeights&, int, int);

ADSUNET_INSTANTIATE(float)
ADSUNET_INSTANTIATE(double)

#undef ADSUNET_INSTANTIATE

}  // namespace adsunet
