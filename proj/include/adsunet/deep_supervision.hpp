#pragma once

// Down-sampled mask supervision: soft targets, per-block cross-entropy, the
// trainable block weights eta / eta-tilde and the combined per-learner map.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adsunet/model_core.hpp"

namespace adsunet {

// Per-pixel class mass at 1 / scale of the input resolution.
template <typename T>
struct SoftMask {
  Tensor<T> values;
  int scale = 1;
};

// Average-pools one-hot masks by `factor`. Each output pixel holds the class
// frequencies of its factor x factor window.
template <typename T>
SoftMask<T> downsample_mask(const Tensor<T>& onehot, int factor,
                            bool validate = true);

// Re-hardens a soft mask to one-hot by per-pixel argmax (lowest index wins).
template <typename T>
SoftMask<T> harden(const SoftMask<T>& mask);

// Mean over pixels of -sum_c w_c y_c log(max(p_c, 1e-12)), one value per
// sample in the batch.
template <typename T>
std::vector<T> block_losses(const Tensor<T>& probs, const Tensor<T>& target,
                            std::span<const T> class_weights = {});

// Cross-entropy over all pixels of the batch (N^{i,j} = n * h * w).
template <typename T>
T block_loss(const Tensor<T>& probs, const Tensor<T>& target,
             std::span<const T> class_weights = {});

// Gradient w.r.t. the logits of sum_k scale_k * L_k, where L_k is sample k's
// block loss and probs = softmax(logits).
template <typename T>
Tensor<T> block_loss_logit_grad(const Tensor<T>& probs, const Tensor<T>& target,
                                std::span<const T> sample_scales,
                                std::span<const T> class_weights = {});

enum class EtaMode { kUnconstrained, kBounded, kBoundedSum };

std::string to_string(EtaMode mode);
EtaMode eta_mode_from_string(const std::string& s);

// Trainable weights of the supervised blocks of one learner, in the order of
// NestedUNet::supervised_blocks.
struct EtaWeights {
  std::vector<GridIndex> blocks;
  std::vector<double> raw_logits;
  EtaMode mode = EtaMode::kBoundedSum;

  // Zero logits, so eta starts at 1 / (d + 1).
  static EtaWeights uniform(std::vector<GridIndex> blocks, EtaMode mode);

  std::size_t size() const { return raw_logits.size(); }
  bool bounded() const { return mode != EtaMode::kUnconstrained; }
  std::vector<double> eta() const;
  // Weights used in the loss: eta-tilde in bounded modes, eta otherwise.
  std::vector<double> loss_weights() const;
};

// eta-tilde = eta / 2 + 1 / (2 (d + 1)); bounded in [1/(2(d+1)), (d+2)/(2(d+1))].
std::vector<double> constrain_eta(const EtaWeights& eta);

double eta_tilde_lower_bound(std::size_t blocks);
double eta_tilde_upper_bound(std::size_t blocks);

double combined_loss(std::span<const double> block_losses,
                     const EtaWeights& eta);

// d(combined_loss)/d(block_losses) and d(combined_loss)/d(raw_logits).
struct CombinedLossGrad {
  std::vector<double> block_weights;
  std::vector<double> raw_logits;
};
CombinedLossGrad combined_loss_grad(std::span<const double> block_losses,
                                    const EtaWeights& eta);

// Final probability map of UNet^d at target size. bounded_sum: eta-tilde
// weighted sum of the bilinearly resized block maps. Other modes: the block
// with the largest weight (lowest position wins ties).
template <typename T>
Tensor<T> combined_prediction(const std::map<GridIndex, Tensor<T>>& block_probs,
                              const EtaWeights& eta, int target_h, int target_w);

}  // namespace adsunet
