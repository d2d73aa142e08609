#pragma once

// Stage-wise additive training of UNet^1 ... UNet^T with multi-class AdaBoost
// (SAMME) sample re-weighting, and alpha-weighted ensemble inference.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "adsunet/data_io.hpp"
#include "adsunet/deep_supervision.hpp"
#include "adsunet/model_core.hpp"
#include "adsunet/optim.hpp"

namespace adsunet {

// ----------------------------------------------------------- scalar ledger

// Mean over classes of |P & Y| / |P | Y| for one-hot maps. Classes absent from
// both prediction and target are skipped; 1 when every class is skipped.
template <typename T>
double miou_score(const Tensor<T>& pred_onehot, const Tensor<T>& target_onehot);

// Same score on label maps.
double miou_from_labels(std::span<const std::uint8_t> pred,
                        std::span<const std::uint8_t> target, int classes);

// Dataset-level mIoU from accumulated per-class intersections and unions.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(int classes);
  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> target);
  double miou() const;
  std::vector<double> per_class_iou() const;

 private:
  int classes_;
  std::vector<double> inter_;
  std::vector<double> uni_;
};

// sum_k w_k (1 - s_k)
double weighted_error(std::span<const double> scores,
                      std::span<const double> weights);

// True when eps >= 1 - 1/C: the learner is no better than chance and gets
// weight 0.
bool is_discarded(double eps, int classes);

// 0.5 ln((1 - eps) / eps) + ln(C - 1), eps clamped to [1e-6, 1 - 1e-6]; 0 for
// discarded learners.
double alpha_from_error(double eps, int classes);

// w_k <- w_k exp(1 - s_k), renormalized.
std::vector<double> update_sample_weights(std::span<const double> weights,
                                          std::span<const double> scores);

struct BoostState {
  std::vector<double> sample_weights;
  int stage = 0;
  std::vector<double> alphas;
  std::vector<std::vector<double>> scores;  // one vector per stage
  std::vector<double> errors;

  static BoostState initial(std::size_t samples);
  void save(const std::filesystem::path& path) const;
  static BoostState load(const std::filesystem::path& path);
  bool operator==(const BoostState&) const = default;
};

// --------------------------------------------------------------- ensemble

struct EnsembleEntry {
  int depth = 0;
  std::string checkpoint;  // relative to the manifest's directory
  EtaWeights eta;
  double alpha = 0.0;
};

struct EnsembleManifest {
  std::vector<EnsembleEntry> entries;
  ModelConfig model;
  std::uint64_t seed = 0;

  int classes() const { return model.classes; }
  std::vector<int> filter_ladder() const;
  void validate() const;
  void save(const std::filesystem::path& path) const;
  static EnsembleManifest load(const std::filesystem::path& path);
};

enum class EnsembleMode { kAlpha, kAverage };

std::string to_string(EnsembleMode mode);
EnsembleMode ensemble_mode_from_string(const std::string& s);

template <typename T>
struct EnsembleOutput {
  Tensor<T> probs;                   // sum_d a_d y^d / sum_d a_d
  std::vector<std::uint8_t> labels;  // argmax, ties to the lowest class
};

// Weighted sum of learner probability maps. Learners with weight 0 are
// skipped entirely.
template <typename T>
EnsembleOutput<T> ensemble_combine(std::span<const Tensor<T>> learner_probs,
                                   std::span<const double> weights);

// y^d for a batch: softmax of every supervised head, combined per eta mode.
template <typename T>
Tensor<T> learner_prediction(NestedUNet<T>& model, const EtaWeights& eta,
                             int depth, const Tensor<T>& images);

// Per-learner weights actually used: alpha, or 1/T for every entry in
// average mode.
std::vector<double> ensemble_weights(const EnsembleManifest& manifest,
                                     EnsembleMode mode);

template <typename T>
EnsembleOutput<T> ensemble_predict(const EnsembleManifest& manifest,
                                   NestedUNet<T>& model, const Tensor<T>& images,
                                   EnsembleMode mode = EnsembleMode::kAlpha);

// ------------------------------------------------------------ stage loop

struct StageOptions {
  int epochs = 10;
  int batch_size = 8;
  double lr = 1e-3;            // peak of the one-cycle schedule
  bool one_cycle = true;       // false: constant lr
  double eta_lr_scale = 10.0;  // eta logits use lr * eta_lr_scale
  AdamConfig adam{};
  EtaMode eta_mode = EtaMode::kBoundedSum;
  bool reweighting = true;
  bool resample = false;  // weighted resampling instead of loss scaling
  bool soft_targets = true;
  bool augment = true;
  AugmentOptions augment_options{};
  std::uint64_t seed = 1;
  std::vector<float> class_weights;  // empty: unweighted loss
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::vector<double> eta;
  std::vector<double> eta_tilde;
};

struct StageResult {
  int depth = 0;
  EtaWeights eta;
  std::vector<double> scores;
  double error = 0.0;
  double alpha = 0.0;
  bool discarded = false;
  std::vector<EpochRecord> epochs;
};

struct StageHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  // Runs after training, before the learner is scored on the training set.
  std::function<void(NestedUNet<float>&, EtaWeights&, int)> before_scoring;
};

// Trains UNet^d on top of the frozen encoders of stages 1..d-1, scores it on
// the training set, updates `boost` and freezes the encoders X^{j,0}, j <= d.
StageResult train_stage(NestedUNet<float>& model, BoostState& boost,
                        const std::vector<Sample>& data, int d,
                        const StageOptions& options, const StageHooks& hooks = {});

// Per-sample mIoU of UNet^d's prediction on `data` (eval mode).
std::vector<double> score_learner(NestedUNet<float>& model, const EtaWeights& eta,
                                  int d, const std::vector<Sample>& data,
                                  int batch_size = 16);

// Stacks samples [first, first + count) of `data` into one batch.
Tensor<float> stack_images(const std::vector<Sample>& data,
                           std::span<const std::size_t> indices);

}  // namespace adsunet
