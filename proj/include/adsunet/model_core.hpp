#pragma once

// Convolution block grid X^{i,j}, scSE recalibration and assembly of the
// depth-d base learner UNet^d over shared, progressively frozen encoders.

#include <iosfwd>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "adsunet/layers.hpp"

namespace adsunet {

// Position of a block in the nested grid: i = resolution level (H / 2^i),
// j = decoder step. Encoders have j == 0.
struct GridIndex {
  int i = 0;
  int j = 0;
  auto operator<=>(const GridIndex&) const = default;
  std::string str() const {
    return "X(" + std::to_string(i) + "," + std::to_string(j) + ")";
  }
};

enum class BlockRole { kEncoder, kBottleneck, kDecoder };

struct ConvBlockSpec {
  int in_channels = 0;
  int out_channels = 0;
  BlockRole role = BlockRole::kEncoder;
  GridIndex grid_index{};
};

// Channels of level i: base_filters * 2^i.
inline int ladder_channels(int base_filters, int level) {
  return base_filters << level;
}

// Two (3x3 conv -> batch norm -> ReLU) stages. Spatial size is preserved.
template <typename T>
class ConvBlock {
 public:
  ConvBlock() = default;
  explicit ConvBlock(ConvBlockSpec spec, bool batchnorm = true);

  void init(std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad);

  const ConvBlockSpec& spec() const { return spec_; }
  bool batchnorm() const { return batchnorm_; }
  std::vector<Param<T>*> params();
  void write(std::ostream& os) const;
  void read(std::istream& is);

  Conv2d<T> conv1;
  BatchNorm2d<T> bn1;
  ReLU<T> relu1;
  Conv2d<T> conv2;
  BatchNorm2d<T> bn2;
  ReLU<T> relu2;

 private:
  ConvBlockSpec spec_{};
  bool batchnorm_ = true;
};

enum class ScseCombine { kMax, kAdd };

// Concurrent spatial and channel squeeze & excitation.
//   sSE: q = W_sq . U(h, w, :),          out_s = sigmoid(q) * U
//   cSE: z = mean_hw U, zhat = W1 relu(W2 z), out_c = sigmoid(zhat) * U
// The two branches are merged elementwise by max (default) or sum.
template <typename T>
class ScseGate {
 public:
  ScseGate() = default;
  explicit ScseGate(int channels, ScseCombine combine = ScseCombine::kMax);

  void init(std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& u);
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad);

  int channels() const { return channels_; }
  int reduced() const { return reduced_; }
  ScseCombine combine() const { return combine_; }
  std::vector<Param<T>*> params();

  Param<T> spatial;      // W_sq, [C]
  Param<T> channel_fc1;  // W1, [C x r]
  Param<T> channel_fc2;  // W2, [r x C]

 private:
  int channels_ = 0;
  int reduced_ = 0;
  ScseCombine combine_ = ScseCombine::kMax;
  Tensor<T> input_;
  std::vector<T> spatial_gate_;  // [N x HW]
  std::vector<T> channel_gate_;  // [N x C]
  std::vector<T> squeeze_;       // z, [N x C]
  std::vector<T> hidden_;        // W2 z before ReLU, [N x r]
  std::vector<std::uint8_t> spatial_wins_;
};

template <typename T>
Tensor<T> scse_forward(const Tensor<T>& u, ScseGate<T>& gate) {
  return gate.forward(u);
}

enum class UpsampleMode { kTransposed, kBilinear };

struct ModelConfig {
  int in_channels = 3;
  int classes = 2;
  int base_filters = 16;
  int max_depth = 4;
  bool deep_supervision = true;
  bool scse = true;
  ScseCombine scse_combine = ScseCombine::kMax;
  UpsampleMode upsample = UpsampleMode::kTransposed;
  bool batchnorm = true;

  int channels(int level) const { return ladder_channels(base_filters, level); }
  bool operator==(const ModelConfig&) const = default;
};

// The shared grid of blocks. Stage d adds the encoder X^{d,0}, the decoders
// X^{d-j,j} (j = 1..d) with their upsamplers and skip gates, and the 1x1
// supervision heads of the blocks with i + j = d.
template <typename T>
class NestedUNet {
 public:
  using LogitMap = std::map<GridIndex, Tensor<T>>;

  explicit NestedUNet(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  int built_depth() const { return built_depth_; }

  // Initializes the blocks UNet^d adds; stages must be added in order.
  void add_stage(int d, std::mt19937_64& rng);

  // Supervised blocks of UNet^d ordered (d,0), (d-1,1), ..., (0,d). Without
  // deep supervision only (0,d).
  std::vector<GridIndex> supervised_blocks(int d) const;
  // Blocks UNet^d needs: encoders (0..d, 0) and decoders (d-j, j).
  std::vector<GridIndex> required_blocks(int d) const;
  // Whether the skip edge into decoder `decoder` is recalibrated by scSE.
  bool gated_skip(int d, GridIndex decoder) const;

  // Runs UNet^d and returns the supervision head logits, each at resolution
  // (H / 2^i, W / 2^i). In kTrain mode frozen blocks still run in kEval.
  LogitMap forward(int d, const Tensor<T>& x, Mode mode);
  // Back-propagates head gradients of the last forward(d, ...) call into
  // every non-frozen parameter of UNet^d.
  void backward(int d, const LogitMap& dlogits);

  // Feature maps of the last forward call (block outputs, before heads).
  const std::map<GridIndex, Tensor<T>>& last_features() const {
    return features_;
  }

  void freeze(GridIndex index);
  bool is_frozen(GridIndex index) const { return frozen_.contains(index); }
  const std::set<GridIndex>& frozen() const { return frozen_; }

  // Trainable (non-frozen) parameters introduced at stage d.
  std::vector<Param<T>*> stage_params(int d);
  void zero_grad(int d);

  bool has_block(GridIndex index) const { return blocks_.contains(index); }
  ConvBlock<T>& block(GridIndex index);
  const ConvBlock<T>& block(GridIndex index) const;
  ScseGate<T>& gate(GridIndex decoder);
  Conv2d<T>& head(GridIndex index);
  std::vector<GridIndex> block_indices() const;

  // Raw parameter and running-statistics bytes of one block.
  std::string block_bytes(GridIndex index) const;

  void save(std::ostream& os) const;
  // Fails when the checkpoint was written under a different ModelConfig.
  void load(std::istream& is);

 private:
  struct Upsampler {
    UpsampleMode mode = UpsampleMode::kTransposed;
    ConvTranspose2x2<T> deconv;
    BilinearUp2<T> bilinear;
  };

  Mode block_mode(GridIndex index, Mode mode) const;
  Tensor<T> upsample_forward(GridIndex decoder, const Tensor<T>& x);
  Tensor<T> upsample_backward(GridIndex decoder, const Tensor<T>& dy);

  ModelConfig config_;
  int built_depth_ = 0;
  std::map<GridIndex, ConvBlock<T>> blocks_;
  std::map<GridIndex, Upsampler> ups_;
  std::map<GridIndex, ScseGate<T>> gates_;
  std::map<GridIndex, Conv2d<T>> heads_;
  std::map<int, MaxPool2<T>> pools_;
  std::set<GridIndex> frozen_;

  std::map<GridIndex, Tensor<T>> features_;
  std::map<GridIndex, int> up_channels_;
};

}  // namespace adsunet
