#include "adsunet/model_core.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace adsunet {

namespace {

template <typename V>
void write_values(std::ostream& os, const V& values) {
  using T = typename V::value_type;
  const std::uint64_t count = values.size();
  os.write(reinterpret_cast<const char*>(&count), sizeof(count));
  os.write(reinterpret_cast<const char*>(values.data()),
           static_cast<std::streamsize>(count * sizeof(T)));
}

template <typename V>
void read_values(std::istream& is, V& values, const std::string& what) {
  using T = typename V::value_type;
  std::uint64_t count = 0;
  is.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!is || count != values.size()) {
    throw IoError("checkpoint: size mismatch while reading " + what);
  }
  is.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(count * sizeof(T)));
  if (!is) throw IoError("checkpoint: truncated while reading " + what);
}

void write_i32(std::ostream& os, std::int32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::int32_t read_i32(std::istream& is) {
  std::int32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("checkpoint: truncated header");
  return v;
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
void add_into(std::map<GridIndex, Tensor<T>>& grads, GridIndex index,
              Tensor<T>&& g) {
  auto it = grads.find(index);
  if (it == grads.end()) {
    grads.emplace(index, std::move(g));
  } else {
    it->second += g;
  }
}

constexpr char kMagic[8] = {'A', 'D', 'S', 'U', 'N', 'E', 'T', '1'};

}  // namespace

// ------------------------------------------------------------ ConvBlock

template <typename T>
ConvBlock<T>::ConvBlock(ConvBlockSpec spec, bool batchnorm)
    : conv1(spec.in_channels, spec.out_channels, 3),
      bn1(spec.out_channels),
      conv2(spec.out_channels, spec.out_channels, 3),
      bn2(spec.out_channels),
      spec_(spec),
      batchnorm_(batchnorm) {}

template <typename T>
void ConvBlock<T>::init(std::mt19937_64& rng) {
  conv1.init_he_uniform(rng);
  conv2.init_he_uniform(rng);
}

template <typename T>
Tensor<T> ConvBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  if (x.c() != spec_.in_channels) {
    throw DimensionError("block " + spec_.grid_index.str() + " expects " +
                         std::to_string(spec_.in_channels) +
                         " input channels, got " + x.shape().str());
  }
  Tensor<T> h = conv1.forward(x);
  if (batchnorm_) h = bn1.forward(h, mode);
  h = relu1.forward(h);
  h = conv2.forward(h);
  if (batchnorm_) h = bn2.forward(h, mode);
  return relu2.forward(h);
}

template <typename T>
Tensor<T> ConvBlock<T>::backward(const Tensor<T>& dy, bool need_input_grad) {
  Tensor<T> g = relu2.backward(dy);
  if (batchnorm_) g = bn2.backward(g);
  g = conv2.backward(g, true);
  g = relu1.backward(g);
  if (batchnorm_) g = bn1.backward(g);
  return conv1.backward(g, need_input_grad);
}

template <typename T>
std::vector<Param<T>*> ConvBlock<T>::params() {
  std::vector<Param<T>*> out{&conv1.weight, &conv1.bias, &conv2.weight,
                             &conv2.bias};
  if (batchnorm_) {
    for (auto* p : {&bn1.gamma, &bn1.beta, &bn2.gamma, &bn2.beta}) {
      out.push_back(p);
    }
  }
  return out;
}

template <typename T>
void ConvBlock<T>::write(std::ostream& os) const {
  write_values(os, conv1.weight.value);
  write_values(os, conv1.bias.value);
  write_values(os, conv2.weight.value);
  write_values(os, conv2.bias.value);
  for (const auto* bn : {&bn1, &bn2}) {
    write_values(os, bn->gamma.value);
    write_values(os, bn->beta.value);
    write_values(os, bn->running_mean);
    write_values(os, bn->running_var);
  }
}

template <typename T>
void ConvBlock<T>::read(std::istream& is) {
  const std::string name = spec_.grid_index.str();
  read_values(is, conv1.weight.value, name);
  read_values(is, conv1.bias.value, name);
  read_values(is, conv2.weight.value, name);
  read_values(is, conv2.bias.value, name);
  for (auto* bn : {&bn1, &bn2}) {
    read_values(is, bn->gamma.value, name);
    read_values(is, bn->beta.value, name);
    read_values(is, bn->running_mean, name);
    read_values(is, bn->running_var, name);
  }
}

// ------------------------------------------------------------- ScseGate

template <typename T>
ScseGate<T>::ScseGate(int channels, ScseCombine combine)
    : channels_(channels),
      reduced_(std::max(1, channels / 2)),
      combine_(combine) {
  spatial.resize(channels_);
  channel_fc1.resize(static_cast<std::size_t>(channels_) * reduced_);
  channel_fc2.resize(static_cast<std::size_t>(reduced_) * channels_);
}

template <typename T>
void ScseGate<T>::init(std::mt19937_64& rng) {
  auto fill = [&rng](Buffer<T>& v, int fan_in) {
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& x : v) x = static_cast<T>(dist(rng));
  };
  fill(spatial.value, channels_);
  fill(channel_fc1.value, reduced_);
  fill(channel_fc2.value, channels_);
}

template <typename T>
Tensor<T> ScseGate<T>::forward(const Tensor<T>& u) {
  if (u.c() != channels_) {
    throw DimensionError("scSE gate expects " + std::to_string(channels_) +
                         " channels, got " + u.shape().str());
  }
  input_ = u;
  const int batch = u.n();
  const std::size_t hw = u.plane_size();
  spatial_gate_.assign(batch * hw, T(0));
  channel_gate_.assign(static_cast<std::size_t>(batch) * channels_, T(0));
  squeeze_.assign(static_cast<std::size_t>(batch) * channels_, T(0));
  hidden_.assign(static_cast<std::size_t>(batch) * reduced_, T(0));
  spatial_wins_.assign(u.size(), 0);
  Tensor<T> out(u.shape());
  const T* wsq = spatial.value.data();
  const T* w1 = channel_fc1.value.data();
  const T* w2 = channel_fc2.value.data();
  for (int n = 0; n < batch; ++n) {
    T* q = spatial_gate_.data() + n * hw;
    for (int c = 0; c < channels_; ++c) {
      const T* p = u.plane(n, c);
      const T wc = wsq[c];
      T sum = 0;
      for (std::size_t i = 0; i < hw; ++i) {
        q[i] += wc * p[i];
        sum += p[i];
      }
      squeeze_[n * channels_ + c] = sum / static_cast<T>(hw);
    }
    for (std::size_t i = 0; i < hw; ++i) q[i] = sigmoid(q[i]);
    const T* z = squeeze_.data() + n * channels_;
    T* h = hidden_.data() + n * reduced_;
    for (int r = 0; r < reduced_; ++r) {
      T acc = 0;
      for (int c = 0; c < channels_; ++c) acc += w2[r * channels_ + c] * z[c];
      h[r] = acc;
    }
    T* b = channel_gate_.data() + n * channels_;
    for (int c = 0; c < channels_; ++c) {
      T acc = 0;
      for (int r = 0; r < reduced_; ++r) {
        acc += w1[c * reduced_ + r] * std::max(h[r], T(0));
      }
      b[c] = sigmoid(acc);
    }
    for (int c = 0; c < channels_; ++c) {
      const T* p = u.plane(n, c);
      T* o = out.plane(n, c);
      std::uint8_t* wins =
          spatial_wins_.data() + (static_cast<std::size_t>(n) * channels_ + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T s = q[i] * p[i];
        const T ch = b[c] * p[i];
        if (combine_ == ScseCombine::kMax) {
          const bool spatial_first = s >= ch;
          wins[i] = spatial_first;
          o[i] = spatial_first ? s : ch;
        } else {
          o[i] = s + ch;
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> ScseGate<T>::backward(const Tensor<T>& dy, bool need_input_grad) {
  const Tensor<T>& u = input_;
  const int batch = u.n();
  const std::size_t hw = u.plane_size();
  Tensor<T> du;
  if (need_input_grad) du = Tensor<T>(u.shape());
  const T* wsq = spatial.value.data();
  const T* w1 = channel_fc1.value.data();
  const T* w2 = channel_fc2.value.data();
  std::vector<T> dq(hw);
  std::vector<T> dzhat(channels_);
  std::vector<T> dh(reduced_);
  std::vector<T> dz(channels_);
  for (int n = 0; n < batch; ++n) {
    const T* q = spatial_gate_.data() + n * hw;
    const T* b = channel_gate_.data() + n * channels_;
    std::fill(dq.begin(), dq.end(), T(0));
    for (int c = 0; c < channels_; ++c) {
      const T* p = u.plane(n, c);
      const T* g = dy.plane(n, c);
      const std::uint8_t* wins =
          spatial_wins_.data() + (static_cast<std::size_t>(n) * channels_ + c) * hw;
      T* dui = need_input_grad ? du.plane(n, c) : nullptr;
      T dzc = 0;
      for (std::size_t i = 0; i < hw; ++i) {
        const bool to_spatial =
            combine_ == ScseCombine::kAdd || wins[i] != 0;
        const bool to_channel =
            combine_ == ScseCombine::kAdd || wins[i] == 0;
        T direct = 0;
        if (to_spatial) {
          dq[i] += g[i] * p[i];
          direct += q[i];
        }
        if (to_channel) {
          dzc += g[i] * p[i];
          direct += b[c];
        }
        if (dui) dui[i] = g[i] * direct;
      }
      dzhat[c] = dzc * b[c] * (T(1) - b[c]);
    }
    // spatial branch: q = sigmoid(sum_c wsq_c U_c)
    for (std::size_t i = 0; i < hw; ++i) dq[i] *= q[i] * (T(1) - q[i]);
    for (int c = 0; c < channels_; ++c) {
      const T* p = u.plane(n, c);
      T acc = 0;
      for (std::size_t i = 0; i < hw; ++i) acc += dq[i] * p[i];
      spatial.grad[c] += acc;
      if (need_input_grad) {
        T* dui = du.plane(n, c);
        for (std::size_t i = 0; i < hw; ++i) dui[i] += dq[i] * wsq[c];
      }
    }
    // channel branch: zhat = W1 relu(h), h = W2 z
    const T* z = squeeze_.data() + n * channels_;
    const T* h = hidden_.data() + n * reduced_;
    std::fill(dh.begin(), dh.end(), T(0));
    for (int c = 0; c < channels_; ++c) {
      for (int r = 0; r < reduced_; ++r) {
        channel_fc1.grad[c * reduced_ + r] += dzhat[c] * std::max(h[r], T(0));
        dh[r] += w1[c * reduced_ + r] * dzhat[c];
      }
    }
    for (int r = 0; r < reduced_; ++r) {
      if (h[r] <= T(0)) dh[r] = 0;
    }
    std::fill(dz.begin(), dz.end(), T(0));
    for (int r = 0; r < reduced_; ++r) {
      for (int c = 0; c < channels_; ++c) {
        channel_fc2.grad[r * channels_ + c] += dh[r] * z[c];
        dz[c] += w2[r * channels_ + c] * dh[r];
      }
    }
    if (need_input_grad) {
      for (int c = 0; c < channels_; ++c) {
        T* dui = du.plane(n, c);
        const T share = dz[c] / static_cast<T>(hw);
        for (std::size_t i = 0; i < hw; ++i) dui[i] += share;
      }
    }
  }
  return du;
}

template <typename T>
std::vector<Param<T>*> ScseGate<T>::params() {
  return {&spatial, &channel_fc1, &channel_fc2};
}

// ----------------------------------------------------------- NestedUNet

template <typename T>
NestedUNet<T>::NestedUNet(ModelConfig config) : config_(config) {
  if (config_.max_depth < 1) throw ConfigError("max_depth must be >= 1");
  if (config_.classes < 2) throw ConfigError("classes must be >= 2");
  if (config_.base_filters < 1) throw ConfigError("base_filters must be >= 1");
}

template <typename T>
void NestedUNet<T>::add_stage(int d, std::mt19937_64& rng) {
  if (d != built_depth_ + 1) {
    throw StateError("stage " + std::to_string(d) +
                     " added out of order; built depth is " +
                     std::to_string(built_depth_));
  }
  if (d > config_.max_depth) {
    throw StateError("stage " + std::to_string(d) + " exceeds max depth " +
                     std::to_string(config_.max_depth));
  }
  auto make_block = [&](GridIndex idx, int in, int out, BlockRole role) {
    ConvBlock<T> block({in, out, role, idx}, config_.batchnorm);
    block.init(rng);
    blocks_.insert_or_assign(idx, std::move(block));
  };
  if (d == 1) {
    make_block({0, 0}, config_.in_channels, config_.channels(0),
               BlockRole::kEncoder);
  }
  make_block({d, 0}, config_.channels(d - 1), config_.channels(d),
             BlockRole::kBottleneck);
  for (int j = 1; j <= d; ++j) {
    const int i = d - j;
    const GridIndex dec{i, j};
    const int below = config_.channels(i + 1);
    const int here = config_.channels(i);
    Upsampler up;
    up.mode = config_.upsample;
    int up_out = below;
    if (config_.upsample == UpsampleMode::kTransposed) {
      up.deconv = ConvTranspose2x2<T>(below, here);
      up.deconv.init_he_uniform(rng);
      up_out = here;
    }
    ups_.insert_or_assign(dec, std::move(up));
    if (gated_skip(d, dec)) {
      ScseGate<T> gate(here, config_.scse_combine);
      gate.init(rng);
      gates_.insert_or_assign(dec, std::move(gate));
    }
    make_block(dec, up_out + here, here, BlockRole::kDecoder);
  }
  for (int j = 0; j <= d; ++j) {
    const GridIndex idx{d - j, j};
    Conv2d<T> head(config_.channels(idx.i), config_.classes, 1);
    head.init_he_uniform(rng);
    heads_.insert_or_assign(idx, std::move(head));
  }
  built_depth_ = d;
}

template <typename T>
std::vector<GridIndex> NestedUNet<T>::supervised_blocks(int d) const {
  if (!config_.deep_supervision) return {GridIndex{0, d}};
  std::vector<GridIndex> out;
  for (int j = 0; j <= d; ++j) out.push_back({d - j, j});
  return out;
}

template <typename T>
std::vector<GridIndex> NestedUNet<T>::required_blocks(int d) const {
  std::vector<GridIndex> out;
  for (int i = 0; i <= d; ++i) out.push_back({i, 0});
  for (int j = 1; j <= d; ++j) out.push_back({d - j, j});
  return out;
}

template <typename T>
bool NestedUNet<T>::gated_skip(int d, GridIndex decoder) const {
  // Skip features come from encoders trained in an earlier stage.
  return config_.scse && d >= 2 && decoder.i < d;
}

template <typename T>
Mode NestedUNet<T>::block_mode(GridIndex index, Mode mode) const {
  return (mode == Mode::kTrain && !is_frozen(index)) ? Mode::kTrain
                                                     : Mode::kEval;
}

template <typename T>
Tensor<T> NestedUNet<T>::upsample_forward(GridIndex decoder,
                                          const Tensor<T>& x) {
  auto& up = ups_.at(decoder);
  return up.mode == UpsampleMode::kTransposed ? up.deconv.forward(x)
                                              : up.bilinear.forward(x);
}

template <typename T>
Tensor<T> NestedUNet<T>::upsample_backward(GridIndex decoder,
                                           const Tensor<T>& dy) {
  auto& up = ups_.at(decoder);
  return up.mode == UpsampleMode::kTransposed ? up.deconv.backward(dy, true)
                                              : up.bilinear.backward(dy);
}

template <typename T>
typename NestedUNet<T>::LogitMap NestedUNet<T>::forward(int d,
                                                        const Tensor<T>& x,
                                                        Mode mode) {
  if (d < 1 || d > built_depth_) {
    throw StateError("UNet^" + std::to_string(d) +
                     " requested but built depth is " +
                     std::to_string(built_depth_));
  }
  const int factor = 1 << d;
  if (x.h() % factor != 0 || x.w() % factor != 0) {
    throw InputSizeError("UNet^" + std::to_string(d) + " needs H and W divisible by " +
                         std::to_string(factor) + ", got " + x.shape().str());
  }
  if (x.c() != config_.in_channels) {
    throw DimensionError("model expects " + std::to_string(config_.in_channels) +
                         " input channels, got " + x.shape().str());
  }
  features_.clear();
  features_[{0, 0}] = blocks_.at({0, 0}).forward(x, block_mode({0, 0}, mode));
  for (int i = 1; i <= d; ++i) {
    const GridIndex idx{i, 0};
    Tensor<T> pooled = pools_[i].forward(features_.at({i - 1, 0}));
    features_[idx] = blocks_.at(idx).forward(pooled, block_mode(idx, mode));
  }
  for (int j = 1; j <= d; ++j) {
    const int i = d - j;
    const GridIndex dec{i, j};
    Tensor<T> up = upsample_forward(dec, features_.at({i + 1, j - 1}));
    up_channels_[dec] = up.c();
    const Tensor<T>& skip = features_.at({i, 0});
    Tensor<T> cat = gated_skip(d, dec)
                        ? concat_channels(up, gates_.at(dec).forward(skip))
                        : concat_channels(up, skip);
    features_[dec] = blocks_.at(dec).forward(cat, block_mode(dec, mode));
  }
  LogitMap logits;
  for (const auto& idx : supervised_blocks(d)) {
    logits[idx] = heads_.at(idx).forward(features_.at(idx));
  }
  return logits;
}

template <typename T>
void NestedUNet<T>::backward(int d, const LogitMap& dlogits) {
  std::map<GridIndex, Tensor<T>> grads;
  for (const auto& [idx, g] : dlogits) {
    if (is_frozen(idx)) continue;
    add_into(grads, idx, heads_.at(idx).backward(g, true));
  }
  for (int j = d; j >= 1; --j) {
    const int i = d - j;
    const GridIndex dec{i, j};
    if (is_frozen(dec)) continue;
    auto it = grads.find(dec);
    if (it == grads.end()) continue;
    Tensor<T> dcat = blocks_.at(dec).backward(it->second, true);
    Tensor<T> dup;
    Tensor<T> dskip;
    split_channels(dcat, up_channels_.at(dec), dup, dskip);
    const GridIndex enc{i, 0};
    const bool enc_trainable = !is_frozen(enc);
    if (gated_skip(d, dec)) {
      dskip = gates_.at(dec).backward(dskip, enc_trainable);
    }
    if (enc_trainable) add_into(grads, enc, std::move(dskip));
    add_into(grads, GridIndex{i + 1, j - 1}, upsample_backward(dec, dup));
  }
  for (int i = d; i >= 0; --i) {
    const GridIndex enc{i, 0};
    if (is_frozen(enc)) break;
    auto it = grads.find(enc);
    if (it == grads.end()) continue;
    const bool need_input = i > 0 && !is_frozen({i - 1, 0});
    Tensor<T> dx = blocks_.at(enc).backward(it->second, need_input);
    if (need_input) add_into(grads, GridIndex{i - 1, 0}, pools_.at(i).backward(dx));
  }
}

template <typename T>
void NestedUNet<T>::freeze(GridIndex index) {
  if (!blocks_.contains(index)) {
    throw StateError("cannot freeze missing block " + index.str());
  }
  frozen_.insert(index);
}

template <typename T>
std::vector<Param<T>*> NestedUNet<T>::stage_params(int d) {
  std::vector<Param<T>*> out;
  auto append = [&out](std::vector<Param<T>*> ps) {
    out.insert(out.end(), ps.begin(), ps.end());
  };
  if (d == 1 && !is_frozen({0, 0})) append(blocks_.at({0, 0}).params());
  if (!is_frozen({d, 0})) append(blocks_.at({d, 0}).params());
  for (int j = 1; j <= d; ++j) {
    const GridIndex dec{d - j, j};
    if (is_frozen(dec)) continue;
    auto& up = ups_.at(dec);
    if (up.mode == UpsampleMode::kTransposed) {
      out.push_back(&up.deconv.weight);
      out.push_back(&up.deconv.bias);
    }
    if (auto g = gates_.find(dec); g != gates_.end()) append(g->second.params());
    append(blocks_.at(dec).params());
  }
  for (const auto& idx : supervised_blocks(d)) {
    if (is_frozen(idx)) continue;
    auto& h = heads_.at(idx);
    out.push_back(&h.weight);
    out.push_back(&h.bias);
  }
  return out;
}

template <typename T>
void NestedUNet<T>::zero_grad(int d) {
  for (auto* p : stage_params(d)) p->zero_grad();
}

template <typename T>
ConvBlock<T>& NestedUNet<T>::block(GridIndex index) {
  auto it = blocks_.find(index);
  if (it == blocks_.end()) throw StateError("missing block " + index.str());
  return it->second;
}

template <typename T>
const ConvBlock<T>& NestedUNet<T>::block(GridIndex index) const {
  auto it = blocks_.find(index);
  if (it == blocks_.end()) throw StateError("missing block " + index.str());
  return it->second;
}

template <typename T>
ScseGate<T>& NestedUNet<T>::gate(GridIndex decoder) {
  auto it = gates_.find(decoder);
  if (it == gates_.end()) {
    throw StateError("no scSE gate on skip into " + decoder.str());
  }
  return it->second;
}

template <typename T>
Conv2d<T>& NestedUNet<T>::head(GridIndex index) {
  auto it = heads_.find(index);
  if (it == heads_.end()) throw StateError("no head on " + index.str());
  return it->second;
}

template <typename T>
std::vector<GridIndex> NestedUNet<T>::block_indices() const {
  std::vector<GridIndex> out;
  for (const auto& [idx, _] : blocks_) out.push_back(idx);
  return out;
}

template <typename T>
std::string NestedUNet<T>::block_bytes(GridIndex index) const {
  std::ostringstream os(std::ios::binary);
  block(index).write(os);
  return os.str();
}

template <typename T>
void NestedUNet<T>::save(std::ostream& os) const {
  os.write(kMagic, sizeof(kMagic));
  write_i32(os, static_cast<std::int32_t>(sizeof(T)));
  write_i32(os, config_.in_channels);
  write_i32(os, config_.classes);
  write_i32(os, config_.base_filters);
  write_i32(os, config_.max_depth);
  write_i32(os, config_.deep_supervision);
  write_i32(os, config_.scse);
  write_i32(os, static_cast<std::int32_t>(config_.scse_combine));
  write_i32(os, static_cast<std::int32_t>(config_.upsample));
  write_i32(os, config_.batchnorm);
  write_i32(os, built_depth_);
  write_i32(os, static_cast<std::int32_t>(frozen_.size()));
  for (const auto& idx : frozen_) {
    write_i32(os, idx.i);
    write_i32(os, idx.j);
  }
  for (const auto& [idx, block] : blocks_) block.write(os);
  for (const auto& [idx, up] : ups_) {
    if (up.mode == UpsampleMode::kTransposed) {
      write_values(os, up.deconv.weight.value);
      write_values(os, up.deconv.bias.value);
    }
  }
  for (const auto& [idx, gate] : gates_) {
    write_values(os, gate.spatial.value);
    write_values(os, gate.channel_fc1.value);
    write_values(os, gate.channel_fc2.value);
  }
  for (const auto& [idx, head] : heads_) {
    write_values(os, head.weight.value);
    write_values(os, head.bias.value);
  }
}

template <typename T>
void NestedUNet<T>::load(std::istream& is) {
  char magic[sizeof(kMagic)] = {};
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("checkpoint: bad magic");
  }
  if (read_i32(is) != static_cast<std::int32_t>(sizeof(T))) {
    throw IoError("checkpoint: scalar width mismatch");
  }
  ModelConfig cfg;
  cfg.in_channels = read_i32(is);
  cfg.classes = read_i32(is);
  cfg.base_filters = read_i32(is);
  cfg.max_depth = read_i32(is);
  cfg.deep_supervision = read_i32(is) != 0;
  cfg.scse = read_i32(is) != 0;
  cfg.scse_combine = static_cast<ScseCombine>(read_i32(is));
  cfg.upsample = static_cast<UpsampleMode>(read_i32(is));
  cfg.batchnorm = read_i32(is) != 0;
  const int depth = read_i32(is);
  if (!(cfg == config_)) {
    throw ConfigError("checkpoint was written by a model with a different configuration");
  }
  *this = NestedUNet<T>(cfg);
  std::mt19937_64 scratch(0);
  for (int d = 1; d <= depth; ++d) add_stage(d, scratch);
  const int frozen_count = read_i32(is);
  for (int k = 0; k < frozen_count; ++k) {
    const int i = read_i32(is);
    const int j = read_i32(is);
    freeze({i, j});
  }
  for (auto& [idx, block] : blocks_) block.read(is);
  for (auto& [idx, up] : ups_) {
    if (up.mode == UpsampleMode::kTransposed) {
      read_values(is, up.deconv.weight.value, "upsampler " + idx.str());
      read_values(is, up.deconv.bias.value, "upsampler " + idx.str());
    }
  }
  for (auto& [idx, gate] : gates_) {
    read_values(is, gate.spatial.value, "gate " + idx.str());
    read_values(is, gate.channel_fc1.value, "gate " + idx.str());
    read_values(is, gate.channel_fc2.value, "gate " + idx.str());
  }
  for (auto& [idx, head] : heads_) {
    read_values(is, head.weight.value, "head " + idx.str());
    read_values(is, head.bias.value, "head " + idx.str());
  }
}

template class ConvBlock<float>;
template class ConvBlock<double>;
template class ScseGate<float>;
template class ScseGate<double>;
template class NestedUNet<float>;
template class NestedUNet<double>;

}  // namespace adsunet
