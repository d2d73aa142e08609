#include "adsunet/boosting.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "adsunet/kv_file.hpp"
#include "adsunet/labels.hpp"

namespace adsunet {

namespace {

constexpr double kErrorClamp = 1e-6;

std::string blocks_to_string(const std::vector<GridIndex>& blocks) {
  std::string s;
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    if (k) s += ",";
    s += std::to_string(blocks[k].i) + ":" + std::to_string(blocks[k].j);
  }
  return s;
}

std::vector<GridIndex> blocks_from_string(const std::string& s) {
  std::vector<GridIndex> out;
  for (const auto& part : split(s, ',')) {
    const auto ij = split(part, ':');
    if (ij.size() != 2) throw IoError("malformed block list: " + s);
    out.push_back({std::stoi(ij[0]), std::stoi(ij[1])});
  }
  return out;
}

}  // namespace

// ------------------------------------------------------------------ mIoU

double miou_from_labels(std::span<const std::uint8_t> pred,
                        std::span<const std::uint8_t> target, int classes) {
  if (pred.size() != target.size()) {
    throw DimensionError("miou: prediction and target sizes differ");
  }
  std::vector<std::size_t> inter(classes, 0);
  std::vector<std::size_t> pred_count(classes, 0);
  std::vector<std::size_t> target_count(classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= classes || target[i] >= classes) {
      throw ValueError("miou: label out of range");
    }
    ++pred_count[pred[i]];
    ++target_count[target[i]];
    if (pred[i] == target[i]) ++inter[pred[i]];
  }
  double sum = 0;
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    const std::size_t uni = pred_count[c] + target_count[c] - inter[c];
    if (uni == 0) continue;
    sum += static_cast<double>(inter[c]) / static_cast<double>(uni);
    ++present;
  }
  return present == 0 ? 1.0 : sum / present;
}

template <typename T>
double miou_score(const Tensor<T>& pred_onehot, const Tensor<T>& target_onehot) {
  if (pred_onehot.shape() != target_onehot.shape()) {
    throw DimensionError("miou_score: " + pred_onehot.shape().str() + " vs " +
                         target_onehot.shape().str());
  }
  require_one_hot(pred_onehot, "miou_score prediction");
  require_one_hot(target_onehot, "miou_score target");
  // Per class: y.p / (y.y + p.p - y.p) over all pixels.
  const std::size_t hw = pred_onehot.plane_size();
  double sum = 0;
  int present = 0;
  for (int c = 0; c < pred_onehot.c(); ++c) {
    double yp = 0;
    double yy = 0;
    double pp = 0;
    for (int n = 0; n < pred_onehot.n(); ++n) {
      const T* p = pred_onehot.plane(n, c);
      const T* y = target_onehot.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        yp += static_cast<double>(y[i]) * p[i];
        yy += static_cast<double>(y[i]) * y[i];
        pp += static_cast<double>(p[i]) * p[i];
      }
    }
    const double uni = yy + pp - yp;
    if (uni == 0) continue;
    sum += yp / uni;
    ++present;
  }
  return present == 0 ? 1.0 : sum / present;
}

ConfusionAccumulator::ConfusionAccumulator(int classes)
    : classes_(classes), inter_(classes, 0.0), uni_(classes, 0.0) {}

void ConfusionAccumulator::add(std::span<const std::uint8_t> pred,
                               std::span<const std::uint8_t> target) {
  if (pred.size() != target.size()) {
    throw DimensionError("confusion: prediction and target sizes differ");
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == target[i]) {
      inter_[pred[i]] += 1;
      uni_[pred[i]] += 1;
    } else {
      uni_[pred[i]] += 1;
      uni_[target[i]] += 1;
    }
  }
}

std::vector<double> ConfusionAccumulator::per_class_iou() const {
  std::vector<double> out(classes_, std::nan(""));
  for (int c = 0; c < classes_; ++c) {
    if (uni_[c] > 0) out[c] = inter_[c] / uni_[c];
  }
  return out;
}

double ConfusionAccumulator::miou() const {
  double sum = 0;
  int present = 0;
  for (int c = 0; c < classes_; ++c) {
    if (uni_[c] == 0) continue;
    sum += inter_[c] / uni_[c];
    ++present;
  }
  return present == 0 ? 1.0 : sum / present;
}

// ---------------------------------------------------------- SAMME ledger

double weighted_error(std::span<const double> scores,
                      std::span<const double> weights) {
  if (scores.size() != weights.size()) {
    throw DimensionError("weighted_error: " + std::to_string(scores.size()) +
                         " scores for " + std::to_string(weights.size()) +
                         " weights");
  }
  double eps = 0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    eps += weights[k] * (1.0 - scores[k]);
  }
  return eps;
}

bool is_discarded(double eps, int classes) {
  return !(eps < 1.0 - 1.0 / classes);
}

double alpha_from_error(double eps, int classes) {
  if (classes < 2) {
    throw ValueError("alpha_from_error: need at least 2 classes, got " +
                     std::to_string(classes));
  }
  if (is_discarded(eps, classes)) return 0.0;
  const double e = std::clamp(eps, kErrorClamp, 1.0 - kErrorClamp);
  return 0.5 * std::log((1.0 - e) / e) + std::log(classes - 1.0);
}

std::vector<double> update_sample_weights(std::span<const double> weights,
                                          std::span<const double> scores) {
  if (weights.size() != scores.size()) {
    throw DimensionError("update_sample_weights: length mismatch");
  }
  std::vector<double> out(weights.size());
  double total = 0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (!(scores[k] >= 0.0 && scores[k] <= 1.0)) {
      throw ValueError("update_sample_weights: score " +
                       std::to_string(scores[k]) + " outside [0, 1]");
    }
    out[k] = weights[k] * std::exp(1.0 - scores[k]);
    total += out[k];
  }
  for (auto& w : out) w /= total;
  return out;
}

BoostState BoostState::initial(std::size_t samples) {
  if (samples == 0) throw ValueError("boosting needs at least one sample");
  BoostState s;
  s.sample_weights.assign(samples, 1.0 / static_cast<double>(samples));
  return s;
}

void BoostState::save(const std::filesystem::path& path) const {
  KeyValueFile kv;
  kv.set("format", std::string("adsunet-boost/1"));
  kv.set("stage", stage);
  kv.set("sample_weights", sample_weights);
  kv.set("alphas", alphas);
  kv.set("errors", errors);
  for (std::size_t d = 0; d < scores.size(); ++d) {
    kv.set("scores." + std::to_string(d + 1), scores[d]);
  }
  kv.write(path);
}

BoostState BoostState::load(const std::filesystem::path& path) {
  const auto kv = KeyValueFile::read(path);
  BoostState s;
  s.stage = static_cast<int>(kv.get_int("stage"));
  s.sample_weights = kv.get_doubles("sample_weights");
  s.alphas = kv.get_doubles("alphas");
  s.errors = kv.get_doubles("errors");
  for (int d = 1; d <= s.stage; ++d) {
    s.scores.push_back(kv.get_doubles("scores." + std::to_string(d)));
  }
  return s;
}

// -------------------------------------------------------------- manifest

std::vector<int> EnsembleManifest::filter_ladder() const {
  std::vector<int> out;
  for (int i = 0; i <= model.max_depth; ++i) out.push_back(model.channels(i));
  return out;
}

void EnsembleManifest::validate() const {
  if (entries.empty()) throw StateError("ensemble manifest has no entries");
  for (std::size_t k = 0; k < entries.size(); ++k) {
    if (entries[k].depth != static_cast<int>(k) + 1) {
      throw StateError("ensemble depths must run 1..T in order");
    }
  }
  const bool any = std::any_of(entries.begin(), entries.end(),
                               [](const auto& e) { return e.alpha > 0; });
  if (!any) throw StateError("ensemble has no learner with alpha > 0");
}

void EnsembleManifest::save(const std::filesystem::path& path) const {
  KeyValueFile kv;
  kv.set("format", std::string("adsunet-ensemble/1"));
  kv.set("classes", model.classes);
  kv.set("in_channels", model.in_channels);
  kv.set("base_filters", model.base_filters);
  kv.set("max_depth", model.max_depth);
  std::vector<double> ladder;
  for (int c : filter_ladder()) ladder.push_back(c);
  kv.set("filter_ladder", ladder);
  kv.set("deep_supervision", model.deep_supervision ? 1 : 0);
  kv.set("scse", model.scse ? 1 : 0);
  kv.set("scse_combine",
         std::string(model.scse_combine == ScseCombine::kMax ? "max" : "add"));
  kv.set("upsample", std::string(model.upsample == UpsampleMode::kTransposed
                                     ? "transposed"
                                     : "bilinear"));
  kv.set("seed", std::to_string(seed));
  kv.set("entries", static_cast<long long>(entries.size()));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& e = entries[k];
    const std::string p = "entry." + std::to_string(k + 1) + ".";
    kv.set(p + "depth", e.depth);
    kv.set(p + "checkpoint", e.checkpoint);
    kv.set(p + "eta_mode", to_string(e.eta.mode));
    kv.set(p + "blocks", blocks_to_string(e.eta.blocks));
    kv.set(p + "eta_logits", e.eta.raw_logits);
    kv.set(p + "eta_tilde", constrain_eta(e.eta));
    kv.set(p + "alpha", e.alpha);
  }
  kv.write(path);
}

EnsembleManifest EnsembleManifest::load(const std::filesystem::path& path) {
  const auto kv = KeyValueFile::read(path);
  EnsembleManifest m;
  m.model.classes = static_cast<int>(kv.get_int("classes"));
  m.model.in_channels = static_cast<int>(kv.get_int("in_channels"));
  m.model.base_filters = static_cast<int>(kv.get_int("base_filters"));
  m.model.max_depth = static_cast<int>(kv.get_int("max_depth"));
  m.model.deep_supervision = kv.get_int("deep_supervision") != 0;
  m.model.scse = kv.get_int("scse") != 0;
  m.model.scse_combine =
      kv.get("scse_combine") == "add" ? ScseCombine::kAdd : ScseCombine::kMax;
  m.model.upsample = kv.get("upsample") == "bilinear" ? UpsampleMode::kBilinear
                                                      : UpsampleMode::kTransposed;
  m.seed = std::stoull(kv.get("seed"));
  const auto count = kv.get_int("entries");
  for (long long k = 0; k < count; ++k) {
    const std::string p = "entry." + std::to_string(k + 1) + ".";
    EnsembleEntry e;
    e.depth = static_cast<int>(kv.get_int(p + "depth"));
    e.checkpoint = kv.get(p + "checkpoint");
    e.eta.mode = eta_mode_from_string(kv.get(p + "eta_mode"));
    e.eta.blocks = blocks_from_string(kv.get(p + "blocks"));
    e.eta.raw_logits = kv.get_doubles(p + "eta_logits");
    if (e.eta.raw_logits.size() != e.eta.blocks.size()) {
      throw IoError(path.string() + ": eta logits do not match block list");
    }
    e.alpha = kv.get_double(p + "alpha");
    m.entries.push_back(std::move(e));
  }
  return m;
}

std::string to_string(EnsembleMode mode) {
  return mode == EnsembleMode::kAlpha ? "alpha" : "avg";
}

EnsembleMode ensemble_mode_from_string(const std::string& s) {
  if (s == "alpha") return EnsembleMode::kAlpha;
  if (s == "avg") return EnsembleMode::kAverage;
  throw ConfigError("unknown ensemble mode '" + s + "' (expected alpha or avg)");
}

// -------------------------------------------------------------- inference

template <typename T>
EnsembleOutput<T> ensemble_combine(std::span<const Tensor<T>> learner_probs,
                                   std::span<const double> weights) {
  if (learner_probs.size() != weights.size()) {
    throw DimensionError("ensemble_combine: one weight per learner required");
  }
  Tensor<T> sum;
  double total = 0;
  for (std::size_t d = 0; d < learner_probs.size(); ++d) {
    if (weights[d] == 0.0) continue;
    const auto& p = learner_probs[d];
    if (sum.empty()) sum = Tensor<T>(p.shape());
    if (p.shape() != sum.shape()) {
      throw DimensionError("ensemble_combine: learner maps differ in shape");
    }
    const T w = static_cast<T>(weights[d]);
    for (std::size_t i = 0; i < sum.size(); ++i) sum.data()[i] += w * p.data()[i];
    total += weights[d];
  }
  if (sum.empty()) throw StateError("ensemble has no learner with weight > 0");
  EnsembleOutput<T> out;
  out.labels = argmax_labels(sum);
  const T inv = static_cast<T>(total);
  for (auto& v : sum.storage()) v /= inv;
  out.probs = std::move(sum);
  return out;
}

template <typename T>
Tensor<T> learner_prediction(NestedUNet<T>& model, const EtaWeights& eta,
                             int depth, const Tensor<T>& images) {
  auto logits = model.forward(depth, images, Mode::kEval);
  std::map<GridIndex, Tensor<T>> probs;
  for (auto& [idx, l] : logits) probs[idx] = softmax_channels(l);
  return combined_prediction(probs, eta, images.h(), images.w());
}

std::vector<double> ensemble_weights(const EnsembleManifest& manifest,
                                     EnsembleMode mode) {
  std::vector<double> w;
  for (const auto& e : manifest.entries) {
    w.push_back(mode == EnsembleMode::kAlpha
                    ? e.alpha
                    : 1.0 / static_cast<double>(manifest.entries.size()));
  }
  return w;
}

template <typename T>
EnsembleOutput<T> ensemble_predict(const EnsembleManifest& manifest,
                                   NestedUNet<T>& model, const Tensor<T>& images,
                                   EnsembleMode mode) {
  if (manifest.entries.empty()) throw StateError("ensemble has no entries");
  const auto weights = ensemble_weights(manifest, mode);
  std::vector<Tensor<T>> maps;
  std::vector<double> used;
  for (std::size_t k = 0; k < manifest.entries.size(); ++k) {
    if (weights[k] == 0.0) continue;
    const auto& e = manifest.entries[k];
    maps.push_back(learner_prediction(model, e.eta, e.depth, images));
    used.push_back(weights[k]);
  }
  return ensemble_combine<T>(maps, used);
}

// ------------------------------------------------------------ stage loop

Tensor<float> stack_images(const std::vector<Sample>& data,
                           std::span<const std::size_t> indices) {
  const auto& first = data.at(indices.front()).image;
  Tensor<float> out(static_cast<int>(indices.size()), first.c(), first.h(),
                    first.w());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& img = data.at(indices[k]).image;
    if (img.c() != first.c() || img.h() != first.h() || img.w() != first.w()) {
      throw DimensionError("batch samples differ in shape: " + img.shape().str() +
                           " vs " + first.shape().str());
    }
    std::copy_n(img.data(), img.size(), out.sample(static_cast<int>(k)));
  }
  return out;
}

std::vector<double> score_learner(NestedUNet<float>& model, const EtaWeights& eta,
                                  int d, const std::vector<Sample>& data,
                                  int batch_size) {
  std::vector<double> scores(data.size());
  const int classes = model.config().classes;
  for (std::size_t b0 = 0; b0 < data.size(); b0 += batch_size) {
    const std::size_t nb = std::min<std::size_t>(batch_size, data.size() - b0);
    std::vector<std::size_t> idx(nb);
    std::iota(idx.begin(), idx.end(), b0);
    const Tensor<float> x = stack_images(data, idx);
    const auto labels = argmax_labels(learner_prediction(model, eta, d, x));
    const std::size_t hw = x.plane_size();
    for (std::size_t k = 0; k < nb; ++k) {
      scores[b0 + k] = miou_from_labels(
          std::span(labels).subspan(k * hw, hw), data[b0 + k].labels, classes);
    }
  }
  return scores;
}

StageResult train_stage(NestedUNet<float>& model, BoostState& boost,
                        const std::vector<Sample>& data, int d,
                        const StageOptions& options, const StageHooks& hooks) {
  if (boost.stage != d - 1 || model.built_depth() != d - 1) {
    throw StateError("stage " + std::to_string(d) +
                     " invoked out of order (boost stage " +
                     std::to_string(boost.stage) + ", model depth " +
                     std::to_string(model.built_depth()) + ")");
  }
  if (data.empty()) throw ValueError("train_stage: empty training set");
  if (boost.sample_weights.size() != data.size()) {
    throw StateError("boost state tracks " +
                     std::to_string(boost.sample_weights.size()) +
                     " samples but the training set has " +
                     std::to_string(data.size()));
  }
  const int classes = model.config().classes;
  const std::size_t m = data.size();
  const int h = data.front().height();
  const int w = data.front().width();

  std::mt19937_64 init_rng(mix_seed(options.seed, 0x1417, static_cast<std::uint64_t>(d)));
  model.add_stage(d, init_rng);

  StageResult result;
  result.depth = d;
  EtaWeights eta = EtaWeights::uniform(model.supervised_blocks(d), options.eta_mode);
  const bool train_eta = eta.size() > 1;
  Param<double> eta_param;
  eta_param.resize(eta.size());

  Adam<float> net_opt(model.stage_params(d), options.adam);
  AdamConfig eta_adam = options.adam;
  eta_adam.weight_decay = 0.0;
  Adam<double> eta_opt({&eta_param}, eta_adam);

  const int batch = std::max(1, std::min<int>(options.batch_size, static_cast<int>(m)));
  const long steps_per_epoch = static_cast<long>((m + batch - 1) / batch);
  OneCycleSchedule schedule(options.lr, steps_per_epoch * std::max(1, options.epochs));
  const std::span<const float> cw(options.class_weights);
  long step = 0;

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const std::uint64_t epoch_seed =
        mix_seed(options.seed, static_cast<std::uint64_t>(d),
                 static_cast<std::uint64_t>(epoch + 1));
    std::mt19937_64 erng(epoch_seed);
    std::vector<std::size_t> order(m);
    if (options.resample) {
      std::discrete_distribution<std::size_t> pick(boost.sample_weights.begin(),
                                                   boost.sample_weights.end());
      for (auto& o : order) o = pick(erng);
    } else {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), erng);
    }
    double loss_sum = 0;
    long batches = 0;
    for (std::size_t b0 = 0; b0 < m; b0 += batch) {
      const std::size_t nb = std::min<std::size_t>(batch, m - b0);
      Tensor<float> x(static_cast<int>(nb), data.front().image.c(), h, w);
      std::vector<std::uint8_t> labels(nb * h * w);
      std::vector<double> scale(nb);
      for (std::size_t k = 0; k < nb; ++k) {
        const std::size_t idx = order[b0 + k];
        const auto& s = data[idx];
        if (s.height() != h || s.width() != w) {
          throw DimensionError("training samples must share one tile size");
        }
        if (options.augment) {
          auto a = augment(s.image, s.labels, mix_seed(epoch_seed, idx),
                           options.augment_options);
          std::copy_n(a.image.data(), a.image.size(), x.sample(static_cast<int>(k)));
          std::copy(a.labels.begin(), a.labels.end(), labels.begin() + k * h * w);
        } else {
          std::copy_n(s.image.data(), s.image.size(), x.sample(static_cast<int>(k)));
          std::copy(s.labels.begin(), s.labels.end(), labels.begin() + k * h * w);
        }
        const double sw = options.resample
                              ? 1.0
                              : static_cast<double>(m) * boost.sample_weights[idx];
        scale[k] = sw / static_cast<double>(nb);
      }
      const Tensor<float> target = one_hot<float>(labels, static_cast<int>(nb), classes, h, w);
      auto logits = model.forward(d, x, Mode::kTrain);

      std::vector<Tensor<float>> probs;
      std::vector<SoftMask<float>> targets;
      std::vector<std::vector<double>> per_sample(nb, std::vector<double>(eta.size()));
      for (std::size_t b = 0; b < eta.size(); ++b) {
        const GridIndex idx = eta.blocks[b];
        probs.push_back(softmax_channels(logits.at(idx)));
        auto t = downsample_mask(target, 1 << idx.i, false);
        if (!options.soft_targets) t = harden(t);
        const auto losses = block_losses(probs.back(), t.values, cw);
        for (std::size_t k = 0; k < nb; ++k) per_sample[k][b] = losses[k];
        targets.push_back(std::move(t));
      }
      std::vector<double> weights = eta.loss_weights();
      double batch_loss = 0;
      for (std::size_t k = 0; k < nb; ++k) {
        const auto g = combined_loss_grad(per_sample[k], eta);
        for (std::size_t b = 0; b < eta.size(); ++b) {
          eta_param.grad[b] += scale[k] * g.raw_logits[b];
        }
        batch_loss += scale[k] * combined_loss(per_sample[k], eta);
      }
      NestedUNet<float>::LogitMap dlogits;
      for (std::size_t b = 0; b < eta.size(); ++b) {
        std::vector<float> sample_scales(nb);
        for (std::size_t k = 0; k < nb; ++k) {
          sample_scales[k] = static_cast<float>(scale[k] * weights[b]);
        }
        dlogits[eta.blocks[b]] =
            block_loss_logit_grad(probs[b], targets[b].values,
                                  std::span<const float>(sample_scales), cw);
      }
      model.backward(d, dlogits);

      const double lr = options.one_cycle ? schedule.lr(step) : options.lr;
      ++step;
      net_opt.step(lr);
      net_opt.zero_grad();
      if (train_eta) {
        eta_opt.step(lr * options.eta_lr_scale);
        eta.raw_logits.assign(eta_param.value.begin(), eta_param.value.end());
      }
      eta_opt.zero_grad();
      loss_sum += batch_loss;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = batches ? loss_sum / batches : 0.0;
    rec.eta = eta.eta();
    rec.eta_tilde = constrain_eta(eta);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    result.epochs.push_back(std::move(rec));
  }

  if (hooks.before_scoring) hooks.before_scoring(model, eta, d);
  result.scores = score_learner(model, eta, d, data);
  result.error = weighted_error(result.scores, boost.sample_weights);
  result.alpha = alpha_from_error(result.error, classes);
  result.discarded = is_discarded(result.error, classes);
  if (!result.discarded && options.reweighting) {
    boost.sample_weights = update_sample_weights(boost.sample_weights, result.scores);
  }
  for (int j = 0; j <= d; ++j) model.freeze({j, 0});
  for (int j = 1; j <= d; ++j) model.freeze({d - j, j});
  result.eta = eta;

  boost.stage = d;
  boost.alphas.push_back(result.alpha);
  boost.errors.push_back(result.error);
  boost.scores.push_back(result.scores);
  return result;
}

template double miou_score<float>(const Tensor<float>&, const Tensor<float>&);
template double miou_score<double>(const Tensor<double>&, const Tensor<double>&);
template EnsembleOutput<float> ensemble_combine<float>(std::span<const Tensor<float>>,
                                                       std::span<const double>);
template EnsembleOutput<double> ensemble_combine<double>(
    std::span<const Tensor<double>>, std::span<const double>);
template Tensor<float> learner_prediction<float>(NestedUNet<float>&, const EtaWeights&,
                                                 int, const Tensor<float>&);
template Tensor<double> learner_prediction<double>(NestedUNet<double>&,
                                                   const EtaWeights&, int,
                                                   const Tensor<double>&);
template EnsembleOutput<float> ensemble_predict<float>(const EnsembleManifest&,
                                                       NestedUNet<float>&,
                                                       const Tensor<float>&,
                                                       EnsembleMode);
template EnsembleOutput<double> ensemble_predict<double>(const EnsembleManifest&,
                                                         NestedUNet<double>&,
                                                         const Tensor<double>&,
                                                         EnsembleMode);

}  // namespace adsunet
