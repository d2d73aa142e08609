#include "adsunet/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "adsunet/kv_file.hpp"

namespace fs = std::filesystem;

namespace adsunet {

namespace {

constexpr const char* kManifestName = "manifest.txt";

int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

cv::Mat read_rgb(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

cv::Mat read_mask(const fs::path& path) {
  cv::Mat mask = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mask.empty()) throw IoError("cannot read mask " + path.string());
  if (mask.type() != CV_8UC1) {
    throw IoError("mask " + path.string() +
                  " must be a single-channel 8-bit image");
  }
  return mask;
}

std::vector<std::string> sorted_pngs(const fs::path& dir) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") {
      out.push_back(e.path().filename().string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_png(const fs::path& path, const cv::Mat& m) {
  if (!cv::imwrite(path.string(), m)) {
    throw IoError("cannot write " + path.string());
  }
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

// ------------------------------------------------------------- manifest

DatasetManifest DatasetManifest::scan(const fs::path& root, int classes,
                                      int tile, int stride) {
  if (classes < 2) throw ConfigError("dataset needs at least 2 classes");
  DatasetManifest m;
  m.root = root;
  m.classes = classes;
  m.tile = tile;
  m.stride = stride > 0 ? stride : tile;
  for (const std::string split : {"train", "test"}) {
    const auto images = sorted_pngs(root / split / "images");
    const auto masks = sorted_pngs(root / split / "masks");
    const std::set<std::string> mask_set(masks.begin(), masks.end());
    auto& pairs = m.splits[split];
    for (const auto& name : images) {
      if (!mask_set.contains(name)) {
        throw IoError("image " + (root / split / "images" / name).string() +
                      " has no mask in " + (root / split / "masks").string());
      }
      pairs.push_back({split + "/images/" + name, split + "/masks/" + name});
    }
    const std::set<std::string> image_set(images.begin(), images.end());
    for (const auto& name : masks) {
      if (!image_set.contains(name)) {
        throw IoError("mask " + (root / split / "masks" / name).string() +
                      " has no image");
      }
    }
  }
  if (!m.split("train").empty()) m.stats = compute_channel_stats(m, "train");
  return m;
}

const std::vector<ImagePair>& DatasetManifest::split(const std::string& name) const {
  static const std::vector<ImagePair> kEmpty;
  auto it = splits.find(name);
  return it == splits.end() ? kEmpty : it->second;
}

void DatasetManifest::write() const {
  KeyValueFile kv;
  kv.set("format", std::string("adsunet-dataset/1"));
  kv.set("classes", classes);
  kv.set("tile", tile);
  kv.set("stride", stride);
  kv.set("mean", std::vector<double>(stats.mean.begin(), stats.mean.end()));
  kv.set("std", std::vector<double>(stats.stddev.begin(), stats.stddev.end()));
  for (const auto& [name, pairs] : splits) {
    kv.set(name + ".count", static_cast<long long>(pairs.size()));
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      kv.set(name + "." + std::to_string(k), pairs[k].image + ";" + pairs[k].mask);
    }
  }
  kv.write(root / kManifestName);
}

DatasetManifest DatasetManifest::read(const fs::path& root) {
  const auto kv = KeyValueFile::read(root / kManifestName);
  DatasetManifest m;
  m.root = root;
  m.classes = static_cast<int>(kv.get_int("classes"));
  m.tile = static_cast<int>(kv.get_int("tile"));
  m.stride = static_cast<int>(kv.get_int("stride"));
  const auto mean = kv.get_doubles("mean");
  const auto sd = kv.get_doubles("std");
  if (mean.size() != 3 || sd.size() != 3) {
    throw IoError("manifest mean/std must have 3 entries");
  }
  std::copy(mean.begin(), mean.end(), m.stats.mean.begin());
  std::copy(sd.begin(), sd.end(), m.stats.stddev.begin());
  for (const std::string split : {"train", "test"}) {
    auto& pairs = m.splits[split];
    if (!kv.has(split + ".count")) continue;
    const auto count = kv.get_int(split + ".count");
    for (long long k = 0; k < count; ++k) {
      const auto parts = adsunet::split(kv.get(split + "." + std::to_string(k)), ';');
      if (parts.size() != 2) throw IoError("malformed manifest pair entry");
      pairs.push_back({parts[0], parts[1]});
    }
  }
  return m;
}

ChannelStats compute_channel_stats(const DatasetManifest& manifest,
                                   const std::string& split) {
  std::array<double, 3> sum{};
  std::array<double, 3> sq{};
  double count = 0;
  for (const auto& pair : manifest.split(split)) {
    const cv::Mat rgb = read_rgb(manifest.root / pair.image);
    for (int y = 0; y < rgb.rows; ++y) {
      const auto* row = rgb.ptr<cv::Vec3b>(y);
      for (int x = 0; x < rgb.cols; ++x) {
        for (int c = 0; c < 3; ++c) {
          const double v = row[x][c] / 255.0;
          sum[c] += v;
          sq[c] += v * v;
        }
      }
    }
    count += static_cast<double>(rgb.rows) * rgb.cols;
  }
  ChannelStats stats;
  if (count == 0) return stats;
  for (int c = 0; c < 3; ++c) {
    stats.mean[c] = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - stats.mean[c] * stats.mean[c]);
    stats.stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return stats;
}

std::vector<Sample> load_dataset(const DatasetManifest& manifest,
                                 const std::string& split) {
  std::vector<Sample> out;
  for (const auto& pair : manifest.split(split)) {
    const auto image_path = manifest.root / pair.image;
    const auto mask_path = manifest.root / pair.mask;
    const cv::Mat rgb = read_rgb(image_path);
    const cv::Mat mask = read_mask(mask_path);
    if (rgb.size() != mask.size()) {
      throw IoError("size mismatch between " + image_path.string() + " and " +
                    mask_path.string());
    }
    for (int y = 0; y < mask.rows; ++y) {
      const auto* row = mask.ptr<std::uint8_t>(y);
      for (int x = 0; x < mask.cols; ++x) {
        if (row[x] >= manifest.classes) {
          throw IoError("mask " + mask_path.string() + " has label " +
                        std::to_string(row[x]) + " but the dataset declares " +
                        std::to_string(manifest.classes) + " classes");
        }
      }
    }
    const int tile_h = manifest.tile > 0 ? manifest.tile : rgb.rows;
    const int tile_w = manifest.tile > 0 ? manifest.tile : rgb.cols;
    const int stride = manifest.stride > 0 ? manifest.stride : tile_h;
    if (tile_h > rgb.rows || tile_w > rgb.cols) {
      throw IoError("image " + image_path.string() + " is smaller than the tile size");
    }
    const std::string base = fs::path(pair.image).stem().string();
    for (int ty = 0; ty + tile_h <= rgb.rows; ty += stride) {
      for (int tx = 0; tx + tile_w <= rgb.cols; tx += stride) {
        Sample s;
        s.name = base;
        if (manifest.tile > 0) {
          s.name += "_" + std::to_string(ty) + "_" + std::to_string(tx);
        }
        s.image = Tensor<float>(1, 3, tile_h, tile_w);
        s.labels.resize(static_cast<std::size_t>(tile_h) * tile_w);
        for (int y = 0; y < tile_h; ++y) {
          const auto* row = rgb.ptr<cv::Vec3b>(ty + y);
          const auto* mrow = mask.ptr<std::uint8_t>(ty + y);
          for (int x = 0; x < tile_w; ++x) {
            for (int c = 0; c < 3; ++c) {
              s.image.at(0, c, y, x) = static_cast<float>(
                  (row[tx + x][c] / 255.0 - manifest.stats.mean[c]) /
                  manifest.stats.stddev[c]);
            }
            s.labels[static_cast<std::size_t>(y) * tile_w + x] = mrow[tx + x];
          }
        }
        out.push_back(std::move(s));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------- augmentation

Tensor<float> flip_horizontal(const Tensor<float>& image) {
  Tensor<float> out(image.shape());
  for (int n = 0; n < image.n(); ++n) {
    for (int c = 0; c < image.c(); ++c) {
      for (int y = 0; y < image.h(); ++y) {
        for (int x = 0; x < image.w(); ++x) {
          out.at(n, c, y, x) = image.at(n, c, y, image.w() - 1 - x);
        }
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> flip_horizontal(const std::vector<std::uint8_t>& labels,
                                          int h, int w) {
  std::vector<std::uint8_t> out(labels.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      out[static_cast<std::size_t>(y) * w + x] =
          labels[static_cast<std::size_t>(y) * w + (w - 1 - x)];
    }
  }
  return out;
}

Augmented augment(const Tensor<float>& image,
                  const std::vector<std::uint8_t>& labels, std::uint64_t seed,
                  const AugmentOptions& options) {
  const int h = image.h();
  const int w = image.w();
  if (labels.size() != static_cast<std::size_t>(h) * w || image.n() != 1) {
    throw DimensionError("augment: image " + image.shape().str() +
                         " does not pair with its mask");
  }
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  const bool flip_h = options.flips && coin(rng);
  const bool flip_v = options.flips && coin(rng);
  const int mh = static_cast<int>(std::lround(options.shift_margin * h));
  const int mw = static_cast<int>(std::lround(options.shift_margin * w));
  const int dy = mh > 0 ? std::uniform_int_distribution<int>(-mh, mh)(rng) : 0;
  const int dx = mw > 0 ? std::uniform_int_distribution<int>(-mw, mw)(rng) : 0;

  Augmented out{Tensor<float>(image.shape()), std::vector<std::uint8_t>(labels.size())};
  std::vector<int> src_y(h);
  std::vector<int> src_x(w);
  for (int y = 0; y < h; ++y) {
    const int sy = reflect(y + dy, h);
    src_y[y] = flip_v ? h - 1 - sy : sy;
  }
  for (int x = 0; x < w; ++x) {
    const int sx = reflect(x + dx, w);
    src_x[x] = flip_h ? w - 1 - sx : sx;
  }
  for (int c = 0; c < image.c(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        out.image.at(0, c, y, x) = image.at(0, c, src_y[y], src_x[x]);
      }
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      out.labels[static_cast<std::size_t>(y) * w + x] =
          labels[static_cast<std::size_t>(src_y[y]) * w + src_x[x]];
    }
  }
  return out;
}

// -------------------------------------------------------- class weights

std::vector<double> class_weights(
    const std::vector<std::vector<std::uint8_t>>& masks, int classes) {
  if (masks.empty()) throw ValueError("class_weights: empty dataset");
  std::vector<double> counts(classes, 0.0);
  double total = 0;
  for (const auto& m : masks) {
    for (auto v : m) {
      if (v >= classes) throw ValueError("class_weights: label out of range");
      counts[v] += 1;
    }
    total += static_cast<double>(m.size());
  }
  if (total == 0) throw ValueError("class_weights: no pixels");
  for (auto& c : counts) c = 1.0 - c / total;
  return counts;
}

std::vector<double> class_weights(const std::vector<Sample>& samples,
                                  int classes) {
  std::vector<std::vector<std::uint8_t>> masks;
  masks.reserve(samples.size());
  for (const auto& s : samples) masks.push_back(s.labels);
  return class_weights(masks, classes);
}

// ------------------------------------------------------------ synthetic

std::vector<ClassTexture> SyntheticSpec::resolved_textures() const {
  if (!textures.empty()) {
    if (static_cast<int>(textures.size()) != classes) {
      throw ConfigError("synthetic spec: one texture per class required");
    }
    return textures;
  }
  std::vector<ClassTexture> out(classes);
  constexpr double kLowest = 0.05;
  constexpr double kHighest = 0.35;
  for (int c = 0; c < classes; ++c) {
    const double t = classes > 1 ? static_cast<double>(c) / (classes - 1) : 0.0;
    out[c].frequency = kLowest * std::pow(kHighest / kLowest, t);
    out[c].orientation = std::numbers::pi * c / classes;
    out[c].noise = noise;
  }
  return out;
}

SyntheticTile render_synthetic_tile(const SyntheticSpec& spec, int index) {
  if (spec.classes < 2 || spec.classes > 8) {
    throw ConfigError("synthetic spec: classes must be in [2, 8]");
  }
  if (spec.cells < 1) throw ConfigError("synthetic spec: cells must be >= 1");
  const int factor = 1 << spec.max_depth;
  if (spec.tile <= 0 || spec.tile % factor != 0) {
    throw InputSizeError("synthetic tile size " + std::to_string(spec.tile) +
                         " is not divisible by 2^" + std::to_string(spec.max_depth));
  }
  const auto textures = spec.resolved_textures();
  std::mt19937_64 rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> pos(0.0, spec.tile);
  std::uniform_real_distribution<double> phase(0.0, 2 * std::numbers::pi);
  std::uniform_int_distribution<int> any_class(0, spec.classes - 1);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SyntheticTile tile;
  std::vector<double> phases;
  for (int s = 0; s < spec.cells; ++s) {
    tile.sites.push_back({pos(rng), pos(rng)});
    tile.site_classes.push_back(s < spec.classes ? (s + index) % spec.classes
                                                 : any_class(rng));
    phases.push_back(phase(rng));
  }
  const int n = spec.tile;
  tile.labels.resize(static_cast<std::size_t>(n) * n);
  tile.rgb.resize(static_cast<std::size_t>(n) * n * 3);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double px = x + 0.5;
      const double py = y + 0.5;
      int best = 0;
      double best_d = 1e300;
      for (int s = 0; s < spec.cells; ++s) {
        const double ddx = px - tile.sites[s][0];
        const double ddy = py - tile.sites[s][1];
        const double d2 = ddx * ddx + ddy * ddy;
        if (d2 < best_d) {
          best_d = d2;
          best = s;
        }
      }
      const int cls = tile.site_classes[best];
      const auto& tex = textures[cls];
      const double u = px * std::cos(tex.orientation) + py * std::sin(tex.orientation);
      const double base =
          0.5 + 0.3 * std::sin(2 * std::numbers::pi * tex.frequency * u + phases[best]);
      tile.labels[static_cast<std::size_t>(y) * n + x] = static_cast<std::uint8_t>(cls);
      for (int c = 0; c < 3; ++c) {
        const double v = base + tex.noise * gauss(rng);
        tile.rgb[(static_cast<std::size_t>(y) * n + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  return tile;
}

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const fs::path& root,
                                   int n_train, int n_test) {
  const int factor = 1 << spec.max_depth;
  if (spec.tile <= 0 || spec.tile % factor != 0) {
    throw InputSizeError("synthetic tile size " + std::to_string(spec.tile) +
                         " is not divisible by 2^" + std::to_string(spec.max_depth));
  }
  DatasetManifest m;
  m.root = root;
  m.classes = spec.classes;
  m.tile = spec.tile;
  m.stride = spec.tile;
  int index = 0;
  for (const auto& [split, count] : {std::pair<std::string, int>{"train", n_train},
                                     std::pair<std::string, int>{"test", n_test}}) {
    fs::create_directories(root / split / "images");
    fs::create_directories(root / split / "masks");
    auto& pairs = m.splits[split];
    for (int k = 0; k < count; ++k, ++index) {
      const auto tile = render_synthetic_tile(spec, index);
      char name[32];
      std::snprintf(name, sizeof(name), "tile_%05d.png", index);
      cv::Mat rgb(spec.tile, spec.tile, CV_8UC3,
                  const_cast<std::uint8_t*>(tile.rgb.data()));
      cv::Mat bgr;
      cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
      cv::Mat mask(spec.tile, spec.tile, CV_8UC1,
                   const_cast<std::uint8_t*>(tile.labels.data()));
      write_png(root / split / "images" / name, bgr);
      write_png(root / split / "masks" / name, mask);
      pairs.push_back({split + "/images/" + name, split + "/masks/" + name});
    }
  }
  m.stats = compute_channel_stats(m, "train");
  m.write();
  return m;
}

}  // namespace adsunet
