#pragma once

// Image/mask datasets on disk, augmentation, class weights and the synthetic
// texture dataset generator.
//
// Layout:  root/{train,test}/{images,masks}/NAME.png  +  root/manifest.txt
// Masks are single-channel 8-bit PNGs holding class indices.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "adsunet/tensor.hpp"

namespace adsunet {

struct Sample {
  std::string name;
  Tensor<float> image;               // 1 x channels x H x W, normalized
  std::vector<std::uint8_t> labels;  // H x W class indices

  int height() const { return image.h(); }
  int width() const { return image.w(); }
};

struct ChannelStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
};

struct ImagePair {
  std::string image;  // relative to root
  std::string mask;
};

struct DatasetManifest {
  std::filesystem::path root;
  int classes = 0;
  int tile = 0;    // 0 keeps whole images
  int stride = 0;  // defaults to tile
  ChannelStats stats;
  std::map<std::string, std::vector<ImagePair>> splits;

  // Lists root/<split>/{images,masks} and pairs files by base name.
  static DatasetManifest scan(const std::filesystem::path& root, int classes,
                              int tile = 0, int stride = 0);
  static DatasetManifest read(const std::filesystem::path& root);
  void write() const;
  const std::vector<ImagePair>& split(const std::string& name) const;
};

// Reads, tiles and normalizes one split. Order follows the manifest.
std::vector<Sample> load_dataset(const DatasetManifest& manifest,
                                 const std::string& split);

// Per-channel mean and std of 8-bit images scaled to [0, 1].
ChannelStats compute_channel_stats(const DatasetManifest& manifest,
                                   const std::string& split);

struct AugmentOptions {
  bool flips = true;
  double shift_margin = 0.1;  // fraction of the tile size
};

struct Augmented {
  Tensor<float> image;
  std::vector<std::uint8_t> labels;
};

// Same random flip / shift-and-crop applied to image and mask. Shifted-in
// borders are filled by reflection.
Augmented augment(const Tensor<float>& image,
                  const std::vector<std::uint8_t>& labels, std::uint64_t seed,
                  const AugmentOptions& options = {});

Tensor<float> flip_horizontal(const Tensor<float>& image);
std::vector<std::uint8_t> flip_horizontal(const std::vector<std::uint8_t>& labels,
                                          int h, int w);

// W_c = 1 - N_c / N over all pixels.
std::vector<double> class_weights(const std::vector<Sample>& samples,
                                  int classes);
std::vector<double> class_weights(
    const std::vector<std::vector<std::uint8_t>>& masks, int classes);

struct ClassTexture {
  double frequency = 0.1;    // cycles per pixel
  double orientation = 0.0;  // radians
  double noise = 0.0;        // std of additive Gaussian noise (intensity units)
};

struct SyntheticSpec {
  std::uint64_t seed = 1;
  int classes = 4;
  int tile = 64;
  int max_depth = 4;
  int cells = 6;  // Voronoi sites per tile
  double noise = 0.2;
  // One entry per class; derived from `noise` when empty.
  std::vector<ClassTexture> textures;

  std::vector<ClassTexture> resolved_textures() const;
};

struct SyntheticTile {
  std::vector<std::uint8_t> rgb;     // H x W x 3
  std::vector<std::uint8_t> labels;  // H x W
  std::vector<std::array<double, 2>> sites;
  std::vector<int> site_classes;
};

// Renders tile `index` of the stream defined by `spec`.
SyntheticTile render_synthetic_tile(const SyntheticSpec& spec, int index);

// Writes n_train + n_test tiles and the manifest under `root`.
DatasetManifest generate_synthetic(const SyntheticSpec& spec,
                                   const std::filesystem::path& root,
                                   int n_train, int n_test);

// splitmix64-style mixing for deriving independent seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c);

}  // namespace adsunet
