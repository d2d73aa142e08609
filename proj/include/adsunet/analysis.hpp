#pragma once

// Post-hoc diagnostics: linear CKA between layer activations, incorrect-label
// ratios of down-scaled masks, and plots of the logged eta trajectories.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "adsunet/boosting.hpp"
#include "adsunet/model_core.hpp"

namespace adsunet {

struct ActivationSample {
  std::string layer_id;
  Eigen::MatrixXd matrix;  // examples x flattened features
};

// ||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F), columns centered. Uses the
// n x n Gram form when there are more features than examples.
double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);
double linear_cka(const ActivationSample& x, const ActivationSample& y);

struct CkaMatrix {
  std::vector<std::string> labels;
  Eigen::MatrixXd values;

  void write_csv(const std::filesystem::path& path) const;
};

CkaMatrix cka_matrix(const std::vector<ActivationSample>& samples);
// a - b, for the diff(.,.) heatmaps. Labels must match.
CkaMatrix cka_diff(const CkaMatrix& a, const CkaMatrix& b);

// Colour-mapped PNG, one square cell per entry, values mapped from
// [lo, hi].
void render_heatmap(const CkaMatrix& m, const std::filesystem::path& path,
                    double lo = 0.0, double hi = 1.0);

// Block outputs of UNet^d on a probe batch: every block in required_blocks(d),
// one row per image.
std::vector<ActivationSample> block_activations(NestedUNet<float>& model, int d,
                                                const Tensor<float>& images);

// Final probability map of each learner in the manifest, one row per image.
std::vector<ActivationSample> learner_activations(const EnsembleManifest& manifest,
                                                  NestedUNet<float>& model,
                                                  const Tensor<float>& images);

// How windows are laid out when counting mixed-label windows.
//  kPooling: the average-pooling grid, window (r, c) covers rows
//            [r f, (r+1) f) and cols [c f, (c+1) f).
//  kLiteral: the published listing's slicing mask[r:r+f, c:c+f], i.e.
//            stride-1 windows anchored at the first H/f x W/f positions.
enum class WindowIndexing { kPooling, kLiteral };

struct LabelErrorReport {
  std::vector<int> factors;
  std::vector<long long> mixed_windows;
  std::vector<long long> total_windows;

  double ratio(std::size_t k) const;
  void write_csv(const std::filesystem::path& path) const;
  std::string table() const;
};

LabelErrorReport incorrect_label_ratio(
    const std::vector<std::vector<std::uint8_t>>& masks, int h, int w,
    const std::vector<int>& factors = {2, 4, 8, 16},
    WindowIndexing indexing = WindowIndexing::kPooling);

struct EtaSeries {
  std::string label;          // e.g. "X(1,2)"
  std::vector<double> values;  // one per epoch
};

// Line plot of eta (or eta-tilde) against epoch for one stage. When
// `band` is set the admissible [lower, upper] range is shaded.
void render_eta_plot(const std::vector<EtaSeries>& series,
                     const std::filesystem::path& path, const std::string& title,
                     bool band = false, double lower = 0.0, double upper = 1.0);

}  // namespace adsunet
