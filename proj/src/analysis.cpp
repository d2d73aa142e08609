#include "adsunet/analysis.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "adsunet/errors.hpp"

namespace adsunet {

namespace {

Eigen::MatrixXd center_columns(const Eigen::MatrixXd& m) {
  return m.rowwise() - m.colwise().mean();
}

Eigen::MatrixXd to_rows(const Tensor<float>& t) {
  const int n = t.n();
  const std::size_t per = t.sample_size();
  Eigen::MatrixXd out(n, static_cast<Eigen::Index>(per));
  for (int k = 0; k < n; ++k) {
    const float* p = t.sample(k);
    for (std::size_t f = 0; f < per; ++f) out(k, static_cast<Eigen::Index>(f)) = p[f];
  }
  return out;
}

}  // namespace

double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.rows() != y.rows()) {
    throw DimensionError("linear_cka: " + std::to_string(x.rows()) + " vs " +
                         std::to_string(y.rows()) + " examples");
  }
  if (x.rows() < 2) throw DimensionError("linear_cka: need at least 2 examples");
  if (!x.allFinite() || !y.allFinite()) {
    throw ValueError("linear_cka: non-finite activations");
  }
  const Eigen::MatrixXd xc = center_columns(x);
  const Eigen::MatrixXd yc = center_columns(y);
  if (xc.squaredNorm() == 0.0 || yc.squaredNorm() == 0.0) {
    throw ValueError("linear_cka: undefined similarity for zero-variance activations");
  }
  double num = 0;
  double den_x = 0;
  double den_y = 0;
  if (xc.cols() + yc.cols() > 2 * xc.rows()) {
    const Eigen::MatrixXd kx = xc * xc.transpose();
    const Eigen::MatrixXd ky = yc * yc.transpose();
    num = (kx.array() * ky.array()).sum();
    den_x = kx.norm();
    den_y = ky.norm();
  } else {
    num = (yc.transpose() * xc).squaredNorm();
    den_x = (xc.transpose() * xc).norm();
    den_y = (yc.transpose() * yc).norm();
  }
  return std::clamp(num / (den_x * den_y), 0.0, 1.0);
}

double linear_cka(const ActivationSample& x, const ActivationSample& y) {
  try {
    return linear_cka(x.matrix, y.matrix);
  } catch (const DimensionError& e) {
    throw DimensionError(x.layer_id + " vs " + y.layer_id + ": " + e.what());
  } catch (const ValueError& e) {
    throw ValueError(x.layer_id + " vs " + y.layer_id + ": " + e.what());
  }
}

CkaMatrix cka_matrix(const std::vector<ActivationSample>& samples) {
  if (samples.size() < 2) throw DimensionError("cka_matrix: need at least 2 layers");
  CkaMatrix m;
  const auto n = static_cast<Eigen::Index>(samples.size());
  m.values = Eigen::MatrixXd::Zero(n, n);
  for (const auto& s : samples) m.labels.push_back(s.layer_id);
  // Centered Gram matrices once per layer; <Kx, Ky> equals ||Yc' Xc||_F^2.
  std::vector<Eigen::MatrixXd> grams;
  std::vector<double> norms;
  for (const auto& s : samples) {
    if (s.matrix.rows() != samples.front().matrix.rows()) {
      throw DimensionError("cka_matrix: " + s.layer_id + " has " +
                           std::to_string(s.matrix.rows()) + " examples, " +
                           samples.front().layer_id + " has " +
                           std::to_string(samples.front().matrix.rows()));
    }
    if (s.matrix.rows() < 2) throw DimensionError("cka_matrix: need at least 2 examples");
    if (!s.matrix.allFinite()) throw ValueError(s.layer_id + ": non-finite activations");
    const Eigen::MatrixXd c = center_columns(s.matrix);
    if (c.squaredNorm() == 0.0) {
      throw ValueError(s.layer_id +
                       ": undefined similarity for zero-variance activations");
    }
    grams.push_back(c * c.transpose());
    norms.push_back(grams.back().norm());
  }
  for (Eigen::Index a = 0; a < n; ++a) {
    for (Eigen::Index b = a; b < n; ++b) {
      const double num = (grams[a].array() * grams[b].array()).sum();
      m.values(a, b) = m.values(b, a) = std::clamp(num / (norms[a] * norms[b]), 0.0, 1.0);
    }
  }
  return m;
}

CkaMatrix cka_diff(const CkaMatrix& a, const CkaMatrix& b) {
  if (a.labels.size() != b.labels.size()) {
    throw DimensionError("cka_diff: matrices of different size");
  }
  if (a.labels != b.labels) {
    throw ValueError("cka_diff: the two matrices cover different layers");
  }
  CkaMatrix out;
  out.labels = a.labels;
  out.values = a.values - b.values;
  return out;
}

void CkaMatrix::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "layer";
  for (const auto& l : labels) os << "," << l;
  os << "\n" << std::setprecision(17);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    os << labels[r];
    for (std::size_t c = 0; c < labels.size(); ++c) {
      os << "," << values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    }
    os << "\n";
  }
}

void render_heatmap(const CkaMatrix& m, const std::filesystem::path& path,
                    double lo, double hi) {
  const int n = static_cast<int>(m.labels.size());
  const int cell = 48;
  const int margin = 80;
  cv::Mat grey(n, n, CV_8UC1);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double t = std::clamp((m.values(r, c) - lo) / (hi - lo), 0.0, 1.0);
      grey.at<std::uint8_t>(r, c) = static_cast<std::uint8_t>(std::lround(255 * t));
    }
  }
  cv::Mat big;
  cv::resize(grey, big, cv::Size(n * cell, n * cell), 0, 0, cv::INTER_NEAREST);
  cv::Mat colour;
  cv::applyColorMap(big, colour, cv::COLORMAP_VIRIDIS);
  cv::Mat canvas(n * cell + margin, n * cell + margin, CV_8UC3, cv::Scalar(255, 255, 255));
  colour.copyTo(canvas(cv::Rect(margin, 0, n * cell, n * cell)));
  for (int k = 0; k < n; ++k) {
    cv::putText(canvas, m.labels[k], cv::Point(2, k * cell + cell / 2 + 4),
                cv::FONT_HERSHEY_SIMPLEX, 0.35, cv::Scalar(0, 0, 0));
    cv::putText(canvas, m.labels[k], cv::Point(margin + k * cell + 2, n * cell + 20),
                cv::FONT_HERSHEY_SIMPLEX, 0.3, cv::Scalar(0, 0, 0));
    for (int c = 0; c < n; ++c) {
      std::ostringstream v;
      v << std::fixed << std::setprecision(2) << m.values(k, c);
      cv::putText(canvas, v.str(), cv::Point(margin + c * cell + 6, k * cell + cell / 2 + 4),
                  cv::FONT_HERSHEY_SIMPLEX, 0.35, cv::Scalar(255, 255, 255));
    }
  }
  if (!cv::imwrite(path.string(), canvas)) throw IoError("cannot write " + path.string());
}

std::vector<ActivationSample> block_activations(NestedUNet<float>& model, int d,
                                                const Tensor<float>& images) {
  model.forward(d, images, Mode::kEval);
  const auto& features = model.last_features();
  std::vector<ActivationSample> out;
  for (const auto& idx : model.required_blocks(d)) {
    out.push_back({idx.str(), to_rows(features.at(idx))});
  }
  return out;
}

std::vector<ActivationSample> learner_activations(const EnsembleManifest& manifest,
                                                  NestedUNet<float>& model,
                                                  const Tensor<float>& images) {
  std::vector<ActivationSample> out;
  for (const auto& e : manifest.entries) {
    out.push_back({"UNet" + std::to_string(e.depth),
                   to_rows(learner_prediction(model, e.eta, e.depth, images))});
  }
  return out;
}

double LabelErrorReport::ratio(std::size_t k) const {
  return total_windows[k] == 0 ? 0.0
                               : static_cast<double>(mixed_windows[k]) /
                                     static_cast<double>(total_windows[k]);
}

void LabelErrorReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "factor,mixed_windows,total_windows,ratio\n" << std::setprecision(17);
  for (std::size_t k = 0; k < factors.size(); ++k) {
    os << factors[k] << "," << mixed_windows[k] << "," << total_windows[k] << ","
       << ratio(k) << "\n";
  }
}

std::string LabelErrorReport::table() const {
  std::ostringstream os;
  os << "scale   ";
  for (int f : factors) os << std::setw(10) << ("1/" + std::to_string(f));
  os << "\nratio(%)";
  for (std::size_t k = 0; k < factors.size(); ++k) {
    os << std::setw(10) << std::fixed << std::setprecision(2) << 100.0 * ratio(k);
  }
  os << "\n";
  return os.str();
}

LabelErrorReport incorrect_label_ratio(
    const std::vector<std::vector<std::uint8_t>>& masks, int h, int w,
    const std::vector<int>& factors, WindowIndexing indexing) {
  LabelErrorReport rep;
  rep.factors = factors;
  rep.mixed_windows.assign(factors.size(), 0);
  rep.total_windows.assign(factors.size(), 0);
  for (std::size_t k = 0; k < factors.size(); ++k) {
    const int f = factors[k];
    if (f <= 0 || h % f != 0 || w % f != 0) {
      throw InputSizeError("incorrect_label_ratio: " + std::to_string(h) + "x" +
                           std::to_string(w) + " not divisible by " + std::to_string(f));
    }
  }
  for (const auto& mask : masks) {
    if (mask.size() != static_cast<std::size_t>(h) * w) {
      throw DimensionError("incorrect_label_ratio: mask of " +
                           std::to_string(mask.size()) + " pixels, expected " +
                           std::to_string(h * w));
    }
    for (std::size_t k = 0; k < factors.size(); ++k) {
      const int f = factors[k];
      const int rows = h / f;
      const int cols = w / f;
      const int step = indexing == WindowIndexing::kPooling ? f : 1;
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
          const int r0 = r * step;
          const int c0 = c * step;
          const std::uint8_t first = mask[static_cast<std::size_t>(r0) * w + c0];
          bool mixed = false;
          for (int y = r0; y < r0 + f && !mixed; ++y) {
            for (int x = c0; x < c0 + f; ++x) {
              if (mask[static_cast<std::size_t>(y) * w + x] != first) {
                mixed = true;
                break;
              }
            }
          }
          if (mixed) ++rep.mixed_windows[k];
        }
      }
      rep.total_windows[k] += static_cast<long long>(rows) * cols;
    }
  }
  return rep;
}

void render_eta_plot(const std::vector<EtaSeries>& series,
                     const std::filesystem::path& path, const std::string& title,
                     bool band, double lower, double upper) {
  const int width = 640;
  const int height = 400;
  const int left = 60;
  const int right = 150;
  const int top = 40;
  const int bottom = 50;
  cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  std::size_t epochs = 0;
  for (const auto& s : series) epochs = std::max(epochs, s.values.size());
  const int pw = width - left - right;
  const int ph = height - top - bottom;
  auto px = [&](double e) {
    const double span = epochs > 1 ? static_cast<double>(epochs - 1) : 1.0;
    return left + static_cast<int>(std::lround(pw * e / span));
  };
  auto py = [&](double v) {
    return top + static_cast<int>(std::lround(ph * (1.0 - std::clamp(v, 0.0, 1.0))));
  };
  if (band) {
    cv::rectangle(img, cv::Point(left, py(upper)), cv::Point(left + pw, py(lower)),
                  cv::Scalar(225, 225, 225), cv::FILLED);
  }
  cv::rectangle(img, cv::Point(left, top), cv::Point(left + pw, top + ph),
                cv::Scalar(0, 0, 0));
  for (int t = 0; t <= 4; ++t) {
    const double v = t / 4.0;
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << v;
    cv::putText(img, s.str(), cv::Point(10, py(v) + 4), cv::FONT_HERSHEY_SIMPLEX, 0.4,
                cv::Scalar(0, 0, 0));
  }
  cv::putText(img, title, cv::Point(left, 25), cv::FONT_HERSHEY_SIMPLEX, 0.55,
              cv::Scalar(0, 0, 0));
  cv::putText(img, "epoch", cv::Point(left + pw / 2 - 20, height - 15),
              cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 0, 0));
  static const cv::Scalar palette[] = {
      {180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214},
      {189, 103, 148}, {75, 86, 140}, {194, 119, 227}, {127, 127, 127}};
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto colour = palette[k % 8];
    const auto& v = series[k].values;
    for (std::size_t e = 1; e < v.size(); ++e) {
      cv::line(img, cv::Point(px(e - 1.0), py(v[e - 1])), cv::Point(px(e), py(v[e])),
               colour, 2, cv::LINE_AA);
    }
    if (v.size() == 1) cv::circle(img, cv::Point(px(0), py(v[0])), 3, colour, cv::FILLED);
    const int ly = top + 15 + 20 * static_cast<int>(k);
    cv::line(img, cv::Point(left + pw + 10, ly), cv::Point(left + pw + 30, ly), colour, 2);
    cv::putText(img, series[k].label, cv::Point(left + pw + 35, ly + 4),
                cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0));
  }
  if (!cv::imwrite(path.string(), img)) throw IoError("cannot write " + path.string());
}

}  // namespace adsunet
