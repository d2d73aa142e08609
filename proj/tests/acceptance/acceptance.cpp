// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.
//
// Usage: acceptance [criterion ids...]   (default: all)
// Scratch directory: $ADSUNET_ACCEPTANCE_DIR, or <tmp>/adsunet_acceptance.
// Finished training runs found there are reused.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "adsunet/analysis.hpp"
#include "adsunet/boosting.hpp"
#include "adsunet/deep_supervision.hpp"
#include "adsunet/labels.hpp"
#include "adsunet/run.hpp"

using namespace adsunet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path scratch_root() {
  if (const char* env = std::getenv("ADSUNET_ACCEPTANCE_DIR")) return env;
  return fs::temp_directory_path() / "adsunet_acceptance";
}

// Desk-scale run on the synthetic dataset: C = 4, 64x64 tiles, noise 0.2,
// 400 train / 100 test tiles, T = 4, 10 epochs per stage.
RunConfig desk_config(const fs::path& out, std::uint64_t seed) {
  RunConfig c;
  c.synthetic.seed = seed;
  c.synthetic.classes = 4;
  c.synthetic.tile = 64;
  c.synthetic.noise = 0.2;
  c.synthetic_train = 400;
  c.synthetic_test = 100;
  c.max_depth = 4;
  c.epochs = 10;
  c.base_filters = 8;
  c.seed = seed;
  c.output = out.string();
  return c;
}

// Small run for determinism checks.
RunConfig small_config(const fs::path& out) {
  RunConfig c;
  c.synthetic.classes = 3;
  c.synthetic.tile = 32;
  c.synthetic_train = 24;
  c.synthetic_test = 8;
  c.max_depth = 3;
  c.epochs = 2;
  c.base_filters = 4;
  c.seed = 7;
  c.output = out.string();
  return c;
}

// Trains (or reuses a finished) run directory.
// Trains the run unless a finished one is already there. Returns the wall time
// of the training, recorded beside the run so reused runs report it too; NaN
// when a reused run has no record.
double ensure_trained(const RunConfig& c) {
  const auto state = fs::path(c.output) / "boost_state.txt";
  const fs::path record = c.output + ".seconds";
  if (!fs::exists(state) || BoostState::load(state).stage != c.max_depth) {
    const auto t0 = std::chrono::steady_clock::now();
    cmd_train(c);
    std::ofstream(record) << seconds_since(t0) << "\n";
  }
  double seconds = std::numeric_limits<double>::quiet_NaN();
  if (std::ifstream in(record); in) in >> seconds;
  return seconds;
}

// ---------------------------------------------------------------- C1

Outcome criterion1(const fs::path& root) {
  const auto bounded = desk_config(root / "desk_seed1", 1);
  const double bounded_time = ensure_trained(bounded);

  auto unconstrained = desk_config(root / "unconstrained", 1);
  unconstrained.eta_mode = EtaMode::kUnconstrained;
  ensure_trained(unconstrained);

  // Every logged eta-tilde against bounds recomputed from the block count.
  double worst = 0.0;
  std::size_t checked = 0;
  std::map<int, double> last_epoch_max_tilde;
  std::map<int, int> last_epoch;
  for (const auto& row : csv_rows(fs::path(bounded.output) / "eta_log.csv")) {
    const int stage = std::stoi(row[0]);
    const int epoch = std::stoi(row[1]);
    const double tilde = std::stod(row[5]);
    const double n = stage + 1;
    const double lower = 1.0 / (2.0 * n);
    const double upper = 0.5 + 1.0 / (2.0 * n);
    worst = std::max({worst, lower - tilde, tilde - upper});
    ++checked;
    if (epoch > last_epoch[stage]) {
      last_epoch[stage] = epoch;
      last_epoch_max_tilde[stage] = tilde;
    } else if (epoch == last_epoch[stage]) {
      last_epoch_max_tilde[stage] = std::max(last_epoch_max_tilde[stage], tilde);
    }
  }
  bool final_ok = last_epoch_max_tilde.size() == 4;
  for (const auto& [d, m] : last_epoch_max_tilde) {
    final_ok = final_ok && m <= (d + 2.0) / (2.0 * (d + 1.0)) + 1e-12;
  }

  // Largest raw eta at the end of each unconstrained stage.
  std::map<int, double> final_eta;
  std::map<int, int> final_epoch;
  for (const auto& row : csv_rows(fs::path(unconstrained.output) / "eta_log.csv")) {
    const int stage = std::stoi(row[0]);
    const int epoch = std::stoi(row[1]);
    const double eta = std::stod(row[4]);
    if (epoch > final_epoch[stage]) {
      final_epoch[stage] = epoch;
      final_eta[stage] = eta;
    } else if (epoch == final_epoch[stage]) {
      final_eta[stage] = std::max(final_eta[stage], eta);
    }
  }
  double max_eta = 0.0;
  int max_stage = 0;
  for (const auto& [d, e] : final_eta) {
    if (d >= 1 && e > max_eta) {
      max_eta = e;
      max_stage = d;
    }
  }
  const bool pass = checked > 0 && worst <= 1e-9 && final_ok && max_eta > 0.95 &&
                    bounded_time <= 15 * 60;
  return {pass, std::to_string(checked) + " logged eta-tilde values, worst bound excess " +
                    fmt("%.3g", worst) + "; final max eta-tilde within (d+2)/(2(d+1)): " +
                    (final_ok ? "yes" : "no") + "; unconstrained max final eta " +
                    fmt("%.4f", max_eta) + " (stage " + std::to_string(max_stage) +
                    "); bounded run " + fmt("%.0f", bounded_time) + " s"};
}

// ---------------------------------------------------------------- C2

Outcome criterion2() {
  std::mt19937_64 g(202);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::exponential_distribution<double> ex(1.0);
  double worst = 0.0;
  double worst_sum = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 1 + g() % 64;
    const int classes = 2 + static_cast<int>(g() % 7);
    std::vector<double> w(m);
    std::vector<double> s(m);
    double total = 0;
    for (auto& v : w) total += (v = ex(g) + 1e-6);
    for (auto& v : w) v /= total;
    for (auto& v : s) v = u(g);
    if (trial % 10 == 0) s[0] = 1.0;
    if (trial % 13 == 0) s[m - 1] = 0.0;

    // Oracles in long double.
    long double eps = 0;
    for (std::size_t k = 0; k < m; ++k) eps += static_cast<long double>(w[k]) * (1.0L - s[k]);
    const double got_eps = weighted_error(s, w);
    worst = std::max(worst, std::abs(got_eps - static_cast<double>(eps)));

    long double clamped = std::clamp(eps, 1e-6L, 1.0L - 1e-6L);
    const long double alpha =
        eps >= 1.0L - 1.0L / classes
            ? 0.0L
            : 0.5L * std::log((1.0L - clamped) / clamped) + std::log(static_cast<long double>(classes - 1));
    worst = std::max(worst, std::abs(alpha_from_error(got_eps, classes) - static_cast<double>(alpha)));

    std::vector<long double> nw(m);
    long double z = 0;
    for (std::size_t k = 0; k < m; ++k) z += (nw[k] = w[k] * std::exp(1.0L - s[k]));
    const auto got = update_sample_weights(w, s);
    double sum = 0;
    for (std::size_t k = 0; k < m; ++k) {
      worst = std::max(worst, std::abs(got[k] - static_cast<double>(nw[k] / z)));
      sum += got[k];
    }
    worst_sum = std::max(worst_sum, std::abs(sum - 1.0));

    // Repeated updates keep a distribution.
    auto ww = got;
    for (int r = 0; r < 20; ++r) {
      for (auto& v : s) v = u(g);
      ww = update_sample_weights(ww, s);
      double t = 0;
      for (double v : ww) t += v;
      worst_sum = std::max(worst_sum, std::abs(t - 1.0));
    }
  }
  return {worst <= 1e-12 && worst_sum <= 1e-9,
          "1000 instances, max deviation from oracle " + fmt("%.3g", worst) +
              ", max |sum w - 1| " + fmt("%.3g", worst_sum)};
}

// ---------------------------------------------------------------- C3

Outcome criterion3() {
  std::mt19937_64 g(303);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int classes = 2 + trial % 3;
    std::uniform_int_distribution<int> lab(0, classes - 1);
    std::vector<std::uint8_t> p(64);
    std::vector<std::uint8_t> y(64);
    for (auto& v : p) v = static_cast<std::uint8_t>(lab(g));
    for (auto& v : y) v = static_cast<std::uint8_t>(lab(g));
    if (trial % 7 == 0) y = p;
    if (trial % 11 == 0) std::fill(p.begin(), p.end(), 0);

    // Brute force: confusion matrix cm[true][pred].
    std::vector<std::vector<long>> cm(classes, std::vector<long>(classes, 0));
    for (int i = 0; i < 64; ++i) ++cm[y[i]][p[i]];
    double sum = 0;
    int present = 0;
    for (int c = 0; c < classes; ++c) {
      long row = 0;
      long col = 0;
      for (int k = 0; k < classes; ++k) {
        row += cm[c][k];
        col += cm[k][c];
      }
      const long uni = row + col - cm[c][c];
      if (uni == 0) continue;
      sum += static_cast<double>(cm[c][c]) / static_cast<double>(uni);
      ++present;
    }
    const double ref = present ? sum / present : 1.0;
    const double got = miou_score(one_hot<float>(p, 1, classes, 8, 8), one_hot<float>(y, 1, classes, 8, 8));
    if (got != ref) ++mismatches;
  }
  return {mismatches == 0, "1000 random 8x8 masks, C in {2,3,4}: " + std::to_string(mismatches) +
                               " inexact results"};
}

// ---------------------------------------------------------------- C4

Outcome criterion4(const fs::path& root) {
  const auto run = fs::path(desk_config(root / "desk_seed1", 1).output);
  const auto manifest = EnsembleManifest::load(run / "ensemble.manifest");
  auto load = [&](int d) {
    NestedUNet<float> m(manifest.model);
    std::ifstream is(run / ("stage_" + std::to_string(d) + ".bin"), std::ios::binary);
    m.load(is);
    return m;
  };
  int compared = 0;
  int changed = 0;
  for (int d = 2; d <= 4; ++d) {
    const auto before = load(d - 1);
    const auto after = load(d);
    for (int j = 0; j <= d - 1; ++j) {
      ++compared;
      if (before.block_bytes({j, 0}) != after.block_bytes({j, 0})) ++changed;
    }
  }
  return {compared == 9 && changed == 0,
          std::to_string(compared) + " encoder blocks compared across stages 2..4, " +
              std::to_string(changed) + " changed"};
}

// ---------------------------------------------------------------- C5

Outcome criterion5() {
  ModelConfig cfg;
  cfg.classes = 2;
  cfg.base_filters = 2;
  cfg.max_depth = 2;
  NestedUNet<double> model(cfg);
  std::mt19937_64 g(505);
  for (int d = 1; d <= 2; ++d) model.add_stage(d, g);
  const int d = 2;
  const int n = 2;

  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<double> x(n, 3, 8, 8);
  for (auto& v : x.storage()) v = u(g);
  std::vector<std::uint8_t> labels(n * 64);
  for (int k = 0; k < n; ++k)
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) labels[k * 64 + r * 8 + c] = (r + 2 * c + k) % 5 < 2 ? 1 : 0;
  const auto target = one_hot<double>(labels, n, 2, 8, 8);

  EtaWeights eta = EtaWeights::uniform(model.supervised_blocks(d), EtaMode::kBoundedSum);
  eta.raw_logits = {0.3, -0.2, 0.5};

  auto loss = [&] {
    auto logits = model.forward(d, x, Mode::kTrain);
    std::vector<double> losses;
    for (const auto& idx : eta.blocks) {
      const auto t = downsample_mask(target, 1 << idx.i).values;
      losses.push_back(block_loss(softmax_channels(logits.at(idx)), t));
    }
    return combined_loss(losses, eta);
  };

  // Analytic gradients.
  model.zero_grad(d);
  for (int s = 1; s < d; ++s) model.zero_grad(s);
  auto logits = model.forward(d, x, Mode::kTrain);
  std::vector<double> losses;
  std::map<GridIndex, Tensor<double>> probs;
  for (const auto& idx : eta.blocks) {
    probs[idx] = softmax_channels(logits.at(idx));
    losses.push_back(block_loss(probs[idx], downsample_mask(target, 1 << idx.i).values));
  }
  const auto cg = combined_loss_grad(losses, eta);
  NestedUNet<double>::LogitMap dlogits;
  for (std::size_t b = 0; b < eta.blocks.size(); ++b) {
    const auto idx = eta.blocks[b];
    const std::vector<double> scales(n, cg.block_weights[b] / n);
    dlogits[idx] = block_loss_logit_grad(probs[idx], downsample_mask(target, 1 << idx.i).values,
                                         std::span<const double>(scales));
  }
  model.backward(d, dlogits);

  auto central = [&](double& p) {
    const double h = 1e-6;
    const double keep = p;
    p = keep + h;
    const double up = loss();
    p = keep - h;
    const double down = loss();
    p = keep;
    return (up - down) / (2 * h);
  };
  auto rel = [](double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
  };

  double worst_eta = 0.0;
  for (std::size_t b = 0; b < eta.size(); ++b) {
    worst_eta = std::max(worst_eta, rel(cg.raw_logits[b], central(eta.raw_logits[b])));
  }

  // 32 convolution weights drawn from every block UNet^2 trains.
  std::vector<std::pair<double*, double>> sample;
  std::vector<Conv2d<double>*> convs;
  for (const auto& idx : model.required_blocks(d)) {
    if (model.is_frozen(idx)) continue;
    convs.push_back(&model.block(idx).conv1);
    convs.push_back(&model.block(idx).conv2);
  }
  for (int k = 0; k < 32; ++k) {
    auto* conv = convs[k % convs.size()];
    const std::size_t i = g() % conv->weight.size();
    sample.push_back({&conv->weight.value[i], conv->weight.grad[i]});
  }
  double worst_w = 0.0;
  for (auto& [p, grad] : sample) worst_w = std::max(worst_w, rel(grad, central(*p)));
  return {worst_eta <= 1e-3 && worst_w <= 1e-3 && sample.size() == 32,
          "max relative error: eta logits " + fmt("%.3g", worst_eta) + ", 32 conv weights " +
              fmt("%.3g", worst_w)};
}

// ---------------------------------------------------------------- C6 / C7

struct DeskResult {
  double ens_alpha = 0;
  double ens_avg = 0;
  double best_single = 0;
  double unet4 = 0;
  double seconds = 0;  // training plus evaluation
};

DeskResult desk_eval(const RunConfig& c) {
  DeskResult out;
  out.seconds = ensure_trained(c);
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = cmd_eval(c.output);
  out.seconds += seconds_since(t0);
  out.ens_alpha = r.row("ens(alpha)").miou;
  out.ens_avg = r.row("ens(avg)").miou;
  for (const auto& row : r.rows) {
    if (row.model.rfind("UNet", 0) == 0) out.best_single = std::max(out.best_single, row.miou);
  }
  out.unet4 = r.row("UNet4").miou;
  return out;
}

Outcome criterion6(const fs::path& root, std::vector<DeskResult>& results) {
  double time = 0.0;
  std::vector<double> vs_avg;
  std::vector<double> vs_best;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto r = desk_eval(desk_config(root / ("desk_seed" + std::to_string(seed)), seed));
    results.push_back(r);
    time += r.seconds;
    vs_avg.push_back(r.ens_alpha - r.ens_avg);
    vs_best.push_back(r.ens_alpha - r.best_single);
    per_seed += " seed" + std::to_string(seed) + "(alpha " + fmt("%.4f", r.ens_alpha) + ", avg " +
                fmt("%.4f", r.ens_avg) + ", best " + fmt("%.4f", r.best_single) + ")";
  }
  const double ma = median(vs_avg);
  const double mb = median(vs_best);
  return {ma >= -0.002 && mb >= -0.01 && time <= 30 * 60,
          "median ens(alpha)-ens(avg) " + fmt("%+.4f", ma) + ", median ens(alpha)-best " +
              fmt("%+.4f", mb) + ";" + per_seed + "; " + fmt("%.0f", time) + " s"};
}

Outcome criterion7(const fs::path& root, const std::vector<DeskResult>& with_ds) {
  std::vector<double> ds;
  std::vector<double> plain;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto c = desk_config(root / ("nods_seed" + std::to_string(seed)), seed);
    c.deep_supervision = false;
    plain.push_back(desk_eval(c).unet4);
    ds.push_back(with_ds[seed - 1].unet4);
  }
  const double a = median(ds);
  const double b = median(plain);
  return {a >= b - 0.005, "median UNet4 test mIoU with deep supervision " + fmt("%.4f", a) +
                              ", without " + fmt("%.4f", b)};
}

// ---------------------------------------------------------------- C8

// Direct transcription of the published listing: windows mask[i:i+f, j:j+f]
// for i < H/f, j < W/f, counted when they hold more than one label.
long long listing_count(const std::vector<std::uint8_t>& mask, int h, int w, int f) {
  long long mixed = 0;
  for (int i = 0; i < h / f; ++i) {
    for (int j = 0; j < w / f; ++j) {
      std::set<int> labels;
      for (int r = i; r < std::min(h, i + f); ++r)
        for (int c = j; c < std::min(w, j + f); ++c) labels.insert(mask[r * w + c]);
      if (labels.size() > 1) ++mixed;
    }
  }
  return mixed;
}

// The same count on the non-overlapping pooling grid.
long long grid_count(const std::vector<std::uint8_t>& mask, int h, int w, int f) {
  long long mixed = 0;
  for (int i = 0; i < h / f; ++i) {
    for (int j = 0; j < w / f; ++j) {
      const int first = mask[(i * f) * w + j * f];
      bool mixed_here = false;
      for (int r = i * f; r < (i + 1) * f && !mixed_here; ++r)
        for (int c = j * f; c < (j + 1) * f; ++c)
          if (mask[r * w + c] != first) {
            mixed_here = true;
            break;
          }
      mixed += mixed_here;
    }
  }
  return mixed;
}

Outcome criterion8() {
  std::mt19937_64 g(808);
  const std::vector<int> factors = {2, 4, 8, 16};
  int listing_bad = 0;
  int grid_bad = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int classes = 2 + trial % 4;
    const int block = 1 << (trial % 4);  // 1, 2, 4, 8: from noise to blocky masks
    std::uniform_int_distribution<int> lab(0, classes - 1);
    std::vector<std::uint8_t> coarse((32 / block) * (32 / block));
    for (auto& v : coarse) v = static_cast<std::uint8_t>(lab(g));
    std::vector<std::uint8_t> mask(32 * 32);
    const int shift = trial % 3;
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) {
        const int rr = std::min(31, r + shift) / block;
        const int cc = c / block;
        mask[r * 32 + c] = coarse[rr * (32 / block) + cc];
      }
    const auto lit = incorrect_label_ratio({mask}, 32, 32, factors, WindowIndexing::kLiteral);
    const auto pool = incorrect_label_ratio({mask}, 32, 32, factors, WindowIndexing::kPooling);
    for (std::size_t k = 0; k < factors.size(); ++k) {
      listing_bad += lit.mixed_windows[k] != listing_count(mask, 32, 32, factors[k]);
      grid_bad += pool.mixed_windows[k] != grid_count(mask, 32, 32, factors[k]);
    }
  }
  const std::vector<std::vector<std::uint8_t>> constant(1, std::vector<std::uint8_t>(32 * 32, 3));
  bool constant_zero = true;
  for (auto mode : {WindowIndexing::kPooling, WindowIndexing::kLiteral}) {
    const auto r = incorrect_label_ratio(constant, 32, 32, factors, mode);
    for (std::size_t k = 0; k < factors.size(); ++k) constant_zero = constant_zero && r.ratio(k) == 0.0;
  }
  std::vector<std::uint8_t> board(32 * 32);
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) board[r * 32 + c] = (r + c) % 2;
  bool board_one = true;
  for (auto mode : {WindowIndexing::kPooling, WindowIndexing::kLiteral}) {
    board_one = board_one && incorrect_label_ratio({board}, 32, 32, {2}, mode).ratio(0) == 1.0;
  }
  return {listing_bad == 0 && grid_bad == 0 && constant_zero && board_one,
          "200 masks x 4 factors: " + std::to_string(listing_bad) +
              " disagreements with the listing (literal windows), " + std::to_string(grid_bad) +
              " with the pooling-grid count; constant mask 0: " + (constant_zero ? "yes" : "no") +
              "; checkerboard at factor 2 is 1: " + (board_one ? "yes" : "no")};
}

// ---------------------------------------------------------------- C9

Outcome criterion9() {
  std::mt19937_64 g(909);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  double worst_self = 0;
  double worst_inv = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int rows = 5 + static_cast<int>(g() % 40);
    const int p = 1 + static_cast<int>(g() % 80);
    const int q = 1 + static_cast<int>(g() % 30);
    Eigen::MatrixXd x(rows, p);
    Eigen::MatrixXd y(rows, q);
    for (int i = 0; i < x.size(); ++i) x.data()[i] = nd(g);
    for (int i = 0; i < y.size(); ++i) y.data()[i] = nd(g);
    Eigen::MatrixXd a(p, p);
    for (int i = 0; i < a.size(); ++i) a.data()[i] = nd(g);
    const Eigen::MatrixXd orth = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
    worst_self = std::max(worst_self, std::abs(linear_cka(x, x) - 1.0));
    const double base = linear_cka(x, y);
    worst_inv = std::max(worst_inv, std::abs(linear_cka(scale(g) * x, y) - base));
    worst_inv = std::max(worst_inv, std::abs(linear_cka(x * orth, y) - base));
  }
  return {worst_self <= 1e-9 && worst_inv <= 1e-5,
          "100 matrices: max |CKA(X,X)-1| " + fmt("%.3g", worst_self) +
              ", max change under scaling/orthogonal maps " + fmt("%.3g", worst_inv)};
}

// ---------------------------------------------------------------- C10

Outcome criterion10(const fs::path& root) {
  SyntheticSpec spec;
  spec.seed = 10;
  spec.classes = 4;
  spec.tile = 32;
  spec.max_depth = 2;
  spec.noise = 0.0;
  const auto data_root = root / "discard_data";
  fs::remove_all(data_root);
  const auto manifest = generate_synthetic(spec, data_root, 64, 8);
  const auto train = load_dataset(manifest, "train");
  const auto test = load_dataset(manifest, "test");

  ModelConfig cfg;
  cfg.classes = 4;
  cfg.base_filters = 4;
  cfg.max_depth = 2;
  NestedUNet<float> model(cfg);
  BoostState boost = BoostState::initial(train.size());
  StageOptions opts;
  opts.epochs = 6;
  opts.batch_size = 8;
  opts.lr = 5e-3;
  opts.seed = 10;

  EnsembleManifest ens;
  ens.model = cfg;
  const auto r1 = train_stage(model, boost, train, 1, opts);
  ens.entries.push_back({1, "", r1.eta, r1.alpha});
  const auto before = boost.sample_weights;

  StageHooks hooks;
  hooks.before_scoring = [](NestedUNet<float>& m, EtaWeights& eta, int) {
    for (const auto& idx : eta.blocks) {
      auto& head = m.head(idx);
      std::fill(head.weight.value.begin(), head.weight.value.end(), 0.0f);
      std::fill(head.bias.value.begin(), head.bias.value.end(), 0.0f);
      head.bias.value[0] = 5.0f;
    }
  };
  const auto r2 = train_stage(model, boost, train, 2, opts, hooks);
  ens.entries.push_back({2, "", r2.eta, r2.alpha});

  const double threshold = 1.0 - 1.0 / cfg.classes;
  const bool weights_same = boost.sample_weights == before;

  std::vector<std::size_t> idx(test.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto images = stack_images(test, idx);
  const auto with = ensemble_predict(ens, model, images, EnsembleMode::kAlpha);
  EnsembleManifest without = ens;
  without.entries.pop_back();
  const auto ref = ensemble_predict(without, model, images, EnsembleMode::kAlpha);
  const bool identical = with.probs.storage() == ref.probs.storage() && with.labels == ref.labels;

  return {r1.alpha > 0.0 && r2.error >= threshold && r2.discarded && r2.alpha == 0.0 &&
              weights_same && identical,
          "stage 1 alpha " + fmt("%.4f", r1.alpha) + "; forced stage 2: eps " + fmt("%.4f", r2.error) + " (threshold " + fmt("%.4f", threshold) +
              "), alpha " + fmt("%g", r2.alpha) + ", weights unchanged: " +
              (weights_same ? "yes" : "no") + ", ensemble bit-identical without it: " +
              (identical ? "yes" : "no")};
}

// ---------------------------------------------------------------- C11

Outcome criterion11(const fs::path& root) {
  const auto base = root / "determinism";
  fs::remove_all(base);
  const auto a = small_config(base / "a");
  const auto b = small_config(base / "b");
  cmd_train(a);
  cmd_train(b);
  std::vector<std::string> differing;
  for (const char* f : {"metrics.csv", "boost_log.csv", "eta_log.csv", "ensemble.manifest"}) {
    if (slurp(fs::path(a.output) / f) != slurp(fs::path(b.output) / f)) differing.push_back(f);
  }
  int resume_bad = 0;
  for (int k = 1; k < a.max_depth; ++k) {
    const auto c = small_config(base / ("resume_after_" + std::to_string(k)));
    TrainOptions stop;
    stop.stop_after = k;
    cmd_train(c, stop);
    cmd_train(c);
    for (const char* f : {"ensemble.manifest", "metrics.csv"}) {
      if (slurp(fs::path(a.output) / f) != slurp(fs::path(c.output) / f)) ++resume_bad;
    }
  }
  std::string diff;
  for (const auto& f : differing) diff += " " + f;
  return {differing.empty() && resume_bad == 0,
          "repeat run differing files:" + (diff.empty() ? std::string(" none") : diff) +
              "; resumed after stages 1.." + std::to_string(a.max_depth - 1) + ", " +
              std::to_string(resume_bad) + " mismatching outputs"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const fs::path root = scratch_root();
  fs::create_directories(root);
  std::cout << "acceptance scratch directory: " << root.string() << "\n" << std::flush;

  std::vector<DeskResult> desk;
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, [&] { return criterion1(root); }},
      {2, [] { return criterion2(); }},
      {3, [] { return criterion3(); }},
      {4, [&] { return criterion4(root); }},
      {5, [] { return criterion5(); }},
      {6, [&] { return criterion6(root, desk); }},
      {7, [&] { return criterion7(root, desk); }},
      {8, [] { return criterion8(); }},
      {9, [] { return criterion9(); }},
      {10, [&] { return criterion10(root); }},
      {11, [&] { return criterion11(root); }},
  };
  int failed = 0;
  int ran = 0;
  for (const auto& [id, run] : criteria) {
    if (!only.empty() && !only.contains(id)) continue;
    ++ran;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << o.detail << "\n"
              << std::flush;
  }
  std::cout << (ran - failed) << "/" << ran << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
