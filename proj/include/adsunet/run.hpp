#pragma once

// Experiment runs: configuration, the run directory, and the train / eval /
// analyze commands used by the command-line tool.
//
// Run directory:
//   config.json            echoed RunConfig
//   run.lock               held (flock) while training
//   data/                  generated synthetic dataset, when no dataset is given
//   stage_<d>.bin          model after stage d
//   stage_<d>.manifest     depth, frozen blocks, filter ladder, eta, alpha
//   boost_state.txt        sample weights and per-stage ledger
//   eta_log.csv            stage,epoch,block_i,block_j,eta,eta_tilde,lower,upper
//   boost_log.csv          stage,epoch,train_loss,error,alpha,discarded,
//                          min_weight,max_weight (weights after the stage)
//   metrics.csv            stage,depth,train_error,alpha,test_miou
//   ensemble.manifest      learners and their alphas

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "adsunet/analysis.hpp"
#include "adsunet/boosting.hpp"
#include "adsunet/data_io.hpp"

namespace adsunet {

struct RunConfig {
  // Data: an existing dataset root, or a synthetic spec generated into the
  // run directory when `dataset` is empty.
  std::string dataset;
  SyntheticSpec synthetic;
  int synthetic_train = 400;
  int synthetic_test = 100;

  int max_depth = 4;
  int epochs = 10;
  std::vector<int> stage_epochs;  // overrides `epochs` per stage when set
  int base_filters = 16;
  double lr = 1e-3;
  std::string schedule = "one_cycle";  // or "constant"
  double weight_decay = 1e-7;
  double eta_lr_scale = 10.0;
  int batch_size = 8;
  EtaMode eta_mode = EtaMode::kBoundedSum;

  bool deep_supervision = true;
  bool scse = true;
  bool reweighting = true;
  bool resample = false;
  bool augment = true;
  bool soft_targets = true;
  bool class_weighting = true;
  EnsembleMode ensemble_mode = EnsembleMode::kAlpha;

  std::uint64_t seed = 1;
  std::string output = "run";

  int epochs_for(int stage) const;
  ModelConfig model_config(int classes) const;
  StageOptions stage_options(int stage, std::vector<float> class_weights) const;

  // Problems found by pre-flight validation; empty when the config is valid.
  std::vector<std::string> problems() const;
  void validate() const;  // ConfigError listing every problem

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;
  bool operator==(const RunConfig&) const;
};

struct TrainOptions {
  int stop_after = 0;  // stop once this stage is complete (0: run to T)
  std::ostream* log = nullptr;
};

struct TrainSummary {
  int first_stage = 1;  // > 1 when resumed
  int completed = 0;
  std::filesystem::path manifest;
};

TrainSummary cmd_train(const RunConfig& config, const TrainOptions& options = {});

struct EvalRow {
  std::string model;  // UNet1 ... UNetT, ens(avg), ens(alpha)
  double alpha = 0.0;
  double miou = 0.0;
  std::vector<double> per_class;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<std::string> notes;  // e.g. why a row is missing
  void write_csv(const std::filesystem::path& path) const;
  std::string table() const;
  const EvalRow& row(const std::string& model) const;
};

enum class EvalMode { kAll, kPerLearner, kAlpha, kAverage };
EvalMode eval_mode_from_string(const std::string& s);

// Evaluates a completed run on a split of its dataset, or of `dataset` when
// given.
EvalReport cmd_eval(const std::filesystem::path& run_dir,
                    const std::string& dataset = "", const std::string& split = "test",
                    EvalMode mode = EvalMode::kAll);

struct AnalyzeOptions {
  std::vector<std::string> what;  // cka, mask_stats, eta_plots
  std::string dataset;            // defaults to the run's dataset
  std::string split = "test";     // probe split for cka
  std::string mask_split = "train";
  int probe = 64;
  std::filesystem::path compare;  // second run for diff heatmaps
  std::filesystem::path out;      // defaults to <run>/analysis
};

struct AnalyzeReport {
  std::vector<std::filesystem::path> files;
  LabelErrorReport mask_stats;
  CkaMatrix block_cka;
  CkaMatrix learner_cka;
  // Largest distance of a logged eta-tilde value outside its bounds (0 when
  // all are inside). Only meaningful for bounded modes.
  double eta_bound_violation = 0.0;
};

AnalyzeReport cmd_analyze(const std::filesystem::path& run_dir,
                          const AnalyzeOptions& options);

// Directory the run's dataset lives in.
std::filesystem::path run_dataset_root(const std::filesystem::path& run_dir,
                                       const RunConfig& config);

// {"error": {"kind": ..., "message": ...}}
std::string error_record(const std::string& kind, const std::string& message);

}  // namespace adsunet
