// adsunet: gen-data | train | eval | analyze
//
// Failures exit nonzero and print one JSON error record on stderr.

#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "adsunet/errors.hpp"
#include "adsunet/run.hpp"

namespace {

using namespace adsunet;

template <typename T>
void apply(std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

struct TrainFlags {
  std::string config_file;
  std::optional<std::string> dataset, output, schedule, eta_mode, ensemble_mode;
  std::optional<int> depth, epochs, base_filters, batch, classes, tile, cells,
      n_train, n_test;
  std::optional<double> lr, weight_decay, eta_lr_scale, noise;
  std::optional<std::uint64_t> seed, data_seed;
  std::optional<bool> deep_supervision, scse, reweighting, resample, augment, soft_targets,
      class_weighting;
  std::vector<int> stage_epochs;
  int stop_after = 0;
  bool quiet = false;

  RunConfig resolve() const {
    RunConfig c = config_file.empty() ? RunConfig{} : RunConfig::read(config_file);
    auto f = *this;
    apply(f.dataset, c.dataset);
    apply(f.output, c.output);
    apply(f.schedule, c.schedule);
    if (eta_mode) c.eta_mode = eta_mode_from_string(*eta_mode);
    if (ensemble_mode) c.ensemble_mode = ensemble_mode_from_string(*ensemble_mode);
    apply(f.depth, c.max_depth);
    apply(f.epochs, c.epochs);
    if (!stage_epochs.empty()) c.stage_epochs = stage_epochs;
    apply(f.base_filters, c.base_filters);
    apply(f.batch, c.batch_size);
    apply(f.classes, c.synthetic.classes);
    apply(f.tile, c.synthetic.tile);
    apply(f.cells, c.synthetic.cells);
    apply(f.n_train, c.synthetic_train);
    apply(f.n_test, c.synthetic_test);
    apply(f.lr, c.lr);
    apply(f.weight_decay, c.weight_decay);
    apply(f.eta_lr_scale, c.eta_lr_scale);
    apply(f.noise, c.synthetic.noise);
    apply(f.seed, c.seed);
    apply(f.data_seed, c.synthetic.seed);
    apply(f.deep_supervision, c.deep_supervision);
    apply(f.scse, c.scse);
    apply(f.reweighting, c.reweighting);
    apply(f.resample, c.resample);
    apply(f.augment, c.augment);
    apply(f.soft_targets, c.soft_targets);
    apply(f.class_weighting, c.class_weighting);
    c.synthetic.max_depth = c.max_depth;
    return c;
  }
};

void add_toggle(CLI::App* app, const std::string& name, std::optional<bool>& target,
                const std::string& help) {
  app->add_flag_callback("--" + name, [&target] { target = true; }, help);
  app->add_flag_callback("--no-" + name, [&target] { target = false; });
}

int fail(const std::string& kind, const std::string& message) {
  std::cerr << error_record(kind, message) << "\n";
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stage-wise boosted ensemble of deeply supervised UNets"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic texture dataset");
  SyntheticSpec spec;
  std::string gen_out;
  int gen_train = 400;
  int gen_test = 100;
  gen->add_option("--out", gen_out, "Dataset root")->required();
  gen->add_option("--seed", spec.seed, "Generator seed");
  gen->add_option("--classes", spec.classes, "Number of classes (2-8)");
  gen->add_option("--tile", spec.tile, "Tile size in pixels");
  gen->add_option("--depth", spec.max_depth, "Deepest learner T; tile must divide by 2^T");
  gen->add_option("--cells", spec.cells, "Voronoi sites per tile");
  gen->add_option("--noise", spec.noise, "Texture noise level");
  gen->add_option("--train", gen_train, "Training tiles");
  gen->add_option("--test", gen_test, "Test tiles");

  // train
  auto* train = app.add_subcommand("train", "Train the ensemble stage by stage");
  TrainFlags tf;
  train->add_option("--config", tf.config_file, "RunConfig JSON file");
  train->add_option("--data", tf.dataset, "Dataset root (default: generate synthetic data)");
  train->add_option("--out", tf.output, "Run directory");
  train->add_option("--depth", tf.depth, "Number of stages T");
  train->add_option("--epochs", tf.epochs, "Epochs per stage");
  train->add_option("--stage-epochs", tf.stage_epochs, "Epochs for each stage")->delimiter(',');
  train->add_option("--base-filters", tf.base_filters, "Filters of the first level");
  train->add_option("--lr", tf.lr, "Peak learning rate");
  train->add_option("--schedule", tf.schedule, "one_cycle or constant");
  train->add_option("--weight-decay", tf.weight_decay, "L2 weight decay");
  train->add_option("--eta-lr-scale", tf.eta_lr_scale, "Learning-rate multiplier for eta");
  train->add_option("--batch", tf.batch, "Batch size");
  train->add_option("--eta-mode", tf.eta_mode, "unconstrained, bounded or bounded_sum");
  train->add_option("--ensemble-mode", tf.ensemble_mode, "alpha or avg");
  train->add_option("--seed", tf.seed, "Training seed");
  train->add_option("--data-seed", tf.data_seed, "Synthetic data seed");
  train->add_option("--classes", tf.classes, "Classes of synthetic data or of an unscanned dataset");
  train->add_option("--tile", tf.tile, "Tile size of synthetic data or of an unscanned dataset");
  train->add_option("--cells", tf.cells, "Synthetic Voronoi sites");
  train->add_option("--noise", tf.noise, "Synthetic noise level");
  train->add_option("--train-tiles", tf.n_train, "Synthetic training tiles");
  train->add_option("--test-tiles", tf.n_test, "Synthetic test tiles");
  add_toggle(train, "deep-supervision", tf.deep_supervision, "Supervise hidden blocks");
  add_toggle(train, "scse", tf.scse, "scSE gates on skip connections");
  add_toggle(train, "reweighting", tf.reweighting, "Boosting sample re-weighting");
  add_toggle(train, "resample", tf.resample, "Weighted resampling instead of loss scaling");
  add_toggle(train, "augment", tf.augment, "Flip and shift augmentation");
  add_toggle(train, "soft-targets", tf.soft_targets, "Average-pooled soft masks");
  add_toggle(train, "class-weighting", tf.class_weighting, "Class-frequency loss weights");
  train->add_option("--stop-after", tf.stop_after, "Stop after this stage (resume later)");
  train->add_flag("--quiet", tf.quiet, "No per-epoch progress");
  bool dry_run = false;
  train->add_flag("--check", dry_run, "Validate the config and print it; do not train");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate learners and ensembles");
  std::string eval_run, eval_data, eval_split = "test", eval_mode = "all", eval_csv;
  eval->add_option("--run", eval_run, "Run directory")->required();
  eval->add_option("--data", eval_data, "Dataset root (default: the run's)");
  eval->add_option("--split", eval_split, "Split to evaluate");
  eval->add_option("--mode", eval_mode, "all, per_learner, alpha or avg");
  eval->add_option("--csv", eval_csv, "CSV output (default: <run>/eval_<split>.csv)");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "CKA, mask statistics and eta plots");
  std::string an_run;
  AnalyzeOptions ao;
  std::string an_out, an_compare;
  analyze->add_option("--run", an_run, "Run directory")->required();
  analyze->add_option("--what", ao.what, "cka, mask_stats, eta_plots")
      ->delimiter(',')
      ->required();
  analyze->add_option("--data", ao.dataset, "Dataset root (default: the run's)");
  analyze->add_option("--split", ao.split, "Probe split for cka");
  analyze->add_option("--mask-split", ao.mask_split, "Split for mask_stats");
  analyze->add_option("--probe", ao.probe, "Probe images for cka");
  analyze->add_option("--compare", an_compare, "Second run for diff heatmaps");
  analyze->add_option("--out", an_out, "Output directory (default: <run>/analysis)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what());
  }

  try {
    if (*gen) {
      const auto m = generate_synthetic(spec, gen_out, gen_train, gen_test);
      std::cout << "wrote " << m.split("train").size() << " train and "
                << m.split("test").size() << " test tiles to " << gen_out << "\n";
    } else if (*train) {
      const RunConfig config = tf.resolve();
      if (dry_run) {
        config.validate();
        std::cout << config.to_json();
        return 0;
      }
      TrainOptions opt;
      opt.stop_after = tf.stop_after;
      if (!tf.quiet) opt.log = &std::cout;
      const auto s = cmd_train(config, opt);
      std::cout << "completed stages " << s.first_stage << ".." << s.completed << "; manifest "
                << s.manifest.string() << "\n";
    } else if (*eval) {
      const auto report =
          cmd_eval(eval_run, eval_data, eval_split, eval_mode_from_string(eval_mode));
      const std::filesystem::path csv =
          eval_csv.empty() ? std::filesystem::path(eval_run) / ("eval_" + eval_split + ".csv")
                           : std::filesystem::path(eval_csv);
      report.write_csv(csv);
      std::cout << "mIoU (%) on " << eval_split << "\n" << report.table();
      for (const auto& n : report.notes) std::cout << "note: " << n << "\n";
    } else if (*analyze) {
      ao.out = an_out;
      ao.compare = an_compare;
      const auto report = cmd_analyze(an_run, ao);
      for (const auto& w : ao.what) {
        if (w == "mask_stats") std::cout << report.mask_stats.table();
      }
      for (const auto& f : report.files) std::cout << "wrote " << f.string() << "\n";
    }
  } catch (const Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
