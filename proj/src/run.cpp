#include "adsunet/run.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "adsunet/errors.hpp"
#include "adsunet/kv_file.hpp"
#include "adsunet/labels.hpp"

namespace adsunet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kEvalBatch = 16;

// Exclusive advisory lock on <dir>/run.lock, released when the process exits.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) {
    const auto path = dir / "run.lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw IoError("cannot open " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw StateError(dir.string() + " is locked by another training run");
    }
  }
  ~RunLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  int fd_ = -1;
};

std::string read_text(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
  }
  fs::rename(tmp, path);
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) rows.push_back(split(line, ','));
  }
  return rows;
}

// Keeps the header and the rows whose first column is a stage <= `stage`.
void truncate_log(const fs::path& path, int stage, const std::string& header) {
  std::string text = header + "\n";
  if (fs::exists(path)) {
    const auto rows = read_csv(path);
    for (std::size_t r = 1; r < rows.size(); ++r) {
      if (std::stoi(rows[r][0]) > stage) continue;
      std::string line;
      for (std::size_t c = 0; c < rows[r].size(); ++c) {
        if (c) line += ",";
        line += rows[r][c];
      }
      text += line + "\n";
    }
  }
  write_text(path, text);
}

void append(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

const std::string kEtaLogHeader = "stage,epoch,block_i,block_j,eta,eta_tilde,lower,upper";
const std::string kBoostLogHeader = "stage,epoch,train_loss,error,alpha,discarded,min_weight,max_weight";
const std::string kMetricsHeader = "stage,depth,train_error,alpha,test_miou";

fs::path checkpoint_path(const fs::path& dir, int d) {
  return dir / ("stage_" + std::to_string(d) + ".bin");
}

fs::path sidecar_path(const fs::path& dir, int d) {
  return dir / ("stage_" + std::to_string(d) + ".manifest");
}

void save_model(const NestedUNet<float>& model, const fs::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    model.save(os);
  }
  fs::rename(tmp, path);
}

NestedUNet<float> load_model(const ModelConfig& config, const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing checkpoint " + path.string());
  NestedUNet<float> model(config);
  model.load(is);
  return model;
}

void write_sidecar(const fs::path& path, const NestedUNet<float>& model,
                   const StageResult& r) {
  KeyValueFile kv;
  kv.set("depth", r.depth);
  std::string frozen;
  for (const auto& idx : model.frozen()) {
    if (!frozen.empty()) frozen += ",";
    frozen += std::to_string(idx.i) + ":" + std::to_string(idx.j);
  }
  kv.set("frozen", frozen);
  std::vector<double> ladder;
  for (int i = 0; i <= r.depth; ++i) ladder.push_back(model.config().channels(i));
  kv.set("filter_ladder", ladder);
  std::string blocks;
  for (const auto& idx : r.eta.blocks) {
    if (!blocks.empty()) blocks += ",";
    blocks += std::to_string(idx.i) + ":" + std::to_string(idx.j);
  }
  kv.set("eta_mode", to_string(r.eta.mode));
  kv.set("blocks", blocks);
  kv.set("eta_logits", r.eta.raw_logits);
  kv.set("eta_tilde", constrain_eta(r.eta));
  kv.set("alpha", r.alpha);
  kv.set("error", r.error);
  kv.set("discarded", r.discarded ? 1 : 0);
  kv.write(path);
}

EnsembleEntry read_sidecar(const fs::path& path) {
  const auto kv = KeyValueFile::read(path);
  EnsembleEntry e;
  e.depth = static_cast<int>(kv.get_int("depth"));
  e.checkpoint = "stage_" + std::to_string(e.depth) + ".bin";
  e.eta.mode = eta_mode_from_string(kv.get("eta_mode"));
  for (const auto& part : split(kv.get("blocks"), ',')) {
    const auto ij = split(part, ':');
    e.eta.blocks.push_back({std::stoi(ij.at(0)), std::stoi(ij.at(1))});
  }
  e.eta.raw_logits = kv.get_doubles("eta_logits");
  e.alpha = kv.get_double("alpha");
  return e;
}

std::vector<float> to_float(const std::vector<double>& v) {
  return std::vector<float>(v.begin(), v.end());
}

// Predicted label maps of UNet^d over `data`, batch by batch.
template <typename Fn>
void for_each_batch(const std::vector<Sample>& data, Fn&& fn) {
  for (std::size_t b0 = 0; b0 < data.size(); b0 += kEvalBatch) {
    const std::size_t nb = std::min<std::size_t>(kEvalBatch, data.size() - b0);
    std::vector<std::size_t> idx(nb);
    std::iota(idx.begin(), idx.end(), b0);
    fn(idx, stack_images(data, idx));
  }
}

void add_labels(ConfusionAccumulator& acc, const std::vector<std::uint8_t>& pred,
                const std::vector<Sample>& data, const std::vector<std::size_t>& idx) {
  std::size_t offset = 0;
  for (std::size_t k : idx) {
    const auto& truth = data[k].labels;
    acc.add(std::span(pred).subspan(offset, truth.size()), truth);
    offset += truth.size();
  }
}

double test_miou(NestedUNet<float>& model, const EtaWeights& eta, int d,
                 const std::vector<Sample>& data, int classes) {
  ConfusionAccumulator acc(classes);
  for_each_batch(data, [&](const auto& idx, const Tensor<float>& x) {
    add_labels(acc, argmax_labels(learner_prediction(model, eta, d, x)), data, idx);
  });
  return acc.miou();
}

std::string fmt(double v) { return format_exact(v); }

DatasetManifest open_dataset(const fs::path& root) {
  if (!fs::exists(root / "manifest.txt")) {
    throw IoError("no dataset manifest at " + (root / "manifest.txt").string() +
                  " (create one with gen-data)");
  }
  return DatasetManifest::read(root);
}

}  // namespace

// ------------------------------------------------------------- RunConfig

int RunConfig::epochs_for(int stage) const {
  if (!stage_epochs.empty()) return stage_epochs.at(stage - 1);
  return epochs;
}

ModelConfig RunConfig::model_config(int classes) const {
  ModelConfig m;
  m.classes = classes;
  m.base_filters = base_filters;
  m.max_depth = max_depth;
  m.deep_supervision = deep_supervision;
  m.scse = scse;
  return m;
}

StageOptions RunConfig::stage_options(int stage, std::vector<float> class_weights) const {
  StageOptions o;
  o.epochs = epochs_for(stage);
  o.batch_size = batch_size;
  o.lr = lr;
  o.one_cycle = schedule == "one_cycle";
  o.eta_lr_scale = eta_lr_scale;
  o.adam.weight_decay = weight_decay;
  o.eta_mode = eta_mode;
  o.reweighting = reweighting;
  o.resample = resample;
  o.soft_targets = soft_targets;
  o.augment = augment;
  o.seed = seed;
  o.class_weights = std::move(class_weights);
  return o;
}

std::vector<std::string> RunConfig::problems() const {
  std::vector<std::string> p;
  if (max_depth < 1) p.push_back("max_depth must be >= 1");
  if (max_depth > 7) p.push_back("max_depth must be <= 7");
  if (epochs < 1) p.push_back("epochs must be >= 1");
  if (!stage_epochs.empty()) {
    if (static_cast<int>(stage_epochs.size()) != max_depth) {
      p.push_back("stage_epochs needs one entry per stage (" +
                  std::to_string(max_depth) + ")");
    }
    for (int e : stage_epochs) {
      if (e < 1) p.push_back("stage_epochs entries must be >= 1");
    }
  }
  if (base_filters < 1) p.push_back("base_filters must be >= 1");
  if (!(lr > 0)) p.push_back("lr must be > 0");
  if (schedule != "one_cycle" && schedule != "constant") {
    p.push_back("schedule must be one_cycle or constant");
  }
  if (weight_decay < 0) p.push_back("weight_decay must be >= 0");
  if (!(eta_lr_scale > 0)) p.push_back("eta_lr_scale must be > 0");
  if (batch_size < 1) p.push_back("batch_size must be >= 1");
  if (dataset.empty()) {
    if (synthetic.classes < 2 || synthetic.classes > 8) {
      p.push_back("synthetic.classes must be in [2, 8]");
    }
    if (max_depth >= 1 && max_depth <= 7 && synthetic.tile % (1 << max_depth) != 0) {
      p.push_back("synthetic.tile " + std::to_string(synthetic.tile) +
                  " is not divisible by 2^" + std::to_string(max_depth));
    }
    if (synthetic.cells < 1) p.push_back("synthetic.cells must be >= 1");
    if (synthetic.noise < 0) p.push_back("synthetic.noise must be >= 0");
    if (synthetic_train < 1) p.push_back("synthetic.train must be >= 1");
    if (synthetic_test < 0) p.push_back("synthetic.test must be >= 0");
    if (!synthetic.textures.empty() &&
        static_cast<int>(synthetic.textures.size()) != synthetic.classes) {
      p.push_back("synthetic.textures needs one entry per class");
    }
  }
  if (output.empty()) p.push_back("output directory must be set");
  return p;
}

void RunConfig::validate() const {
  const auto p = problems();
  if (p.empty()) return;
  std::string msg = "invalid run configuration:";
  for (const auto& s : p) msg += "\n  - " + s;
  throw ConfigError(msg);
}

std::string RunConfig::to_json() const {
  json textures = json::array();
  for (const auto& t : synthetic.textures) {
    textures.push_back(
        {{"frequency", t.frequency}, {"orientation", t.orientation}, {"noise", t.noise}});
  }
  json j = {
      {"data",
       {{"dataset", dataset},
        {"synthetic",
         {{"seed", synthetic.seed},
          {"classes", synthetic.classes},
          {"tile", synthetic.tile},
          {"cells", synthetic.cells},
          {"noise", synthetic.noise},
          {"textures", textures},
          {"train", synthetic_train},
          {"test", synthetic_test}}}}},
      {"model", {{"max_depth", max_depth}, {"base_filters", base_filters}}},
      {"training",
       {{"epochs", epochs},
        {"stage_epochs", stage_epochs},
        {"lr", lr},
        {"schedule", schedule},
        {"weight_decay", weight_decay},
        {"eta_lr_scale", eta_lr_scale},
        {"batch_size", batch_size},
        {"eta_mode", to_string(eta_mode)},
        {"resample", resample},
        {"augment", augment},
        {"soft_targets", soft_targets},
        {"class_weighting", class_weighting}}},
      {"toggles",
       {{"deep_supervision", deep_supervision},
        {"scse", scse},
        {"reweighting", reweighting}}},
      {"ensemble", {{"mode", to_string(ensemble_mode)}}},
      {"seed", seed},
      {"output", output}};
  return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  try {
    if (j.contains("data")) {
      const auto& d = j["data"];
      c.dataset = d.value("dataset", c.dataset);
      if (d.contains("synthetic")) {
        const auto& s = d["synthetic"];
        c.synthetic.seed = s.value("seed", c.synthetic.seed);
        c.synthetic.classes = s.value("classes", c.synthetic.classes);
        c.synthetic.tile = s.value("tile", c.synthetic.tile);
        c.synthetic.cells = s.value("cells", c.synthetic.cells);
        c.synthetic.noise = s.value("noise", c.synthetic.noise);
        c.synthetic_train = s.value("train", c.synthetic_train);
        c.synthetic_test = s.value("test", c.synthetic_test);
        for (const auto& t : s.value("textures", json::array())) {
          c.synthetic.textures.push_back({t.at("frequency").get<double>(),
                                          t.at("orientation").get<double>(),
                                          t.at("noise").get<double>()});
        }
      }
    }
    if (j.contains("model")) {
      const auto& m = j["model"];
      c.max_depth = m.value("max_depth", c.max_depth);
      c.base_filters = m.value("base_filters", c.base_filters);
    }
    if (j.contains("training")) {
      const auto& t = j["training"];
      c.epochs = t.value("epochs", c.epochs);
      c.stage_epochs = t.value("stage_epochs", c.stage_epochs);
      c.lr = t.value("lr", c.lr);
      c.schedule = t.value("schedule", c.schedule);
      c.weight_decay = t.value("weight_decay", c.weight_decay);
      c.eta_lr_scale = t.value("eta_lr_scale", c.eta_lr_scale);
      c.batch_size = t.value("batch_size", c.batch_size);
      c.eta_mode = eta_mode_from_string(t.value("eta_mode", to_string(c.eta_mode)));
      c.resample = t.value("resample", c.resample);
      c.augment = t.value("augment", c.augment);
      c.soft_targets = t.value("soft_targets", c.soft_targets);
      c.class_weighting = t.value("class_weighting", c.class_weighting);
    }
    if (j.contains("toggles")) {
      const auto& t = j["toggles"];
      c.deep_supervision = t.value("deep_supervision", c.deep_supervision);
      c.scse = t.value("scse", c.scse);
      c.reweighting = t.value("reweighting", c.reweighting);
    }
    if (j.contains("ensemble")) {
      c.ensemble_mode = ensemble_mode_from_string(
          j["ensemble"].value("mode", to_string(c.ensemble_mode)));
    }
    c.seed = j.value("seed", c.seed);
    c.output = j.value("output", c.output);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field has the wrong type: ") + e.what());
  }
  c.synthetic.max_depth = c.max_depth;
  return c;
}

RunConfig RunConfig::read(const fs::path& path) { return from_json(read_text(path)); }

void RunConfig::write(const fs::path& path) const { write_text(path, to_json()); }

bool RunConfig::operator==(const RunConfig& other) const {
  return to_json() == other.to_json();
}

fs::path run_dataset_root(const fs::path& run_dir, const RunConfig& config) {
  return config.dataset.empty() ? run_dir / "data" : fs::path(config.dataset);
}

std::string error_record(const std::string& kind, const std::string& message) {
  return json{{"error", {{"kind", kind}, {"message", message}}}}.dump();
}

// ------------------------------------------------------------------ train

TrainSummary cmd_train(const RunConfig& input, const TrainOptions& options) {
  RunConfig config = input;
  config.synthetic.max_depth = config.max_depth;
  config.validate();
  const fs::path dir = config.output;
  fs::create_directories(dir);
  RunLock lock(dir);

  const auto config_path = dir / "config.json";
  if (fs::exists(config_path)) {
    if (!(RunConfig::read(config_path) == config)) {
      throw ConfigError(dir.string() +
                        " holds a run with a different config; use a new output directory");
    }
  } else {
    config.write(config_path);
  }

  const fs::path data_root = run_dataset_root(dir, config);
  if (!fs::exists(data_root / "manifest.txt")) {
    if (config.dataset.empty()) {
      generate_synthetic(config.synthetic, data_root, config.synthetic_train,
                         config.synthetic_test);
    } else {
      // Plain image/mask folders: classes and tile size come from the config.
      DatasetManifest::scan(data_root, config.synthetic.classes, config.synthetic.tile).write();
    }
  }
  const DatasetManifest dataset = open_dataset(data_root);
  const auto train = load_dataset(dataset, "train");
  const auto test = load_dataset(dataset, "test");
  if (train.empty()) throw ConfigError("training split of " + data_root.string() + " is empty");
  const int factor = 1 << config.max_depth;
  if (train.front().height() % factor != 0 || train.front().width() % factor != 0) {
    throw ConfigError("tile size " + std::to_string(train.front().height()) + "x" +
                      std::to_string(train.front().width()) +
                      " is not divisible by 2^" + std::to_string(config.max_depth));
  }
  const int classes = dataset.classes;
  std::vector<float> cw;
  if (config.class_weighting) cw = to_float(class_weights(train, classes));

  NestedUNet<float> model(config.model_config(classes));
  EnsembleManifest ensemble;
  ensemble.model = model.config();
  ensemble.seed = config.seed;

  const auto state_path = dir / "boost_state.txt";
  BoostState boost = BoostState::initial(train.size());
  if (fs::exists(state_path)) {
    boost = BoostState::load(state_path);
    if (boost.sample_weights.size() != train.size()) {
      throw StateError(state_path.string() + " does not match the training split");
    }
    if (boost.stage > 0) model = load_model(ensemble.model, checkpoint_path(dir, boost.stage));
    for (int d = 1; d <= boost.stage; ++d) {
      ensemble.entries.push_back(read_sidecar(sidecar_path(dir, d)));
    }
  }
  const int done = boost.stage;
  truncate_log(dir / "eta_log.csv", done, kEtaLogHeader);
  truncate_log(dir / "boost_log.csv", done, kBoostLogHeader);
  truncate_log(dir / "metrics.csv", done, kMetricsHeader);

  TrainSummary summary;
  summary.first_stage = done + 1;
  summary.completed = done;
  summary.manifest = dir / "ensemble.manifest";
  const int last = options.stop_after > 0 ? std::min(options.stop_after, config.max_depth)
                                          : config.max_depth;
  for (int d = done + 1; d <= last; ++d) {
    std::vector<std::pair<int, double>> losses;
    std::string eta_rows;
    const auto blocks = model.supervised_blocks(d);
    const double lower = eta_tilde_lower_bound(static_cast<int>(blocks.size()));
    const double upper = eta_tilde_upper_bound(static_cast<int>(blocks.size()));
    StageHooks hooks;
    hooks.on_epoch = [&](const EpochRecord& r) {
      losses.emplace_back(r.epoch, r.train_loss);
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        eta_rows += std::to_string(d) + "," + std::to_string(r.epoch) + "," +
                    std::to_string(blocks[b].i) + "," +
                    std::to_string(blocks[b].j) + "," + fmt(r.eta[b]) + "," + fmt(r.eta_tilde[b]) +
                    "," + fmt(lower) + "," + fmt(upper) + "\n";
      }
      if (options.log) {
        *options.log << "stage " << d << " epoch " << r.epoch << "/"
                     << config.epochs_for(d) << "  loss " << std::fixed
                     << std::setprecision(4) << r.train_loss << "  eta~";
        for (double v : r.eta_tilde) *options.log << " " << std::setprecision(3) << v;
        *options.log << std::defaultfloat << "\n" << std::flush;
      }
    };
    const StageResult r =
        train_stage(model, boost, train, d, config.stage_options(d, cw), hooks);

    save_model(model, checkpoint_path(dir, d));
    write_sidecar(sidecar_path(dir, d), model, r);
    const auto [wmin, wmax] =
        std::minmax_element(boost.sample_weights.begin(), boost.sample_weights.end());
    const double miou = test.empty() ? std::nan("") : test_miou(model, r.eta, d, test, classes);
    append(dir / "eta_log.csv", eta_rows);
    std::string boost_rows;
    for (const auto& [epoch, loss] : losses) {
      boost_rows += std::to_string(d) + "," + std::to_string(epoch) + "," + fmt(loss) + "," +
                    fmt(r.error) + "," + fmt(r.alpha) + "," + (r.discarded ? "1" : "0") +
                    "," + fmt(*wmin) + "," + fmt(*wmax) + "\n";
    }
    append(dir / "boost_log.csv", boost_rows);
    append(dir / "metrics.csv", std::to_string(d) + "," + std::to_string(d) + "," +
                                    fmt(r.error) + "," + fmt(r.alpha) + "," + fmt(miou) +
                                    "\n");
    // The boost state is the commit point of a stage.
    boost.save(state_path);
    ensemble.entries.push_back(read_sidecar(sidecar_path(dir, d)));
    ensemble.save(summary.manifest);
    summary.completed = d;
    if (options.log) {
      *options.log << "stage " << d << " done: error " << r.error << "  alpha " << r.alpha
                   << (r.discarded ? " (discarded)" : "") << "  test mIoU " << miou
                   << "\n";
    }
  }
  if (!ensemble.entries.empty()) ensemble.save(summary.manifest);
  return summary;
}

// ------------------------------------------------------------------- eval

EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "all") return EvalMode::kAll;
  if (s == "per_learner") return EvalMode::kPerLearner;
  if (s == "alpha") return EvalMode::kAlpha;
  if (s == "avg") return EvalMode::kAverage;
  throw ConfigError("unknown eval mode '" + s + "' (expected all, per_learner, alpha, avg)");
}

const EvalRow& EvalReport::row(const std::string& model) const {
  for (const auto& r : rows) {
    if (r.model == model) return r;
  }
  throw ValueError("no row '" + model + "' in eval report");
}

void EvalReport::write_csv(const fs::path& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  const std::size_t classes = rows.empty() ? 0 : rows.front().per_class.size();
  os << "model,alpha,miou";
  for (std::size_t c = 0; c < classes; ++c) os << ",iou_" << c;
  os << "\n";
  for (const auto& r : rows) {
    os << r.model << "," << fmt(r.alpha) << "," << fmt(r.miou);
    for (double v : r.per_class) os << "," << fmt(v);
    os << "\n";
  }
}

std::string EvalReport::table() const {
  std::ostringstream os;
  for (const auto& r : rows) os << std::setw(12) << r.model;
  os << "\n";
  for (const auto& r : rows) {
    os << std::setw(12) << std::fixed << std::setprecision(2) << 100.0 * r.miou;
  }
  os << "\n";
  return os.str();
}

EvalReport cmd_eval(const fs::path& run_dir, const std::string& dataset_path,
                    const std::string& split_name, EvalMode mode) {
  const auto manifest_path = run_dir / "ensemble.manifest";
  if (!fs::exists(manifest_path)) {
    throw IoError("missing " + manifest_path.string() + " (train the run first)");
  }
  const auto manifest = EnsembleManifest::load(manifest_path);
  if (manifest.entries.empty()) throw StateError("ensemble manifest has no entries");
  const RunConfig config = RunConfig::read(run_dir / "config.json");
  const fs::path root = dataset_path.empty() ? run_dataset_root(run_dir, config)
                                             : fs::path(dataset_path);
  const auto dataset = open_dataset(root);
  if (dataset.classes != manifest.classes()) {
    throw ConfigError("dataset has " + std::to_string(dataset.classes) +
                      " classes but the ensemble was trained with " +
                      std::to_string(manifest.classes()));
  }
  const auto data = load_dataset(dataset, split_name);
  if (data.empty()) throw ValueError("split '" + split_name + "' of " + root.string() + " is empty");
  const int classes = manifest.classes();
  auto model = load_model(manifest.model, run_dir / manifest.entries.back().checkpoint);

  const std::size_t t = manifest.entries.size();
  std::vector<ConfusionAccumulator> learners(t, ConfusionAccumulator(classes));
  ConfusionAccumulator avg(classes);
  ConfusionAccumulator alpha(classes);
  const auto w_avg = ensemble_weights(manifest, EnsembleMode::kAverage);
  const auto w_alpha = ensemble_weights(manifest, EnsembleMode::kAlpha);
  const bool any_alpha =
      std::any_of(w_alpha.begin(), w_alpha.end(), [](double w) { return w > 0; });
  for_each_batch(data, [&](const auto& idx, const Tensor<float>& x) {
    std::vector<Tensor<float>> maps;
    for (const auto& e : manifest.entries) {
      maps.push_back(learner_prediction(model, e.eta, e.depth, x));
    }
    for (std::size_t d = 0; d < t; ++d) {
      add_labels(learners[d], argmax_labels(maps[d]), data, idx);
    }
    add_labels(avg, ensemble_combine<float>(maps, w_avg).labels, data, idx);
    if (any_alpha) add_labels(alpha, ensemble_combine<float>(maps, w_alpha).labels, data, idx);
  });

  EvalReport report;
  if (mode == EvalMode::kAll || mode == EvalMode::kPerLearner) {
    for (std::size_t d = 0; d < t; ++d) {
      report.rows.push_back({"UNet" + std::to_string(manifest.entries[d].depth),
                             manifest.entries[d].alpha, learners[d].miou(),
                             learners[d].per_class_iou()});
    }
  }
  if (mode == EvalMode::kAll || mode == EvalMode::kAverage) {
    report.rows.push_back({"ens(avg)", 0.0, avg.miou(), avg.per_class_iou()});
  }
  if (mode == EvalMode::kAlpha && !any_alpha) {
    throw StateError("every learner was discarded; ens(alpha) is undefined");
  }
  if (mode == EvalMode::kAll || mode == EvalMode::kAlpha) {
    if (any_alpha) {
      report.rows.push_back({"ens(alpha)", 0.0, alpha.miou(), alpha.per_class_iou()});
    } else {
      report.notes.push_back("every learner was discarded; ens(alpha) is undefined");
    }
  }
  return report;
}

// ---------------------------------------------------------------- analyze

AnalyzeReport cmd_analyze(const fs::path& run_dir, const AnalyzeOptions& options) {
  const fs::path out = options.out.empty() ? run_dir / "analysis" : options.out;
  fs::create_directories(out);
  AnalyzeReport report;
  const auto config_path = run_dir / "config.json";
  if (!fs::exists(config_path)) {
    throw IoError("missing " + config_path.string() + " (not a run directory)");
  }
  const RunConfig config = RunConfig::read(config_path);
  const fs::path root =
      options.dataset.empty() ? run_dataset_root(run_dir, config) : fs::path(options.dataset);

  for (const auto& what : options.what) {
    if (what == "mask_stats") {
      const auto dataset = open_dataset(root);
      const auto data = load_dataset(dataset, options.mask_split);
      if (data.empty()) throw ValueError("split '" + options.mask_split + "' is empty");
      std::vector<std::vector<std::uint8_t>> masks;
      for (const auto& s : data) masks.push_back(s.labels);
      report.mask_stats = incorrect_label_ratio(masks, data.front().height(),
                                                data.front().width());
      report.mask_stats.write_csv(out / "mask_stats.csv");
      report.files.push_back(out / "mask_stats.csv");
    } else if (what == "cka") {
      const auto manifest_path = run_dir / "ensemble.manifest";
      if (!fs::exists(manifest_path)) {
        throw IoError("missing " + manifest_path.string() + " (train the run first)");
      }
      const auto manifest = EnsembleManifest::load(manifest_path);
      const auto dataset = open_dataset(root);
      auto data = load_dataset(dataset, options.split);
      if (data.size() < 2) throw ValueError("cka needs at least 2 probe images");
      std::vector<std::size_t> idx(std::min<std::size_t>(options.probe, data.size()));
      std::iota(idx.begin(), idx.end(), 0);
      const auto probe = stack_images(data, idx);
      auto model = load_model(manifest.model, run_dir / manifest.entries.back().checkpoint);
      report.block_cka =
          cka_matrix(block_activations(model, manifest.entries.back().depth, probe));
      report.learner_cka = cka_matrix(learner_activations(manifest, model, probe));
      report.block_cka.write_csv(out / "cka_blocks.csv");
      render_heatmap(report.block_cka, out / "cka_blocks.png");
      report.learner_cka.write_csv(out / "cka_learners.csv");
      render_heatmap(report.learner_cka, out / "cka_learners.png");
      for (const char* f : {"cka_blocks.csv", "cka_blocks.png", "cka_learners.csv",
                            "cka_learners.png"}) {
        report.files.push_back(out / f);
      }
      if (!options.compare.empty()) {
        const auto other = EnsembleManifest::load(options.compare / "ensemble.manifest");
        auto other_model =
            load_model(other.model, options.compare / other.entries.back().checkpoint);
        const auto diff =
            cka_diff(report.learner_cka, cka_matrix(learner_activations(other, other_model, probe)));
        diff.write_csv(out / "cka_learners_diff.csv");
        render_heatmap(diff, out / "cka_learners_diff.png", -1.0, 1.0);
        report.files.push_back(out / "cka_learners_diff.csv");
        report.files.push_back(out / "cka_learners_diff.png");
      }
    } else if (what == "eta_plots") {
      const auto log_path = run_dir / "eta_log.csv";
      if (!fs::exists(log_path)) {
        throw IoError("missing " + log_path.string() +
                      " (written by train after each completed stage)");
      }
      const auto rows = read_csv(log_path);
      // stage -> block -> (eta, eta_tilde) per epoch, blocks in logged order
      std::map<int, std::vector<std::pair<EtaSeries, EtaSeries>>> stages;
      std::map<int, std::pair<double, double>> bounds;
      for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.size() != 8) {
          throw IoError(log_path.string() + ": malformed row " + std::to_string(r + 1));
        }
        const int stage = std::stoi(row[0]);
        const std::string label =
            GridIndex{std::stoi(row[2]), std::stoi(row[3])}.str();
        const double eta = std::stod(row[4]);
        const double tilde = std::stod(row[5]);
        const double lower = std::stod(row[6]);
        const double upper = std::stod(row[7]);
        bounds[stage] = {lower, upper};
        auto& series = stages[stage];
        auto it = std::find_if(series.begin(), series.end(),
                               [&](const auto& s) { return s.first.label == label; });
        if (it == series.end()) {
          series.push_back({{label, {}}, {label, {}}});
          it = series.end() - 1;
        }
        it->first.values.push_back(eta);
        it->second.values.push_back(tilde);
        report.eta_bound_violation =
            std::max({report.eta_bound_violation, lower - tilde, tilde - upper});
      }
      for (auto& [stage, series] : stages) {
        std::vector<EtaSeries> eta;
        std::vector<EtaSeries> tilde;
        for (auto& [e, t] : series) {
          eta.push_back(e);
          tilde.push_back(t);
        }
        const auto s = std::to_string(stage);
        render_eta_plot(eta, out / ("eta_stage" + s + ".png"), "eta, UNet" + s);
        render_eta_plot(tilde, out / ("eta_tilde_stage" + s + ".png"),
                        "eta-tilde, UNet" + s, true, bounds[stage].first,
                        bounds[stage].second);
        report.files.push_back(out / ("eta_stage" + s + ".png"));
        report.files.push_back(out / ("eta_tilde_stage" + s + ".png"));
      }
    } else {
      throw ConfigError("unknown analysis '" + what +
                        "' (expected cka, mask_stats or eta_plots)");
    }
  }
  return report;
}

}  // namespace adsunet
