#include <doctest.h>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "adsunet/run.hpp"
#include "json.hpp"
#include "support/helpers.hpp"

using namespace adsunet;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config(const fs::path& out, int depth = 2) {
  RunConfig c;
  c.synthetic.classes = 2;
  c.synthetic.tile = 32;
  c.synthetic.cells = 4;
  c.synthetic.noise = 0.0;
  c.synthetic_train = 16;
  c.synthetic_test = 4;
  c.max_depth = depth;
  c.epochs = 3;
  c.lr = 1e-2;
  c.base_filters = 4;
  c.batch_size = 4;
  c.output = out.string();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

struct CliResult {
  int status = 0;
  std::string err;
};

CliResult run_cli(const std::string& args, const fs::path& scratch) {
  const char* cli = std::getenv("ADSUNET_CLI");
  REQUIRE_MESSAGE(cli != nullptr, "ADSUNET_CLI must point to the command-line tool");
  const auto err = scratch / "stderr.txt";
  const std::string cmd = std::string(cli) + " " + args + " > /dev/null 2> " + err.string();
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(err)};
}

}  // namespace

TEST_CASE("config survives a JSON round trip") {
  std::mt19937_64 g(51);
  for (int trial = 0; trial < 50; ++trial) {
    RunConfig c;
    c.max_depth = 1 + trial % 5;
    c.epochs = 1 + trial % 7;
    if (trial % 3 == 0) c.stage_epochs.assign(c.max_depth, 2 + trial % 4);
    c.lr = std::uniform_real_distribution<double>(1e-5, 1e-2)(g);
    c.weight_decay = std::uniform_real_distribution<double>(0, 1e-5)(g);
    c.schedule = trial % 2 ? "constant" : "one_cycle";
    c.eta_mode = static_cast<EtaMode>(trial % 3);
    c.deep_supervision = trial % 2;
    c.scse = trial % 3 != 0;
    c.reweighting = trial % 5 != 0;
    c.resample = trial % 7 == 0;
    c.ensemble_mode = trial % 2 ? EnsembleMode::kAverage : EnsembleMode::kAlpha;
    c.seed = g();
    c.synthetic.seed = g();
    c.synthetic.noise = std::uniform_real_distribution<double>(0, 1)(g);
    if (trial % 4 == 0) c.synthetic.textures = c.synthetic.resolved_textures();
    c.output = "out" + std::to_string(trial);
    const auto back = RunConfig::from_json(c.to_json());
    CHECK(back == c);
    CHECK(back.lr == c.lr);
    CHECK(back.seed == c.seed);
    CHECK(back.stage_epochs == c.stage_epochs);
  }
}

TEST_CASE("validation lists every problem") {
  RunConfig c;
  c.max_depth = 0;
  c.lr = -1;
  c.schedule = "cosine";
  CHECK(c.problems().size() >= 3);
  CHECK_THROWS_AS(c.validate(), ConfigError);

  RunConfig tile;
  tile.synthetic.tile = 40;
  tile.max_depth = 4;
  CHECK_THROWS_WITH_AS(tile.validate(), doctest::Contains("not divisible by 2^4"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json("{not json"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(R"({"model": {"max_depth": "four"}})"), ConfigError);
}

TEST_CASE("the command-line tool reports failures as a JSON record") {
  const auto dir = testing::scratch_dir("cli_error");
  const auto r = run_cli("train --out " + (dir / "run").string() + " --depth 4 --tile 40", dir);
  CHECK(r.status != 0);
  const auto record = nlohmann::json::parse(r.err);
  CHECK(record["error"]["kind"] == "config");
  CHECK(record["error"]["message"].get<std::string>().find("divisible") != std::string::npos);

  const auto missing = run_cli("eval --run " + (dir / "nothing").string(), dir);
  CHECK(missing.status != 0);
  CHECK(nlohmann::json::parse(missing.err)["error"]["message"].get<std::string>().find(
            "ensemble.manifest") != std::string::npos);
}

TEST_CASE("a tiny run writes every artefact and evaluates") {
  const auto dir = testing::scratch_dir("tiny_run");
  const auto config = tiny_config(dir / "run");
  const auto summary = cmd_train(config);
  CHECK(summary.completed == 2);
  for (const char* f : {"config.json", "stage_1.bin", "stage_2.bin", "stage_1.manifest",
                        "boost_state.txt", "eta_log.csv", "boost_log.csv", "metrics.csv",
                        "ensemble.manifest"}) {
    CHECK_MESSAGE(fs::exists(dir / "run" / f), f);
  }
  CHECK(RunConfig::read(dir / "run" / "config.json") == [&] {
    auto c = config;
    c.synthetic.max_depth = c.max_depth;
    return c;
  }());

  const auto boost_log = csv_rows(dir / "run" / "boost_log.csv");
  CHECK(boost_log[0] == std::vector<std::string>{"stage", "epoch", "train_loss", "error", "alpha",
                                                 "discarded", "min_weight", "max_weight"});
  CHECK(boost_log.size() == 7);  // header + three epochs per stage

  const auto report = cmd_eval(dir / "run");
  for (const char* m : {"UNet1", "UNet2", "ens(avg)", "ens(alpha)"}) CHECK_NOTHROW(report.row(m));
  for (const auto& row : report.rows) {
    CHECK(row.miou >= 0.0);
    CHECK(row.miou <= 1.0);
    CHECK(row.per_class.size() == 2);
  }
  report.write_csv(dir / "eval.csv");
  CHECK(csv_rows(dir / "eval.csv")[0] ==
        std::vector<std::string>{"model", "alpha", "miou", "iou_0", "iou_1"});

  // Equal alphas make the alpha ensemble coincide with the average one.
  auto manifest = EnsembleManifest::load(dir / "run" / "ensemble.manifest");
  for (auto& e : manifest.entries) e.alpha = 0.37;
  manifest.save(dir / "run" / "ensemble.manifest");
  const auto equal = cmd_eval(dir / "run");
  CHECK(equal.row("ens(alpha)").miou == equal.row("ens(avg)").miou);
}

TEST_CASE("a singleton ensemble gives identical per-learner and alpha scores") {
  const auto dir = testing::scratch_dir("singleton_run");
  cmd_train(tiny_config(dir / "run", 1));
  const auto report = cmd_eval(dir / "run");
  CHECK(report.row("UNet1").miou == report.row("ens(alpha)").miou);
  CHECK(report.row("UNet1").per_class == report.row("ens(alpha)").per_class);
}

TEST_CASE("eval rejects a dataset with a different class count") {
  const auto dir = testing::scratch_dir("eval_mismatch");
  cmd_train(tiny_config(dir / "run", 1));
  SyntheticSpec other;
  other.classes = 3;
  other.tile = 16;
  other.max_depth = 1;
  generate_synthetic(other, dir / "other", 2, 2);
  CHECK_THROWS_AS(cmd_eval(dir / "run", (dir / "other").string()), ConfigError);
}

TEST_CASE("training on plain image and mask folders writes their manifest") {
  const auto dir = testing::scratch_dir("plain_folders");
  const auto base = tiny_config(dir / "run", 1);
  generate_synthetic(base.synthetic, dir / "data", 8, 2);
  fs::remove(dir / "data" / "manifest.txt");
  auto c = base;
  c.dataset = (dir / "data").string();
  cmd_train(c);
  const auto scanned = DatasetManifest::read(dir / "data");
  CHECK(scanned.classes == 2);
  CHECK(scanned.tile == 32);
  CHECK(scanned.split("train").size() == 8);
  CHECK(scanned.split("test").size() == 2);
  CHECK(fs::exists(dir / "run" / "ensemble.manifest"));
}

TEST_CASE("a held lock blocks a second training run") {
  const auto dir = testing::scratch_dir("locked_run");
  fs::create_directories(dir / "run");
  const int fd = ::open((dir / "run" / "run.lock").c_str(), O_CREAT | O_RDWR, 0644);
  REQUIRE(fd >= 0);
  REQUIRE(::flock(fd, LOCK_EX | LOCK_NB) == 0);
  CHECK_THROWS_AS(cmd_train(tiny_config(dir / "run", 1)), StateError);
  ::flock(fd, LOCK_UN);
  ::close(fd);
}

TEST_CASE("a run directory refuses a different config") {
  const auto dir = testing::scratch_dir("config_clash");
  cmd_train(tiny_config(dir / "run", 1));
  auto other = tiny_config(dir / "run", 1);
  other.lr = 5e-3;
  CHECK_THROWS_AS(cmd_train(other), ConfigError);
}

TEST_CASE("mask statistics of constant masks are all zero") {
  const auto dir = testing::scratch_dir("constant_masks");
  SyntheticSpec spec;
  spec.cells = 1;  // one site: every tile holds a single class
  spec.tile = 32;
  generate_synthetic(spec, dir / "data", 5, 1);
  RunConfig c = tiny_config(dir / "run", 1);
  c.dataset = (dir / "data").string();
  fs::create_directories(dir / "run");
  c.write(dir / "run" / "config.json");
  AnalyzeOptions opts;
  opts.what = {"mask_stats"};
  const auto report = cmd_analyze(dir / "run", opts);
  REQUIRE(report.mask_stats.factors == std::vector<int>{2, 4, 8, 16});
  for (auto m : report.mask_stats.mixed_windows) CHECK(m == 0);
  const auto rows = csv_rows(dir / "run" / "analysis" / "mask_stats.csv");
  REQUIRE(rows.size() == 5);
  for (std::size_t r = 1; r < rows.size(); ++r) CHECK(std::stod(rows[r][3]) == 0.0);
}

TEST_CASE("analysis of a bounded run: CKA diagonal, eta plots inside the band") {
  const auto dir = testing::scratch_dir("analyze_run");
  const auto config = tiny_config(dir / "run", 3);
  cmd_train(config);
  AnalyzeOptions opts;
  opts.what = {"cka", "eta_plots"};
  opts.probe = 4;
  opts.compare = dir / "run";
  const auto report = cmd_analyze(dir / "run", opts);
  for (int i = 0; i < report.learner_cka.values.rows(); ++i) {
    CHECK(report.learner_cka.values(i, i) == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(report.learner_cka.labels == std::vector<std::string>{"UNet1", "UNet2", "UNet3"});
  for (int i = 0; i < report.block_cka.values.rows(); ++i) {
    CHECK(report.block_cka.values(i, i) == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(fs::exists(dir / "run" / "analysis" / "cka_learners_diff.png"));
  for (int d = 1; d <= 3; ++d) {
    CHECK(fs::exists(dir / "run" / "analysis" / ("eta_tilde_stage" + std::to_string(d) + ".png")));
  }
  // Bounds recomputed from the block count of each stage.
  const auto rows = csv_rows(dir / "run" / "eta_log.csv");
  REQUIRE(rows.size() > 1);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const int blocks = std::stoi(rows[r][0]) + 1;
    const double tilde = std::stod(rows[r][5]);
    CHECK(tilde >= 1.0 / (2.0 * blocks) - 1e-9);
    CHECK(tilde <= 0.5 + 1.0 / (2.0 * blocks) + 1e-9);
  }
  CHECK(report.eta_bound_violation <= 1e-9);

  fs::remove(dir / "run" / "eta_log.csv");
  opts.what = {"eta_plots"};
  CHECK_THROWS_WITH_AS(cmd_analyze(dir / "run", opts), doctest::Contains("eta_log.csv"), IoError);
  opts.what = {"histogram"};
  CHECK_THROWS_AS(cmd_analyze(dir / "run", opts), ConfigError);
}

TEST_CASE("stopping after a stage and resuming matches an uninterrupted run") {
  const auto dir = testing::scratch_dir("resume_run");
  const auto full = tiny_config(dir / "full", 3);
  cmd_train(full);
  const auto part = tiny_config(dir / "part", 3);
  TrainOptions stop;
  stop.stop_after = 1;
  CHECK(cmd_train(part, stop).completed == 1);
  CHECK_FALSE(fs::exists(dir / "part" / "stage_2.bin"));
  const auto resumed = cmd_train(part);
  CHECK(resumed.first_stage == 2);
  for (const char* f : {"ensemble.manifest", "metrics.csv", "boost_log.csv", "eta_log.csv",
                        "boost_state.txt", "stage_3.bin"}) {
    CHECK_MESSAGE(slurp(dir / "full" / f) == slurp(dir / "part" / f), f);
  }
}

TEST_CASE("all toggles off trains the plain ensemble") {
  const auto dir = testing::scratch_dir("model0_run");
  auto c = tiny_config(dir / "run", 2);
  c.deep_supervision = false;
  c.scse = false;
  c.reweighting = false;
  c.ensemble_mode = EnsembleMode::kAverage;
  cmd_train(c);
  const auto manifest = EnsembleManifest::load(dir / "run" / "ensemble.manifest");
  for (const auto& e : manifest.entries) {
    REQUIRE(e.eta.size() == 1);
    CHECK(e.eta.blocks[0] == GridIndex{0, e.depth});
  }
  const auto boost = BoostState::load(dir / "run" / "boost_state.txt");
  for (double w : boost.sample_weights) CHECK(w == doctest::Approx(1.0 / 16));
}
