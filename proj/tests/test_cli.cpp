#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "modguard/config.hpp"
#include "modguard/dataset_io.hpp"
#include "modguard/experiment.hpp"

#ifndef MODGUARD_CLI_PATH
#error "MODGUARD_CLI_PATH must point at the modguard executable"
#endif

using namespace modguard;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("modguard_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Exit status of the CLI with the given arguments; output goes to `log`.
int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(MODGUARD_CLI_PATH) + " --quiet " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

} // namespace

TEST_CASE("config parser") {
  const auto c = config::Config::parse(R"(
seed = 7   # root
[data]
classes = ["BPSK", "QPSK"]
snr_db = [10]
split_ratio = 0.5
[eval]
pnr_db = [-inf, -10, 1_000]
label = "a # b"
quick = true
)");
  CHECK(c.seed("seed") == 7);
  CHECK(c.texts("data.classes", {}) == std::vector<std::string>{"BPSK", "QPSK"});
  const auto grid = c.numbers("eval.pnr_db", {});
  REQUIRE(grid.size() == 3);
  CHECK(std::isinf(grid[0]));
  CHECK(grid[2] == 1000.0);
  CHECK(c.text("eval.label", "") == "a # b");
  CHECK(c.flag("eval.quick", false));
  CHECK(c.number("missing.key", 2.5) == 2.5);
  const auto unused = c.unused_keys();
  CHECK(unused == std::vector<std::string>{"data.snr_db", "data.split_ratio"});
  CHECK_THROWS_AS(c.count("data.split_ratio", 0), FormatError);
  CHECK_THROWS_AS(c.number("data.classes", 0), FormatError);
  CHECK_THROWS_AS(c.seed("nope"), FormatError);
}

TEST_CASE("config parser errors carry line numbers") {
  auto message = [](const std::string& text) {
    try {
      config::Config::parse(text);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("a = 1\nb 2\n").find("line 2") != std::string::npos);
  CHECK(message("[x\n").find("line 1") != std::string::npos);
  CHECK(message("a = 1\na = 2\n").find("line 2") != std::string::npos);
  CHECK(message("x = 0\n\na = \"open\n").find("line 3") != std::string::npos);
  CHECK(message("a = 1.2.3\n").find("line 1") != std::string::npos);
  CHECK(message("a = 1.2.3\n").find("config") == 0);
}

TEST_CASE("config overrides and canonical form") {
  auto a = config::Config::parse("seed = 1\n[train]\nepochs = 3\n");
  auto b = config::Config::parse("[train]\nepochs = 3\n\nseed = 1\n");
  CHECK(a.canonical() != b.canonical());  // different keys: b has train.seed
  auto c = config::Config::parse("[train]\nepochs = 3\n");
  c.override_with("seed=1");
  CHECK(c.canonical() == a.canonical());
  a.override_with("train.epochs=9");
  CHECK(a.count("train.epochs", 0) == 9);
  CHECK_THROWS_AS(a.override_with("no_equals"), InvalidArgument);
}

TEST_CASE("experiment config resolution") {
  auto c = config::Config::parse("seed = 5\n[cat]\neps_max_fraction = 0.1\nlevels = 10\nc_eps_max = 0.5\n");
  const auto e = ExperimentConfig::from(c);
  CHECK(e.seed == 5);
  CHECK(e.train.seed == substream_seed(5, "train"));
  const auto r = e.cat.resolve(10.0);
  CHECK(r.eps_max == Catch::Approx(1.0));
  CHECK(r.eta == Catch::Approx(0.1));
  CHECK(r.c == Catch::Approx(0.5));
  auto other = c;
  other.override_with("train.epochs=3");
  CHECK(ExperimentConfig::from(other).hash() != e.hash());
  CHECK(ExperimentConfig::from(c).hash() == e.hash());

  CatParams bad;
  bad.eta = 0.005;
  bad.c = 10.0;
  CHECK_THROWS_AS(bad.resolve(11.3), InvalidArgument);
  auto two_snr = config::Config::parse("seed = 1\n[data]\nsnr_db = [0, 10]\n");
  CHECK_THROWS_AS(ExperimentConfig::from(two_snr), InvalidArgument);
  auto no_seed = config::Config::parse("[data]\nframe_length = 64\n");
  CHECK_THROWS_AS(ExperimentConfig::from(no_seed), FormatError);
}

TEST_CASE("held-out splits and balanced prefixes") {
  DatasetConfig cfg;
  cfg.classes = {"BPSK", "QPSK", "8PSK"};
  cfg.frames_per_cell = 20;
  cfg.n = 16;
  cfg.seed = 3;
  const auto d = gen_dataset(cfg);
  const auto held = held_out_splits(d);
  CHECK(held.calibration.size() == 15);
  CHECK(held.evaluation.size() == 15);
  for (auto i : held.calibration) CHECK(std::find(held.evaluation.begin(), held.evaluation.end(), i) == held.evaluation.end());
  const auto pre = balanced_prefix(d, held.evaluation, 6);
  REQUIRE(pre.size() == 6);
  std::vector<int> per_class(3, 0);
  for (auto i : pre) ++per_class[d.frames[i].label];
  CHECK(per_class == std::vector<int>{2, 2, 2});
}

TEST_CASE("CLI usage errors") {
  const auto dir = scratch("errors");
  const auto log = dir / "log.txt";
  CHECK(cli("", log) != 0);
  CHECK(cli("gen-data --seed 1 --bogus-flag 3", log) != 0);
  CHECK(cli("gen-data", log) != 0);  // --seed is required
  CHECK(cli("train --data " + (dir / "missing.mgd").string() + " --seed 1", log) != 0);
  CHECK(cli("gen-data --seed 1 --frames-per-cell 2 --classes NOPE --out " + (dir / "x.mgd").string(), log) == 2);
  CHECK_FALSE(fs::exists(dir / "x.mgd"));
}

TEST_CASE("CLI end to end on a tiny dataset") {
  const auto dir = scratch("pipeline");
  const auto log = dir / "log.txt";
  const auto data = (dir / "d.mgd").string();
  const std::string gen = "gen-data --seed 11 --classes BPSK,QPSK,GFSK --frames-per-cell 140 --frame-length 32 ";
  REQUIRE(cli(gen + "--out " + data + " --metadata-csv " + (dir / "meta.csv").string(), log) == 0);
  REQUIRE(cli(gen + "--out " + (dir / "d2.mgd").string(), log) == 0);
  CHECK(slurp(data) == slurp(dir / "d2.mgd"));
  CHECK(fs::exists(data + ".meta.json"));
  CHECK(slurp(dir / "meta.csv").rfind("# modguard config_hash=", 0) == 0);
  CHECK(load_dataset(data).frames.size() == 420);

  SECTION("train, calibrate, attack, eval, viz") {
    const auto model = (dir / "m.mgm").string();
    REQUIRE(cli("train --data " + data + " --seed 2 --epochs 3 --out " + model, log) == 0);
    CHECK(line_count(slurp(model + ".log.jsonl")) == 3);
    CHECK(slurp(model + ".log.jsonl").find("\"mean_eps\"") != std::string::npos);

    const auto cat = (dir / "cat.mgm").string();
    CHECK(cli("train --data " + data + " --method cat --seed 2 --epochs 1 --eta 0.005 --c 10 --out " + cat, log) == 2);
    CHECK(slurp(log).find("c * eps_max") != std::string::npos);
    CHECK_FALSE(fs::exists(cat));
    REQUIRE(cli("train --data " + data + " --method cat --seed 2 --epochs 2 --eps-max-fraction 0.1 --out " + cat, log) == 0);

    const auto svm = (dir / "r.mgs").string();
    REQUIRE(cli("--json calibrate --data " + data + " --model " + cat + " --out " + svm, log) == 0);
    CHECK(slurp(log).find("\"threshold\"") != std::string::npos);

    const auto ae = (dir / "ae.mga").string();
    REQUIRE(cli("train --data " + data + " --method ae --seed 2 --ae-epochs 2 --out " + ae, log) == 0);
    REQUIRE(cli("calibrate --data " + data + " --ae " + ae, log) == 0);

    REQUIRE(cli("attack --defense htrd --data " + data + " --model " + cat + " --svm " + svm +
                    " --pnr-db -10,0 --frames 12 --iters 5 --out " + dir.string(), log) == 0);
    const auto adv = load_dataset((dir / "adv_htrd_pnr-10.mgd").string());
    CHECK(adv.provenance == Provenance::Adversarial);
    CHECK(adv.frames.size() == 12);
    CHECK(fs::exists(dir / "adv_htrd_pnr0.mgd"));
    CHECK(cli("attack --defense htrd --data " + data + " --model " + cat + " --pnr-db 0", log) != 0);

    const auto curve = (dir / "curve.csv").string();
    REQUIRE(cli("eval --variant twofold --data " + data + " --model " + model + " --ae " + ae +
                    " --pnr-db -20,-10 --frames 9 --iters 5 --out " + curve, log) == 0);
    const auto text = slurp(curve);
    CHECK(text.rfind("# modguard config_hash=", 0) == 0);
    const auto curves = curves_from_csv(text);
    REQUIRE(curves.size() == 1);
    CHECK(curves[0].points.size() == 3);

    REQUIRE(cli("viz --curves " + curve + " --data " + data + " --model " + cat + " --out " + (dir / "v").string(), log) == 0);
    CHECK(fs::exists(dir / "v_curves.svg"));
    CHECK(fs::exists(dir / "v_pca.csv"));
  }

  SECTION("repro rejects unknown keys and is deterministic") {
    const auto cfg = dir / "tiny.toml";
    std::ofstream(cfg) << "seed = 4\n[data]\nclasses = [\"BPSK\", \"QPSK\", \"GFSK\"]\nframes_per_cell = 140\n"
                          "frame_length = 32\n[train]\nepochs = 2\n[twofold]\nae_epochs = 2\n"
                          "[attack]\nframes = 12\niters = 5\n[cat]\neps_max_fraction = 0.1\n";
    std::ofstream(dir / "typo.toml") << "seed = 4\n[train]\nepoch = 2\n";
    CHECK(cli("repro --config " + (dir / "typo.toml").string(), log) != 0);
    CHECK(slurp(log).find("train.epoch") != std::string::npos);
    REQUIRE(cli("repro --config " + cfg.string() + " --out " + (dir / "a").string(), log) == 0);
    REQUIRE(cli("--threads 1 repro --config " + cfg.string() + " --out " + (dir / "b").string(), log) == 0);
    for (const char* f : {"curves.csv", "clean_accuracy.csv", "calibration.csv", "separation.csv", "pca_cat.csv"})
      CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
    CHECK(fs::exists(dir / "a" / "curves.svg"));
  }
}
