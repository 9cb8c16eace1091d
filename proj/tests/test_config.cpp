#include "bcosnet/ablation.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

using namespace bcosnet;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(BCOSNET_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string tiny_cli_sets() {
  std::string s;
  const RunConfig tiny = tiny_run_config(), defaults;
  for (const auto& [k, v] : tiny.values())
    if (v != defaults.get(k)) s += " --set " + k + "=" + v;
  return s;
}

}  // namespace

TEST(Config, DefaultsCoverSchema) {
  RunConfig c;
  EXPECT_EQ(c.values().size(), config_schema().size());
  EXPECT_EQ(c.get("branches"), "local,global,gcp,ovr");
  EXPECT_EQ(c.count("data.height"), 256u);
  EXPECT_DOUBLE_EQ(c.real("gem.global_p"), 6.5);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, TextRoundTripPreservesHash) {
  auto c = tiny_run_config();
  c.set("loss.margin", "0.25");
  const auto back = RunConfig::from_text(c.canonical());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(back.values(), c.values());
  EXPECT_NE(c.hash(), RunConfig().hash());
  EXPECT_EQ(c.hash().size(), 64u);
}

TEST(Config, CommentsAndWhitespace) {
  const auto c = RunConfig::from_text("# header\n  seed = 7   # trailing\n\nbranches=local,global\n");
  EXPECT_EQ(c.integer("seed"), 7);
  EXPECT_EQ(c.branch_set("branches").size(), 2u);
}

TEST(Config, ReportsEveryProblemAtOnce) {
  try {
    RunConfig::from_text("bogus.key=1\ntrain.P=-3\nbranches=local,legs\nnot a pair\neval.distance=manhattan\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const char* needle : {"bogus.key", "train.P", "legs", "expected key=value", "manhattan"})
      EXPECT_NE(msg.find(needle), std::string::npos) << needle << "\n" << msg;
  }
}

TEST(Config, CrossFieldValidation) {
  auto c = tiny_run_config();
  c.set("data.height", "60");
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_run_config();
  c.set("train.K", "1");
  EXPECT_THROW(c.validate(), ConfigError);
  c.set("loss.triplet", "0");
  EXPECT_NO_THROW(c.validate());
  c = tiny_run_config();
  c.set("bottleneck_dim", "32");
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, EnvironmentSuppliesDataRoot) {
  RunConfig c;
  ::setenv(kDataRootEnv, "/data/market", 1);
  c.apply_environment();
  ::unsetenv(kDataRootEnv);
  EXPECT_EQ(c.get("data.root"), "/data/market");
  c.set("data.root", "");
  EXPECT_THROW(load_dataset(c), DataError);
}

TEST(Config, TypedConversions) {
  auto c = RunConfig::from_text("ovr_splits=6,4,2\nloss.triplet_mode=hinge_margin\nloss.margin=0.5\n");
  const auto m = c.model(10);
  EXPECT_EQ(m.ovr_splits, (std::vector<std::size_t>{6, 4, 2}));
  EXPECT_EQ(m.num_identities, 10u);
  EXPECT_EQ(c.objective().triplet.mode, TripletMode::hinge_margin);
  EXPECT_DOUBLE_EQ(c.objective().triplet.margin, 0.5);
  EXPECT_EQ(c.optim().second_milestone, 130u);
}

TEST(Ablation, GridExpansionIsCartesian) {
  const auto g = expand_grid({"gem.enabled=true|false", "ovr_splits=6|6,4,2"});
  ASSERT_EQ(g.rows.size(), 4u);
  std::set<std::vector<std::string>> seen;
  for (const auto& r : g.rows) seen.insert(r.overrides);
  EXPECT_EQ(seen.size(), 4u);
  EXPECT_THROW(expand_grid({}), ConfigError);
  EXPECT_THROW(expand_grid({"no.such.key=1|2"}), ConfigError);
}

TEST(Ablation, PresetsHaveTableRowStructure) {
  EXPECT_EQ(ablation_preset(2).rows.size(), 4u);
  EXPECT_EQ(ablation_preset(3).rows.size(), 2u);
  EXPECT_EQ(ablation_preset(4).rows.size(), 2u);
  EXPECT_EQ(ablation_preset(5).rows.size(), 2u);
  EXPECT_EQ(ablation_preset(2).rows.back().label, "local-global-gcp-OvR");
  EXPECT_THROW(ablation_preset(1), ConfigError);
  for (int t = 2; t <= 5; ++t)
    for (const auto& r : ablation_preset(t).rows) {
      RunConfig c;
      EXPECT_NO_THROW(c.apply_overrides(r.overrides)) << r.label;
    }
}

TEST(Ablation, FailingCellIsRecordedAndOthersRun) {
  const auto dir = scratch_dir("ablation_fail");
  AblationGrid g{"probe", {{"ok", {"seed=1"}}, {"bad", {"seed=2"}}, {"ok2", {"seed=3"}}}};
  const auto report = run_ablation(RunConfig(), g, dir, [](const RunConfig& c, const fs::path&) {
    if (c.integer("seed") == 2) throw NumericError("diverged");
    RetrievalResult r;
    r.mAP = 0.5;
    r.rank1 = 0.75;
    return r;
  });
  ASSERT_EQ(report.cells.size(), 3u);
  EXPECT_EQ(report.failures(), 1u);
  EXPECT_TRUE(report.cells[2].ok);
  EXPECT_NE(report.cells[1].error.find("diverged"), std::string::npos);
  const auto md = slurp(dir / "ablation.md");
  EXPECT_NE(md.find("ok2"), std::string::npos);
  EXPECT_NE(md.find("diverged"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "ablation.csv"));
}

TEST(Cli, HelpAndSchemaExitZero) {
  const auto dir = scratch_dir("cli_help");
  EXPECT_EQ(run_cli("--help", dir / "out"), 0);
  EXPECT_EQ(run_cli("train --help", dir / "out"), 0);
  EXPECT_EQ(run_cli("config", dir / "out"), 0);
  EXPECT_NE(slurp(dir / "out").find("optim.base_lr=0.00035"), std::string::npos);
}

TEST(Cli, ConfigErrorsExitTwo) {
  const auto dir = scratch_dir("cli_config");
  EXPECT_EQ(run_cli("train --set no.such.key=1 -o " + (dir / "run").string(), dir / "out"), 2);
  EXPECT_NE(slurp(dir / "out").find("no.such.key"), std::string::npos);
  EXPECT_EQ(run_cli("train --bogus-flag", dir / "out"), 2);
  EXPECT_EQ(run_cli("train -c " + (dir / "missing.cfg").string(), dir / "out"), 2);
  EXPECT_EQ(run_cli("ablate --table 9 -o " + (dir / "abl").string(), dir / "out"), 2);
}

TEST(Cli, DataErrorsExitThree) {
  const auto dir = scratch_dir("cli_data");
  ::unsetenv(kDataRootEnv);
  EXPECT_EQ(run_cli("train -o " + (dir / "run").string(), dir / "out"), 3);
  EXPECT_NE(slurp(dir / "out").find(kDataRootEnv), std::string::npos);
  EXPECT_EQ(run_cli("train --data-root /nonexistent/bcosnet -o " + (dir / "run").string(), dir / "out"), 3);
  EXPECT_EQ(run_cli("evaluate --checkpoint " + (dir / "none.ckpt").string() + tiny_cli_sets(), dir / "out"), 3);
}

TEST(Cli, TrainEvaluateExtractRoundTrip) {
  const auto dir = scratch_dir("cli_run");
  const auto run = dir / "run";
  const std::string sets = tiny_cli_sets() + " --set optim.epochs=3 --set optim.warmup_epochs=2" +
                           " --set optim.first_milestone=1 --set optim.second_milestone=2";
  ASSERT_EQ(run_cli("train -o " + run.string() + " --seed 5 --distance cosine" + sets, dir / "train.out"), 0)
      << slurp(dir / "train.out");
  const auto snap = RunConfig::from_file(run / "config.snapshot");
  EXPECT_EQ(snap.integer("seed"), 5);
  EXPECT_EQ(snap.get("eval.distance"), "cosine");
  std::ifstream mf(run / "metrics.json");
  const auto metrics = nlohmann::json::parse(mf);
  EXPECT_EQ(metrics["config_hash"], snap.hash());

  const auto ckpt = run / "checkpoints" / "last.ckpt";
  ASSERT_EQ(run_cli("evaluate --checkpoint " + ckpt.string() + " --out " + (dir / "eval.json").string(),
                    dir / "eval.out"),
            0)
      << slurp(dir / "eval.out");
  std::ifstream ef(dir / "eval.json");
  const auto eval = nlohmann::json::parse(ef);
  EXPECT_EQ(eval["mAP"], metrics["mAP"]);
  EXPECT_EQ(eval["distance"], "cosine");

  ASSERT_EQ(run_cli("extract --checkpoint " + ckpt.string() + " --split gallery --out " + (dir / "g.csv").string(),
                    dir / "extract.out"),
            0)
      << slurp(dir / "extract.out");
  const auto csv = slurp(dir / "g.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 32);
}
