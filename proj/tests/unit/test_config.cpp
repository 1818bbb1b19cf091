#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "swinscale/config.hpp"

using namespace swinscale;
namespace fs = std::filesystem;

namespace {

const char* kBase = R"({
  "output_dir": "runs/a",
  "dataset": {
    "path": "data/x",
    "grid": {"n_lat": 10, "n_lon": 16},
    "process": {"n_channels": 2, "rotation_rates": [0.1, 0.2], "diffusivities": [0, 0],
                "band_limit": 4, "seed": 3},
    "splits": {"train": 20, "val": 6, "test": 6}
  },
  "model": {"embed": 8, "depth": 2, "window_h": 2, "window_w": 2, "head_dim": 4},
  "train": {"batch_size": 4, "loss": "ar{3}"},
  "schedule": {"warmup_iters": 5, "total_iters": 100},
  "seeds": {"init": 9, "data": 4}
})";

std::string error_of(const std::string& text, const std::vector<std::string>& overrides = {}) {
  try {
    parse_config(text, overrides);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, ParsesSectionsAndDerivesModelGrid) {
  const auto c = parse_config(kBase);
  EXPECT_EQ(c.output_dir, fs::path("runs/a"));
  ASSERT_TRUE(c.dataset.has_value());
  ASSERT_TRUE(c.dataset->generation.has_value());
  const auto& g = *c.dataset->generation;
  EXPECT_EQ(g.n_lat, 10);
  EXPECT_EQ(g.splits.train_end, 20);
  EXPECT_EQ(g.splits.val_end, 26);
  EXPECT_EQ(g.splits.total, 32);
  ASSERT_EQ(c.models.size(), 1u);
  // 10 latitude rows trimmed to a multiple of the patch; channels from the process.
  EXPECT_EQ(c.model().grid_h, 8);
  EXPECT_EQ(c.model().grid_w, 16);
  EXPECT_EQ(c.model().in_channels, 2);
  EXPECT_EQ(c.train.batch_size, 4);
  EXPECT_EQ(c.train.loss, LossSpec::parse("ar3"));
  EXPECT_EQ(c.train.seed, 4u);
  EXPECT_EQ(c.init_seed, 9u);
  EXPECT_EQ(c.schedule.total_iters, 100);
  // Untouched fields keep their defaults.
  EXPECT_EQ(c.schedule.cooldown_frac, LRScheduleSpec{}.cooldown_frac);
}

TEST(Config, ErrorsNameTheFieldPath) {
  EXPECT_NE(error_of(kBase, {"train.batch_size=\"x\""}).find("train.batch_size"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"train.batch_size=0"}).find("train"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"model.embedding=8"}).find("model.embedding: unknown field"),
            std::string::npos);
  EXPECT_NE(error_of(kBase, {"dataset.process.band_limit=40"}).find("dataset.process"),
            std::string::npos);
  EXPECT_NE(error_of(kBase, {"dataset.splits.val=-1"}).find("dataset.splits"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"train.loss=\"l1\""}).find("train.loss"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"sweep.budgets=[3, 2]"}).find("sweep.budgets"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"eval.split=\"train\""}).find("eval.split"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"model.head_dim=3"}).find("models[0]"), std::string::npos);
  EXPECT_NE(error_of(R"({"models": [{"embed": 8}, {"embed": "wide"}]})").find("models[1].embed"),
            std::string::npos);
  EXPECT_NE(error_of("{not json").find("not valid JSON"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"models=[]"}).find("models"), std::string::npos);
}

TEST(Config, OverridesCreateAndReplaceFields) {
  const auto c = parse_config(kBase, {"schedule.peak_lr=0.01", "train.loss=amse", "output_dir=elsewhere",
                                      "sweep.budgets=[1e12, 3e12]", "eval.spectrum_leads=[1,6]"});
  EXPECT_EQ(c.schedule.peak_lr, 0.01);
  EXPECT_EQ(c.train.loss.kind, LossKind::amse);
  EXPECT_EQ(c.output_dir, fs::path("elsewhere"));
  EXPECT_EQ(c.sweep.budgets, (std::vector<double>{1e12, 3e12}));
  EXPECT_EQ(c.eval.spectrum_leads, (std::vector<int>{1, 6}));
  const auto m = parse_config(R"({"models": [{"embed": 16}, {"embed": 32}]})", {"models.1.embed=48"});
  EXPECT_EQ(m.models[1].embed, 48);
  EXPECT_THROW(parse_config(kBase, {"noequals"}), ConfigError);
  EXPECT_THROW(parse_config(R"({"models": [{"embed": 8}]})", {"models.3.embed=16"}), ConfigError);
}

TEST(Config, HashIgnoresOutputDirButNotContent) {
  const auto a = parse_config(kBase);
  EXPECT_EQ(a.hash(), parse_config(kBase, {"output_dir=other"}).hash());
  EXPECT_NE(a.hash(), parse_config(kBase, {"seeds.init=10"}).hash());
  EXPECT_NE(a.hash(), parse_config(kBase, {"dataset.process.seed=4"}).hash());
  // The canonical form parses back to the same configuration.
  const auto back = parse_config(a.to_json());
  EXPECT_EQ(back.hash(), a.hash());
  EXPECT_EQ(back.to_json(), a.to_json());
}

TEST(Config, ModelAccessorNeedsExactlyOne) {
  const auto two = parse_config(R"({"models": [{"embed": 16}, {"embed": 32}]})");
  EXPECT_THROW(two.model(), ConfigError);
  EXPECT_THROW(parse_config(R"({"model": {}, "models": [{}]})"), ConfigError);
}

TEST(Config, DatasetWithoutGenerationParameters) {
  const auto c = parse_config(R"({"dataset": {"path": "/abs/data"}})");
  ASSERT_TRUE(c.dataset.has_value());
  EXPECT_FALSE(c.dataset->generation.has_value());
  EXPECT_THROW(parse_config(R"({"dataset": {}})"), ConfigError);
}

TEST(Paths, ResolveAgainstOutputRoot) {
  ::setenv(kOutputRootEnv, "/tmp/swinscale_root", 1);
  EXPECT_EQ(resolve_path("runs/a"), fs::path("/tmp/swinscale_root/runs/a"));
  EXPECT_EQ(resolve_path("/abs/b"), fs::path("/abs/b"));
  ::unsetenv(kOutputRootEnv);
  EXPECT_EQ(resolve_path("runs/a"), fs::current_path() / "runs/a");
}

TEST(RunManifest, AtomicAppendOnly) {
  const auto dir = fs::temp_directory_path() / "swinscale_manifest_test";
  fs::remove_all(dir);
  EXPECT_FALSE(read_run_manifest(dir).has_value());
  RunManifest m;
  m.run_id = "train-abc";
  m.command = "train";
  m.config_hash = "abc";
  m.code_version = code_version();
  add_artifact(m, "a.bin");
  write_run_manifest(dir, m);
  EXPECT_FALSE(m.created.empty());
  add_artifact(m, "b.csv");
  add_artifact(m, "a.bin");  // duplicates are ignored
  m.status = "complete";
  write_run_manifest(dir, m);
  const auto back = read_run_manifest(dir);
  ASSERT_TRUE(back.has_value());
  EXPECT_EQ(back->artifacts, (std::vector<std::string>{"a.bin", "b.csv"}));
  EXPECT_EQ(back->status, "complete");
  EXPECT_EQ(back->code_version, code_version());
  EXPECT_FALSE(fs::exists(dir / "run_manifest.json.tmp"));

  RunManifest dropped = *back;
  dropped.artifacts = {"b.csv"};
  EXPECT_THROW(write_run_manifest(dir, dropped), Error);
  RunManifest other = *back;
  other.run_id = "train-def";
  EXPECT_THROW(write_run_manifest(dir, other), Error);
  RunManifest bad = *back;
  bad.status = "done";
  EXPECT_THROW(write_run_manifest(dir, bad), Error);
  fs::remove_all(dir);
}

TEST(RunManifest, CodeVersionIsAContentHash) {
  const auto v = code_version();
  EXPECT_EQ(v.size(), 16u);
  EXPECT_EQ(v.find_first_not_of("0123456789abcdef"), std::string::npos);
}

TEST(Config, ExampleConfigsParse) {
  const fs::path dir = SWINSCALE_CONFIG_DIR;
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_config(e.path())) << e.path();
    ++n;
  }
  EXPECT_GE(n, 3);
}
