#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "swinscale/sweep.hpp"
#include "swinscale/util.hpp"

using namespace swinscale;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model(int embed = 8) {
  ModelConfig c;
  c.in_channels = c.out_channels = 2;
  c.grid_h = 8;
  c.grid_w = 16;
  c.patch = 4;
  c.embed = embed;
  c.depth = 2;
  c.window_h = 2;
  c.window_w = 2;
  c.head_dim = 4;
  return c;
}

const TaskData& tiny_task() {
  static const TaskData task = [] {
    DatasetManifest m;
    m.n_lat = 8;
    m.n_lon = 16;
    m.process.n_channels = 2;
    m.process.band_limit = 5;
    m.process.seed = 3;
    m.process.rotation_rates = {0.3, -0.2};
    m.process.diffusivities = {1e-3, 0.0};
    m.process.time_period = 6;
    m.splits = {40, 52, 60};
    return prepare_task(generate_dataset(m));
  }();
  return task;
}

SweepSpec tiny_spec(std::vector<long> iterations, std::vector<ModelConfig> models = {tiny_model()}) {
  SweepSpec s;
  s.models = std::move(models);
  s.train.batch_size = 4;
  s.train.seed = 5;
  s.train.log_every = 4;
  s.train.val_rollout_steps = 2;
  s.train.val_ic_stride = 3;
  s.schedule.warmup_iters = 3;
  s.schedule.peak_lr = 3e-3;
  s.schedule.cooldown_frac = 0.25;
  s.init_seed = 11;
  const double per_iter = training_flops_per_sample(s.models[0]) * 4;
  for (long it : iterations) s.budgets.push_back(per_iter * static_cast<double>(it));
  return s;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("swinscale_sweep_" + name);
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST(SweepSpec, Validation) {
  auto s = tiny_spec({20, 40});
  EXPECT_NO_THROW(s.validate());
  auto bad = s;
  std::swap(bad.budgets[0], bad.budgets[1]);
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = s;
  bad.models.clear();
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = s;
  bad.budgets.clear();
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(SweepSpec, HashTracksTrajectoryFields) {
  const auto s = tiny_spec({20});
  auto t = s;
  t.train.seed = 6;
  EXPECT_NE(s.hash(), t.hash());
  t = s;
  t.budgets[0] *= 2;
  EXPECT_NE(s.hash(), t.hash());
  t = s;
  t.branch_losses = {LossSpec::parse("amse")};
  EXPECT_NE(s.hash(), t.hash());
  EXPECT_EQ(s.hash(), tiny_spec({20}).hash());
}

TEST(SweepSpec, PeakLrScaling) {
  auto s = tiny_spec({20});
  EXPECT_DOUBLE_EQ(s.peak_lr_for(s.models[0]), 3e-3);
  const double p = static_cast<double>(param_count(s.models[0]));
  s.lr_ref_params = 4 * p;
  EXPECT_NEAR(s.peak_lr_for(s.models[0]), 6e-3, 1e-15);
}

TEST(Sweep, SingleBranchEqualsTrainThenCooldown) {
  const auto& task = tiny_task();
  const Trainer trainer(task);
  const auto spec = tiny_spec({20});
  const auto rows = run_sweep(trainer, spec);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].status, "ok");
  EXPECT_EQ(rows[0].iterations, 20);
  EXPECT_EQ(rows[0].samples, 80);

  // The plain route: a constant+cooldown schedule to 20, checkpoint at t0,
  // then a cooldown branch from that checkpoint.
  LRScheduleSpec sch = spec.schedule;
  sch.total_iters = 20;
  TrainState s = init_train_state(spec.models[0], spec.train, sch, task, spec.init_seed);
  trainer.run(s, sch.cooldown_start());
  const auto br = trainer.branch_cooldown(s, 20, sch.cooldown_frac);
  EXPECT_EQ(rows[0].val_1step, br.final_losses.one_step);
  EXPECT_EQ(rows[0].val_6step, br.final_losses.multi_step);

  // And the uninterrupted run lands on the same parameters.
  TrainState direct = init_train_state(spec.models[0], spec.train, sch, task, spec.init_seed);
  trainer.run(direct, 20);
  EXPECT_EQ(direct.params.values, br.state.params.values);
}

TEST(Sweep, SmallerBudgetLogIsPrefixOfLarger) {
  const Trainer trainer(tiny_task());
  const auto d1 = fresh_dir("prefix1"), d2 = fresh_dir("prefix2");
  SweepOptions o1, o2;
  o1.run_dir = d1;
  o2.run_dir = d2;
  const auto r1 = run_sweep(trainer, tiny_spec({20}), o1);
  const auto r2 = run_sweep(trainer, tiny_spec({20, 40}), o2);
  const auto small = slurp(d1 / "model_00" / "constant_log.csv");
  const auto large = slurp(d2 / "model_00" / "constant_log.csv");
  ASSERT_FALSE(small.empty());
  ASSERT_GT(large.size(), small.size());
  EXPECT_EQ(large.substr(0, small.size()), small);
  // The shared branch is unaffected by the extra budget.
  ASSERT_EQ(r2.size(), 2u);
  EXPECT_EQ(r1[0], r2[0]);
  // Checkpoints at both cooldown starts.
  EXPECT_TRUE(fs::exists(d2 / "model_00" / "ckpt_00000015.bin"));
  EXPECT_TRUE(fs::exists(d2 / "model_00" / "ckpt_00000030.bin"));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Sweep, ResumeSkipsFinishedBranches) {
  const Trainer trainer(tiny_task());
  const auto dir = fresh_dir("resume");
  const auto spec = tiny_spec({20, 40});
  SweepOptions o;
  o.run_dir = dir;
  const auto full = run_sweep(trainer, spec, o);
  ASSERT_EQ(full.size(), 2u);

  // Nothing left to do: no training on a rerun.
  std::vector<std::string> log;
  o.log = [&](const std::string& s) { log.push_back(s); };
  EXPECT_EQ(run_sweep(trainer, spec, o), full);
  for (const auto& l : log) EXPECT_EQ(l.find("constant phase"), std::string::npos) << l;

  // Simulate a kill before the last row was written: only the last branch
  // reruns, from its checkpoint.
  {
    const auto text = slurp(dir / "rows.jsonl");
    std::ofstream os(dir / "rows.jsonl", std::ios::trunc);
    os << text.substr(0, text.find('\n') + 1);
  }
  log.clear();
  EXPECT_EQ(run_sweep(trainer, spec, o), full);
  int branches = 0;
  for (const auto& l : log) {
    EXPECT_EQ(l.find("constant phase"), std::string::npos) << l;
    if (l.find("cooldown branch") != std::string::npos) ++branches;
  }
  EXPECT_EQ(branches, 1);
  fs::remove_all(dir);
}

TEST(Sweep, MismatchedHashResumeIsRefused) {
  const Trainer trainer(tiny_task());
  const auto dir = fresh_dir("mismatch");
  SweepOptions o;
  o.run_dir = dir;
  run_sweep(trainer, tiny_spec({20}), o);
  auto other = tiny_spec({20});
  other.train.seed = 99;
  EXPECT_THROW(run_sweep(trainer, other, o), ConfigError);
  fs::remove_all(dir);
}

TEST(Sweep, DivergedBranchIsRecordedAndSweepContinues) {
  const Trainer trainer(tiny_task());
  auto spec = tiny_spec({200}, {tiny_model(8), tiny_model(12)});
  // Overflows within a few steps.
  spec.schedule.peak_lr = 1e300;
  const auto rows = run_sweep(trainer, spec);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.status, "diverged");
    EXPECT_TRUE(std::isnan(r.val_1step));
  }
}

TEST(Sweep, BranchLossesEachGetARow) {
  const Trainer trainer(tiny_task());
  auto spec = tiny_spec({20});
  spec.branch_losses = {LossSpec::parse("mse"), LossSpec::parse("ar2")};
  const auto rows = run_sweep(trainer, spec);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].loss, "mse");
  EXPECT_EQ(rows[1].loss, "ar2");
  EXPECT_NE(rows[0].val_1step, rows[1].val_1step);
}

TEST(Sweep, RunsShorterThanWarmupAreSkipped) {
  const Trainer trainer(tiny_task());
  const auto spec = tiny_spec({2});
  const auto rows = run_sweep(trainer, spec);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].status, "skipped");
}

TEST(SweepRows, JsonAndCsvRoundTrip) {
  SweepRow r{1.5e12, 2, 12345, 600, 4800, 12.5, "ar{4}", 0.01, 0.02, "ok"};
  EXPECT_EQ(sweep_row_from_json(sweep_row_json(r)), r);
  SweepRow n = r;
  n.val_1step = n.val_6step = NAN;
  n.status = "diverged";
  const auto back = sweep_row_from_json(sweep_row_json(n));
  EXPECT_TRUE(std::isnan(back.val_1step));
  std::ostringstream os;
  write_sweep_csv(os, {r});
  EXPECT_EQ(os.str(),
            "budget,model,params,iterations,samples,epochs,loss,val_1step,val_6step,status\n"
            "1500000000000,2,12345,600,4800,12.5,ar{4},0.01,0.02,ok\n");
}

TEST(Summary, ParabolaPerBudgetAndPowerLaws) {
  // Rows drawn from exact parabolas whose vertices follow known power laws.
  std::vector<SweepRow> rows;
  const double aN = 0.6;
  for (int b = 0; b < 3; ++b) {
    const double C = 1e12 * std::pow(10.0, b);
    const double xs = std::log10(2e4 * std::pow(C / 1e12, aN));
    for (int m = 0; m < 5; ++m) {
      SweepRow r;
      r.budget = C;
      r.model = m;
      const double x = 4.0 + 0.25 * m;
      r.params = static_cast<std::size_t>(std::llround(std::pow(10.0, x)));
      r.samples = std::llround(C / (6.0 * static_cast<double>(r.params)));
      r.loss = "mse";
      r.val_1step = 0.1 * std::pow(std::log10(static_cast<double>(r.params)) - xs, 2) + 0.01;
      r.status = "ok";
      rows.push_back(r);
    }
  }
  const auto s = summarize_sweep(rows);
  ASSERT_EQ(s.budgets.size(), 3u);
  for (const auto& b : s.budgets) EXPECT_TRUE(b.by_params.has_minimum);
  ASSERT_TRUE(s.params_law.has_value());
  EXPECT_NEAR(s.params_law->exponent, aN, 1e-3);
  ASSERT_TRUE(s.samples_law.has_value());
  // S = C / 6N at every point, so the exponents sum to one.
  EXPECT_NEAR(s.params_law->exponent + s.samples_law->exponent, 1.0, 0.02);
  // Rows of another loss or failed rows are ignored.
  auto more = rows;
  more.push_back(rows[0]);
  more.back().loss = "amse";
  more.back().val_1step = 100.0;
  more.push_back(rows[1]);
  more.back().status = "diverged";
  more.back().val_1step = NAN;
  EXPECT_EQ(summarize_sweep(more).params_law->exponent, s.params_law->exponent);
}
