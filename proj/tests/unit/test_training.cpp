#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "swinscale/training.hpp"
#include "swinscale/util.hpp"

using namespace swinscale;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.in_channels = c.out_channels = 2;
  c.grid_h = 8;
  c.grid_w = 16;
  c.patch = 4;
  c.embed = 8;
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
    m.process.seed = 2;
    m.process.rotation_rates = {0.3, -0.2};
    m.process.diffusivities = {1e-3, 0.0};
    m.process.time_period = 6;
    m.splits = {40, 52, 60};
    return prepare_task(generate_dataset(m));
  }();
  return task;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.batch_size = 4;
  t.seed = 7;
  t.log_every = 5;
  t.val_rollout_steps = 3;
  t.val_ic_stride = 2;
  return t;
}

LRScheduleSpec tiny_schedule(long total = 20) {
  LRScheduleSpec s;
  s.warmup_iters = 3;
  s.peak_lr = 3e-3;
  s.total_iters = total;
  s.cooldown_frac = 0.25;
  return s;
}

SHTCoeffs random_coeffs(int L, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SHTCoeffs c(L);
  for (auto& v : c.coeffs) v = cplx(standard_normal(rng), standard_normal(rng));
  return c;
}

SHTCoeffs real_coeffs(int L, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SHTCoeffs c(L);
  for (int l = 0; l <= L; ++l) {
    c.at(l, 0) = standard_normal(rng);
    for (int m = 1; m <= l; ++m) {
      c.at(l, m) = cplx(standard_normal(rng), standard_normal(rng));
      c.at(l, -m) = (m % 2 ? -1.0 : 1.0) * std::conj(c.at(l, m));
    }
  }
  return c;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace

TEST(Schedule, WarmupAndConstantCooldownValues) {
  LRScheduleSpec s;
  s.warmup_iters = 10;
  s.peak_lr = 1.0;
  s.total_iters = 100;
  s.cooldown_frac = 0.2;
  EXPECT_EQ(s.cooldown_start(), 80);
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 5), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(s, 50), 1.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 80), 1.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 85), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(s, 100), 0.0);
  EXPECT_THROW(lr_at(s, 101), ConfigError);
  s.cooldown_frac = 0.0;
  EXPECT_DOUBLE_EQ(lr_at(s, 100), 1.0);
}

TEST(Schedule, CosineValues) {
  LRScheduleSpec s;
  s.variant = ScheduleVariant::cosine;
  s.warmup_iters = 10;
  s.peak_lr = 2.0;
  s.total_iters = 110;
  EXPECT_DOUBLE_EQ(lr_at(s, 10), 2.0);
  EXPECT_NEAR(lr_at(s, 60), 1.0, 1e-15);
  EXPECT_NEAR(lr_at(s, 110), 0.0, 1e-15);
  EXPECT_EQ(s.cooldown_start(), 110);
}

TEST(Schedule, CooldownIsMonotoneNonIncreasing) {
  LRScheduleSpec s = tiny_schedule(400);
  s.cooldown_frac = 0.1;
  for (long i = s.warmup_iters; i < s.total_iters; ++i) EXPECT_LE(lr_at(s, i + 1), lr_at(s, i));
}

TEST(Schedule, Validation) {
  LRScheduleSpec s = tiny_schedule();
  EXPECT_NO_THROW(s.validate());
  s.warmup_iters = 20;
  EXPECT_THROW(s.validate(), ConfigError);
  s = tiny_schedule();
  s.cooldown_frac = 1.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = tiny_schedule();
  s.cooldown_frac = 0.9;
  EXPECT_THROW(s.validate(), ConfigError);
  s = tiny_schedule();
  s.peak_lr = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_EQ(schedule_variant_from_string("cosine"), ScheduleVariant::cosine);
  EXPECT_THROW(schedule_variant_from_string("linear"), ConfigError);
}

TEST(LossSpec, ParseAndName) {
  EXPECT_EQ(LossSpec::parse("mse").kind, LossKind::mse);
  EXPECT_EQ(LossSpec::parse("amse").kind, LossKind::amse);
  const auto a = LossSpec::parse("ar{4}");
  EXPECT_EQ(a.kind, LossKind::ar);
  EXPECT_EQ(a.steps, 4);
  EXPECT_EQ(a, LossSpec::parse("ar4"));
  EXPECT_EQ(a.name(), "ar4");
  EXPECT_EQ(a.horizon(), 4);
  EXPECT_EQ(LossSpec::parse("amse").horizon(), 1);
  EXPECT_THROW(LossSpec::parse("ar0"), ConfigError);
  EXPECT_THROW(LossSpec::parse("l1"), ConfigError);
}

TEST(LossMse, ValueAndGradient) {
  std::vector<Field> p{Field(1, 1, 2)}, t{Field(1, 1, 2)};
  p[0].values = {1.0, 3.0};
  t[0].values = {0.0, 1.0};
  std::vector<Field> g;
  EXPECT_DOUBLE_EQ(loss_mse(p, t, &g), (1.0 + 4.0) / 2);
  EXPECT_DOUBLE_EQ(g[0].values[0], 1.0);
  EXPECT_DOUBLE_EQ(g[0].values[1], 2.0);
}

TEST(Amse, IdentitiesOnRealFields) {
  const auto u = real_coeffs(10, 1);
  const auto v = real_coeffs(10, 2);
  EXPECT_NEAR(amse(u, u, 10), 0.0, 1e-12);
  EXPECT_NEAR(amse(u, v, 10), amse(v, u, 10), 1e-10);
  auto u2 = u;
  for (auto& x : u2.coeffs) x *= 2.0;
  double sum_psd = 0.0;
  for (double p : psd(u)) sum_psd += p;
  EXPECT_NEAR(amse(u, u2, 10), sum_psd, 1e-8);
}

TEST(Amse, OrthogonalHarmonicsOfEqualPower) {
  // Y_10 against the real unit field built from Y_11: equal power, zero
  // coherence at l = 1, so AMSE = 2 * (1/3).
  SHTCoeffs u(2), v(2);
  u.at(1, 0) = 1.0;
  v.at(1, 1) = 1.0 / std::sqrt(2.0);
  v.at(1, -1) = -1.0 / std::sqrt(2.0);
  EXPECT_NEAR(amse(u, v, 2), 2.0 / 3.0, 1e-15);
}

TEST(Amse, ScaledCopyOnlyPaysAmplitude) {
  const auto u = real_coeffs(6, 3);
  auto v = u;
  for (auto& x : v.coeffs) x *= 0.5;
  const auto pu = psd(u);
  double want = 0.0;
  for (double p : pu) want += 0.25 * p;
  EXPECT_NEAR(amse(u, v, 6), want, 1e-12);
}

TEST(Amse, CoefficientGradientMatchesFiniteDifferences) {
  const auto u = random_coeffs(5, 4);
  const auto v = random_coeffs(5, 5);
  SHTCoeffs g;
  amse(u, v, 5, &g);
  const double h = 1e-6;
  for (std::size_t i = 0; i < u.coeffs.size(); ++i) {
    for (int part = 0; part < 2; ++part) {
      auto up = u, dn = u;
      const cplx d = part == 0 ? cplx(h, 0) : cplx(0, h);
      up.coeffs[i] += d;
      dn.coeffs[i] -= d;
      const double fd = (amse(up, v, 5) - amse(dn, v, 5)) / (2 * h);
      const double an = part == 0 ? g.coeffs[i].real() : g.coeffs[i].imag();
      EXPECT_LT(rel_err(fd, an), 1e-6) << i << " " << part;
    }
  }
}

TEST(Amse, FieldGradientMatchesFiniteDifferencesWithTrimmedRows) {
  const auto grid = make_grid(8, 16);
  SphericalTransform t(grid, 5);
  std::mt19937_64 rng(6);
  std::vector<Field> pred{Field(2, 7, 16)}, target{Field(2, 7, 16)};
  for (auto& x : pred[0].values) x = standard_normal(rng);
  for (auto& x : target[0].values) x = standard_normal(rng);
  std::vector<Field> g;
  loss_amse(pred, target, t, &g);
  ASSERT_EQ(g[0].height, 7);
  const double h = 1e-6;
  for (std::size_t i = 0; i < pred[0].size(); i += 5) {
    auto up = pred, dn = pred;
    up[0].values[i] += h;
    dn[0].values[i] -= h;
    const double fd = (loss_amse(up, target, t) - loss_amse(dn, target, t)) / (2 * h);
    EXPECT_LT(rel_err(fd, g[0].values[i]), 1e-5) << i;
  }
}

TEST(LossAr, GradientMatchesFiniteDifferences) {
  const auto c = tiny_model();
  const auto& task = tiny_task();
  ParamSet p = init_params(c, 3);
  std::mt19937_64 rng(9);
  for (auto& x : p.values) x += 0.3 * standard_normal(rng);
  std::vector<FieldSample> inputs{task.train[0], task.train[5]};
  std::vector<std::vector<FieldSample>> targets{{task.train[1], task.train[6]},
                                                {task.train[2], task.train[7]}};
  const auto lg = loss_ar(p, task.grid, inputs, targets);
  const double h = 1e-5;
  for (int k = 0; k < 40; ++k) {
    const auto i = static_cast<std::size_t>(uniform_below(rng, p.values.size()));
    auto up = p, dn = p;
    up.values[i] += h;
    dn.values[i] -= h;
    const double fd = (loss_ar(up, task.grid, inputs, targets).loss -
                       loss_ar(dn, task.grid, inputs, targets).loss) / (2 * h);
    EXPECT_LT(rel_err(fd, lg.grad[i]), 1e-4) << p.layout.tensors.size() << " coord " << i;
  }
}

TEST(Optimizer, ClipGlobalNorm) {
  std::vector<double> g{3.0, 4.0};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0], 0.6, 1e-15);
  EXPECT_NEAR(g[1], 0.8, 1e-15);
  std::vector<double> small{0.1, 0.2};
  clip_global_norm(small, 1.0);
  EXPECT_EQ(small, (std::vector<double>{0.1, 0.2}));
}

TEST(Optimizer, AdamWMatchesReferenceRecurrence) {
  TrainConfig cfg;
  cfg.weight_decay = 0.1;
  std::vector<double> p{1.0, -2.0}, m(2, 0.0), v(2, 0.0);
  const std::vector<double> mask{1.0, 0.0};
  const double lr = 0.01;
  double rp[2] = {1.0, -2.0}, rm[2] = {0, 0}, rv[2] = {0, 0};
  const double grads[3][2] = {{0.5, -1.0}, {0.2, 0.3}, {-0.4, 0.0}};
  for (int t = 1; t <= 3; ++t) {
    adamw_update(p, m, v, grads[t - 1], mask, lr, t, cfg);
    for (int i = 0; i < 2; ++i) {
      const double g = grads[t - 1][i];
      rp[i] -= lr * cfg.weight_decay * mask[i] * rp[i];
      rm[i] = 0.9 * rm[i] + 0.1 * g;
      rv[i] = 0.999 * rv[i] + 0.001 * g * g;
      const double mh = rm[i] / (1 - std::pow(0.9, t));
      const double vh = rv[i] / (1 - std::pow(0.999, t));
      rp[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p[i], rp[i], 1e-15);
    }
  }
  // First step moves each coordinate by about lr regardless of gradient scale.
  std::vector<double> q{0.0}, qm{0.0}, qv{0.0};
  const std::vector<double> g1{1e3}, no_decay{0.0};
  adamw_update(q, qm, qv, g1, no_decay, lr, 1, cfg);
  EXPECT_NEAR(q[0], -lr, 1e-12);
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.beta2 = 1.0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.grad_clip_norm = 0.0;
  EXPECT_THROW(t.validate(), ConfigError);
  TrainConfig a, b;
  b.loss = LossSpec::parse("ar4");
  EXPECT_EQ(a.hash(), b.hash());
  b.seed = 1;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Trainer, BatchSkipsSamplesWithoutTargets) {
  const auto& task = tiny_task();
  Trainer tr(task);
  const auto p = init_params(tiny_model(), 1);
  const long last = static_cast<long>(task.train.size()) - 1;
  const std::vector<long> idx{last - 1, 0};
  const std::vector<long> only0{0};
  const auto ar = LossSpec::parse("ar2");
  EXPECT_EQ(tr.batch_loss(p, idx, ar).loss, tr.batch_loss(p, only0, ar).loss);
  const std::vector<long> none{last - 1};
  EXPECT_THROW(tr.batch_loss(p, none, ar), ConfigError);
}

TEST(Trainer, TrainingReducesTheLoss) {
  const auto& task = tiny_task();
  Trainer tr(task);
  auto train = tiny_train();
  train.log_every = 60;
  auto s = init_train_state(tiny_model(), train, tiny_schedule(60), task, 1);
  const auto before = tr.validate(s.params, train);
  const auto recs = tr.run(s, 60);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_LT(recs.back().val_1step, 0.5 * before.one_step);
  EXPECT_EQ(s.step, 60);
}

TEST(Trainer, RecordsAtLogIntervalsAndFinalStep) {
  const auto& task = tiny_task();
  Trainer tr(task);
  auto s = init_train_state(tiny_model(), tiny_train(), tiny_schedule(), task, 1);
  const auto recs = tr.run(s, 12);
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[0].iteration, 5);
  EXPECT_EQ(recs[1].iteration, 10);
  EXPECT_EQ(recs[2].iteration, 12);
  EXPECT_THROW(tr.run(s, 11), ConfigError);
  EXPECT_THROW(tr.run(s, 21), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitTransparent) {
  const auto& task = tiny_task();
  Trainer tr(task);
  auto a = init_train_state(tiny_model(), tiny_train(), tiny_schedule(), task, 1);
  tr.run(a, 7);
  std::stringstream ss;
  write_checkpoint(ss, a);
  auto b = read_checkpoint(ss);
  EXPECT_EQ(b.params.values, a.params.values);
  EXPECT_EQ(b.m, a.m);
  EXPECT_EQ(b.iter, a.iter);
  const auto ra = tr.run(a, 20);
  const auto rb = tr.run(b, 20);
  EXPECT_EQ(ra, rb);
  EXPECT_EQ(a.params.values, b.params.values);
}

TEST(Checkpoint, FilesAreImmutableAndValidated) {
  const auto dir = fs::temp_directory_path() / ("swinscale_ckpt_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  const auto& task = tiny_task();
  auto s = init_train_state(tiny_model(), tiny_train(), tiny_schedule(), task, 1);
  save_checkpoint(dir / "a.bin", s);
  EXPECT_THROW(save_checkpoint(dir / "a.bin", s), Error);
  EXPECT_EQ(load_checkpoint(dir / "a.bin").params.values, s.params.values);
  fs::resize_file(dir / "a.bin", fs::file_size(dir / "a.bin") / 2);
  EXPECT_THROW(load_checkpoint(dir / "a.bin"), Error);
  EXPECT_THROW(load_checkpoint(dir / "missing.bin"), ConfigError);
  fs::remove_all(dir);
}

TEST(BranchCooldown, DeterministicAndSharesThePrefix) {
  const auto& task = tiny_task();
  Trainer tr(task);
  auto base = tiny_schedule(40);
  base.cooldown_frac = 0.0;
  auto s = init_train_state(tiny_model(), tiny_train(), base, task, 1);
  tr.run(s, 15);
  const auto a = tr.branch_cooldown(s, 20, 0.25);
  const auto b = tr.branch_cooldown(s, 20, 0.25);
  EXPECT_EQ(a.records, b.records);
  EXPECT_EQ(a.state.params.values, b.state.params.values);
  EXPECT_EQ(a.state.step, 20);
  EXPECT_DOUBLE_EQ(a.final_losses.one_step, a.records.back().val_1step);
  // Same trajectory as a run scheduled that way from the start.
  auto direct_sched = base;
  direct_sched.total_iters = 20;
  direct_sched.cooldown_frac = 0.25;
  auto d = init_train_state(tiny_model(), tiny_train(), direct_sched, task, 1);
  tr.run(d, 20);
  EXPECT_EQ(d.params.values, a.state.params.values);
  // Switching the loss changes the cooldown.
  const auto c = tr.branch_cooldown(s, 20, 0.25, LossSpec::parse("ar2"));
  EXPECT_NE(c.state.params.values, a.state.params.values);
  EXPECT_EQ(c.state.train.loss.name(), "ar2");
  EXPECT_THROW(tr.branch_cooldown(s, 16, 0.25), ConfigError);
}

TEST(BranchCooldown, LossSwitchRestartsAdamMoments) {
  const auto& task = tiny_task();
  Trainer tr(task);
  auto base = tiny_schedule(40);
  base.cooldown_frac = 0.0;
  auto s = init_train_state(tiny_model(), tiny_train(), base, task, 1);
  tr.run(s, 15);
  const auto c = tr.branch_cooldown(s, 20, 0.25, LossSpec::parse("ar2"));
  EXPECT_EQ(c.state.moments_step, 15);

  // Oracle: zero moments, bias correction counted from the branch point.
  auto m = s;
  m.train.loss = LossSpec::parse("ar2");
  m.schedule = c.state.schedule;
  std::fill(m.m.begin(), m.m.end(), 0.0);
  std::fill(m.v.begin(), m.v.end(), 0.0);
  const auto mask = m.params.layout.decay_mask();
  for (long t = 1; m.step < 20; ++t) {
    auto [idx, next] = next_batch(m.iter, m.train.batch_size);
    auto lg = tr.batch_loss(m.params, idx, m.train.loss);
    clip_global_norm(lg.grad, m.train.grad_clip_norm);
    adamw_update(m.params.values, m.m, m.v, lg.grad, mask, lr_at(m.schedule, m.step), t, m.train);
    m.iter = next;
    ++m.step;
  }
  EXPECT_EQ(m.params.values, c.state.params.values);

  // Naming the checkpoint's own loss is not a switch.
  const auto same = tr.branch_cooldown(s, 20, 0.25, LossSpec::parse("mse"));
  EXPECT_EQ(same.state.moments_step, 0);
  EXPECT_EQ(same.state.params.values, tr.branch_cooldown(s, 20, 0.25).state.params.values);

  // The restart point survives a checkpoint round trip.
  std::stringstream ss;
  write_checkpoint(ss, c.state);
  EXPECT_EQ(read_checkpoint(ss).moments_step, 15);
}
