#include "swinscale/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <regex>
#include <sstream>

#include "swinscale/evaluation.hpp"
#include "swinscale/util.hpp"

namespace swinscale {

namespace fs = std::filesystem;

TaskData prepare_task(const Dataset& dataset, int rows) {
  const auto& m = dataset.manifest;
  if (rows < 0) rows = dataset.grid.n_lat;
  if (rows < 1 || rows > dataset.grid.n_lat) throw ConfigError("prepare_task: bad row count");
  TaskData t;
  t.grid = dataset.grid;
  t.time_period = m.process.time_period;
  t.band_limit = std::min(m.process.band_limit, dataset.grid.max_degree());
  t.data_hash = m.config_hash();
  t.stats = compute_norm_stats(dataset.train());
  auto prep = [&](std::span<const FieldSample> split) {
    auto out = standardized(split, t.stats);
    if (rows != dataset.grid.n_lat) {
      for (auto& s : out) s.values = trim_rows(s.values, rows);
    }
    return out;
  };
  t.train = prep(dataset.train());
  t.val = prep(dataset.val());
  t.test = prep(dataset.test());
  return t;
}

// ---------------------------------------------------------------------------

std::string to_string(ScheduleVariant v) {
  return v == ScheduleVariant::cosine ? "cosine" : "constant_cooldown";
}

ScheduleVariant schedule_variant_from_string(const std::string& s) {
  if (s == "cosine") return ScheduleVariant::cosine;
  if (s == "constant_cooldown" || s == "constant-cooldown") return ScheduleVariant::constant_cooldown;
  throw ConfigError("unknown schedule variant '" + s + "'");
}

void LRScheduleSpec::validate() const {
  if (warmup_iters < 0) throw ConfigError("schedule.warmup_iters must be >= 0");
  if (total_iters <= warmup_iters) throw ConfigError("schedule.warmup_iters must be < total_iters");
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw ConfigError("schedule.peak_lr must be > 0");
  if (variant == ScheduleVariant::constant_cooldown) {
    if (!(cooldown_frac >= 0.0 && cooldown_frac < 1.0)) {
      throw ConfigError("schedule.cooldown_frac must be in [0, 1)");
    }
    if (cooldown_start() < warmup_iters) {
      throw ConfigError("schedule: cooldown would start inside the warmup");
    }
  }
}

long LRScheduleSpec::cooldown_start() const {
  if (variant == ScheduleVariant::cosine) return total_iters;
  return std::lround(static_cast<double>(total_iters) * (1.0 - cooldown_frac));
}

double lr_at(const LRScheduleSpec& spec, long i) {
  if (i < 0 || i > spec.total_iters) throw ConfigError("lr_at: iteration out of range");
  const long w = spec.warmup_iters, T = spec.total_iters;
  if (i < w) return spec.peak_lr * static_cast<double>(i) / static_cast<double>(w);
  if (spec.variant == ScheduleVariant::cosine) {
    return spec.peak_lr * 0.5 *
           (1.0 + std::cos(M_PI * static_cast<double>(i - w) / static_cast<double>(T - w)));
  }
  const long t0 = spec.cooldown_start();
  if (i < t0 || t0 == T) return spec.peak_lr;
  return spec.peak_lr * (1.0 - std::sqrt(static_cast<double>(i - t0) / static_cast<double>(T - t0)));
}

// ---------------------------------------------------------------------------

LossSpec LossSpec::parse(const std::string& s) {
  if (s == "mse") return {LossKind::mse, 1};
  if (s == "amse") return {LossKind::amse, 1};
  static const std::regex ar(R"(ar\{?(\d+)\}?)");
  std::smatch m;
  if (std::regex_match(s, m, ar)) {
    const int k = std::stoi(m[1].str());
    if (k < 1) throw ConfigError("loss: ar steps must be >= 1");
    return {LossKind::ar, k};
  }
  throw ConfigError("unknown loss '" + s + "' (expected mse, amse or ar<k>)");
}

std::string LossSpec::name() const {
  switch (kind) {
    case LossKind::mse:
      return "mse";
    case LossKind::amse:
      return "amse";
    case LossKind::ar:
      return "ar" + std::to_string(steps);
  }
  return "?";
}

double loss_mse(std::span<const Field> pred, std::span<const Field> target,
                std::vector<Field>* grad) {
  if (pred.size() != target.size() || pred.empty()) throw ShapeError("loss_mse: batch mismatch");
  std::size_t n = 0;
  for (std::size_t b = 0; b < pred.size(); ++b) {
    if (!pred[b].same_shape(target[b])) throw ShapeError("loss_mse: shape mismatch");
    n += pred[b].size();
  }
  double s = 0.0;
  if (grad) grad->clear();
  for (std::size_t b = 0; b < pred.size(); ++b) {
    Field g;
    if (grad) g = Field(pred[b].channels, pred[b].height, pred[b].width);
    for (std::size_t i = 0; i < pred[b].size(); ++i) {
      const double d = pred[b].values[i] - target[b].values[i];
      s += d * d;
      if (grad) g.values[i] = 2.0 * d / static_cast<double>(n);
    }
    if (grad) grad->push_back(std::move(g));
  }
  return s / static_cast<double>(n);
}

double amse(const SHTCoeffs& u, const SHTCoeffs& v, int L, SHTCoeffs* grad_u) {
  if (L > u.band_limit || L > v.band_limit) throw ShapeError("amse: band limit exceeds coefficients");
  if (grad_u) *grad_u = SHTCoeffs(u.band_limit);
  double total = 0.0;
  for (int l = 0; l <= L; ++l) {
    double su = 0.0, sv = 0.0, x = 0.0;
    for (int m = -l; m <= l; ++m) {
      const cplx a = u.at(l, m), b = v.at(l, m);
      su += std::norm(a);
      sv += std::norm(b);
      x += a.real() * b.real() + a.imag() * b.imag();
    }
    const double n = 2.0 * l + 1.0;
    const double pu = su / n, pv = sv / n;
    const double amp = std::sqrt(pu) - std::sqrt(pv);
    total += amp * amp;
    const bool defined = su > 0.0 && sv > 0.0;
    const double coh = defined ? x / std::sqrt(su * sv) : 0.0;
    const double mx = std::max(pu, pv);
    if (defined) total += 2.0 * mx * (1.0 - coh);
    if (!grad_u) continue;
    // d(amp^2)/dPu, then dPu/du = 2u/(2l+1)
    const double d_pu = (pu > 0.0 ? 1.0 - std::sqrt(pv / pu) : 0.0) +
                        (defined && pu >= pv ? 2.0 * (1.0 - coh) : 0.0);
    for (int m = -l; m <= l; ++m) {
      const cplx a = u.at(l, m), b = v.at(l, m);
      cplx g = d_pu * 2.0 * a / n;
      if (defined) g -= 2.0 * mx * (b / std::sqrt(su * sv) - coh * a / su);
      grad_u->at(l, m) = g;
    }
  }
  return total;
}

namespace {

// Adjoint of restore_rows: rows copied from the last kept row fold back into it.
Field restore_rows_adjoint(const Field& g, int rows) {
  Field out(g.channels, rows, g.width);
  for (int c = 0; c < g.channels; ++c) {
    for (int h = 0; h < g.height; ++h) {
      const int dst = std::min(h, rows - 1);
      for (int w = 0; w < g.width; ++w) out.at(c, dst, w) += g.at(c, h, w);
    }
  }
  return out;
}

}  // namespace

double loss_amse(std::span<const Field> pred, std::span<const Field> target,
                 const SphericalTransform& transform, std::vector<Field>* grad) {
  if (pred.size() != target.size() || pred.empty()) throw ShapeError("loss_amse: batch mismatch");
  const int raw = transform.grid().n_lat;
  const int L = transform.band_limit();
  const double norm = static_cast<double>(pred.size()) * pred[0].channels;
  double total = 0.0;
  if (grad) grad->clear();
  for (std::size_t b = 0; b < pred.size(); ++b) {
    if (!pred[b].same_shape(target[b])) throw ShapeError("loss_amse: shape mismatch");
    const Field p = restore_rows(pred[b], raw);
    const Field t = restore_rows(target[b], raw);
    Field g(p.channels, raw, p.width);
    for (int c = 0; c < p.channels; ++c) {
      const auto u = transform.forward({p.channel(c), p.plane()});
      const auto v = transform.forward({t.channel(c), t.plane()});
      SHTCoeffs gu;
      total += amse(u, v, L, grad ? &gu : nullptr);
      if (grad) {
        transform.forward_adjoint(gu, {g.channel(c), g.plane()});
        for (std::size_t i = 0; i < g.plane(); ++i) g.channel(c)[i] /= norm;
      }
    }
    if (grad) grad->push_back(restore_rows_adjoint(g, pred[b].height));
  }
  return total / norm;
}

LossAndGrad loss_ar(const ParamSet& params, const GridSpec& grid,
                    std::span<const FieldSample> inputs,
                    const std::vector<std::vector<FieldSample>>& targets) {
  const int k = static_cast<int>(targets.size());
  if (k < 1) throw ConfigError("loss_ar: need at least one target step");
  for (const auto& t : targets) {
    if (t.size() != inputs.size()) throw ShapeError("loss_ar: target batch size mismatch");
  }
  std::vector<ActivationTape> tapes;
  std::vector<std::vector<Field>> out_grads;
  LossAndGrad r;
  std::vector<FieldSample> state(inputs.begin(), inputs.end());
  for (int i = 0; i < k; ++i) {
    auto fr = forward(params, state, grid);
    std::vector<Field> tv;
    for (const auto& s : targets[i]) tv.push_back(s.values);
    std::vector<Field> g;
    r.loss += loss_mse(fr.predictions, tv, &g) / k;
    for (auto& f : g) {
      for (double& x : f.values) x /= k;
    }
    out_grads.push_back(std::move(g));
    tapes.push_back(std::move(fr.tape));
    for (std::size_t b = 0; b < state.size(); ++b) {
      state[b].values = std::move(fr.predictions[b]);
      state[b].index = targets[i][b].index;
      state[b].time_frac = targets[i][b].time_frac;
    }
  }
  r.grad.assign(params.values.size(), 0.0);
  std::vector<Field> carry;
  for (int i = k - 1; i >= 0; --i) {
    auto& go = out_grads[i];
    if (!carry.empty()) {
      for (std::size_t b = 0; b < go.size(); ++b) {
        for (std::size_t j = 0; j < go[b].size(); ++j) go[b].values[j] += carry[b].values[j];
      }
    }
    auto g = backward(tapes[i], params, go);
    for (std::size_t j = 0; j < r.grad.size(); ++j) r.grad[j] += g.params[j];
    carry = std::move(g.inputs);
  }
  return r;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("train.grad_clip_norm must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train.adam_betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
  if (loss.steps < 1) throw ConfigError("train.loss: ar steps must be >= 1");
  if (log_every < 1) throw ConfigError("train.log_every must be >= 1");
  if (val_rollout_steps < 1 || val_ic_stride < 1) {
    throw ConfigError("train.val_rollout_steps and val_ic_stride must be >= 1");
  }
}

std::uint64_t TrainConfig::hash() const {
  Fnv1a h;
  h.update("train-v1");
  h.update_pod(static_cast<std::int64_t>(batch_size));
  for (double d : {weight_decay, grad_clip_norm, beta1, beta2, adam_eps}) h.update_pod(d);
  h.update_pod(seed);
  return h.digest();
}

void write_loss_csv(std::ostream& os, std::span<const LossRecord> records) {
  os << "iteration,lr,train_loss,val_1step,val_6step\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g\n", r.iteration, r.lr,
                  r.train_loss, r.val_1step, r.val_6step);
    os << buf;
  }
}

std::uint64_t TrainState::config_hash() const {
  Fnv1a h;
  h.update_pod(params.config.hash());
  h.update_pod(train.hash());
  h.update(data_hash);
  return h.digest();
}

TrainState init_train_state(const ModelConfig& model, const TrainConfig& train,
                            const LRScheduleSpec& schedule, const TaskData& task,
                            std::uint64_t init_seed) {
  train.validate();
  schedule.validate();
  TrainState s;
  s.params = init_params(model, init_seed);
  s.m.assign(s.params.values.size(), 0.0);
  s.v.assign(s.params.values.size(), 0.0);
  s.rng.seed(splitmix64(train.seed ^ 0x726e67ULL));
  s.iter.perm_seed = splitmix64(train.seed ^ 0x7065726dULL);
  s.iter.dataset_len = static_cast<long>(task.train.size()) - 1;
  if (s.iter.dataset_len < train.batch_size) {
    throw ConfigError("train split has fewer one-step pairs than batch_size");
  }
  s.schedule = schedule;
  s.train = train;
  s.data_hash = task.data_hash;
  return s;
}

namespace {

constexpr std::uint32_t kCkptMagic = 0x434e5753;  // "SWNC"
constexpr std::uint32_t kCkptVersion = 2;

}  // namespace

void write_checkpoint(std::ostream& os, const TrainState& s) {
  binio::write<std::uint32_t>(os, kCkptMagic);
  binio::write<std::uint32_t>(os, kCkptVersion);
  binio::write<std::uint64_t>(os, s.config_hash());
  save_params(os, s.params);
  binio::write_doubles(os, s.m);
  binio::write_doubles(os, s.v);
  binio::write<std::int64_t>(os, s.step);
  binio::write<std::int64_t>(os, s.moments_step);
  std::ostringstream rng;
  rng << s.rng;
  binio::write_string(os, rng.str());
  write_iterator_state(os, s.iter);
  binio::write<std::int32_t>(os, static_cast<std::int32_t>(s.schedule.variant));
  binio::write<std::int64_t>(os, s.schedule.warmup_iters);
  binio::write<double>(os, s.schedule.peak_lr);
  binio::write<std::int64_t>(os, s.schedule.total_iters);
  binio::write<double>(os, s.schedule.cooldown_frac);
  const auto& t = s.train;
  binio::write<std::int64_t>(os, t.batch_size);
  for (double d : {t.weight_decay, t.grad_clip_norm, t.beta1, t.beta2, t.adam_eps}) {
    binio::write<double>(os, d);
  }
  binio::write<std::int32_t>(os, static_cast<std::int32_t>(t.loss.kind));
  binio::write<std::int32_t>(os, t.loss.steps);
  binio::write<std::uint64_t>(os, t.seed);
  binio::write<std::int64_t>(os, t.log_every);
  binio::write<std::int32_t>(os, t.val_rollout_steps);
  binio::write<std::int32_t>(os, t.val_ic_stride);
  binio::write<std::int32_t>(os, t.amse_band_limit);
  binio::write_string(os, s.data_hash);
  binio::write<double>(os, s.last_loss);
}

TrainState read_checkpoint(std::istream& is) {
  if (binio::read<std::uint32_t>(is) != kCkptMagic) throw Error("checkpoint: bad magic");
  if (binio::read<std::uint32_t>(is) != kCkptVersion) throw Error("checkpoint: unsupported version");
  const auto hash = binio::read<std::uint64_t>(is);
  TrainState s;
  s.params = load_params(is);
  s.m = binio::read_doubles(is);
  s.v = binio::read_doubles(is);
  s.step = binio::read<std::int64_t>(is);
  s.moments_step = binio::read<std::int64_t>(is);
  std::istringstream rng(binio::read_string(is));
  rng >> s.rng;
  s.iter = read_iterator_state(is);
  s.schedule.variant = static_cast<ScheduleVariant>(binio::read<std::int32_t>(is));
  s.schedule.warmup_iters = binio::read<std::int64_t>(is);
  s.schedule.peak_lr = binio::read<double>(is);
  s.schedule.total_iters = binio::read<std::int64_t>(is);
  s.schedule.cooldown_frac = binio::read<double>(is);
  auto& t = s.train;
  t.batch_size = binio::read<std::int64_t>(is);
  for (double* d : {&t.weight_decay, &t.grad_clip_norm, &t.beta1, &t.beta2, &t.adam_eps}) {
    *d = binio::read<double>(is);
  }
  t.loss.kind = static_cast<LossKind>(binio::read<std::int32_t>(is));
  t.loss.steps = binio::read<std::int32_t>(is);
  t.seed = binio::read<std::uint64_t>(is);
  t.log_every = binio::read<std::int64_t>(is);
  t.val_rollout_steps = binio::read<std::int32_t>(is);
  t.val_ic_stride = binio::read<std::int32_t>(is);
  t.amse_band_limit = binio::read<std::int32_t>(is);
  s.data_hash = binio::read_string(is);
  s.last_loss = binio::read<double>(is);
  if (s.config_hash() != hash) throw Error("checkpoint: config hash mismatch");
  if (s.m.size() != s.params.values.size() || s.v.size() != s.params.values.size()) {
    throw Error("checkpoint: optimizer state size mismatch");
  }
  return s;
}

void save_checkpoint(const fs::path& path, const TrainState& s) {
  if (fs::exists(path)) {
    throw Error("checkpoint " + path.string() + " already exists; checkpoints are immutable");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    write_checkpoint(os, s);
    if (!os) throw Error("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

TrainState load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

// ---------------------------------------------------------------------------

double clip_global_norm(std::vector<double>& g, double max_norm) {
  double ss = 0.0;
  for (double x : g) ss += x * x;
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (double& x : g) x *= f;
  }
  return norm;
}

void adamw_update(std::vector<double>& params, std::vector<double>& m, std::vector<double>& v,
                  std::span<const double> grad, std::span<const double> decay_mask, double lr,
                  long t, const TrainConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] *= 1.0 - lr * cfg.weight_decay * decay_mask[i];
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mh = m[i] / bc1;
    const double vh = v[i] / bc2;
    params[i] -= lr * mh / (std::sqrt(vh) + cfg.adam_eps);
  }
}

Trainer::Trainer(const TaskData& task)
    : task_(task), transform_(task.grid, task.band_limit) {}

LossAndGrad Trainer::batch_loss(const ParamSet& params, std::span<const long> indices,
                                const LossSpec& loss, int amse_band_limit) const {
  const int k = loss.horizon();
  const long last = static_cast<long>(task_.train.size()) - 1;
  std::vector<FieldSample> inputs;
  std::vector<std::vector<FieldSample>> targets(k);
  for (long i : indices) {
    if (i < 0 || i + k > last) continue;
    inputs.push_back(task_.train[i]);
    for (int j = 0; j < k; ++j) targets[j].push_back(task_.train[i + j + 1]);
  }
  if (inputs.empty()) throw ConfigError("batch has no sample with enough rollout targets");
  if (loss.kind != LossKind::amse) return loss_ar(params, task_.grid, inputs, targets);

  const bool custom = amse_band_limit >= 0 && amse_band_limit != transform_.band_limit();
  std::optional<SphericalTransform> local;
  if (custom) local.emplace(task_.grid, amse_band_limit);
  const SphericalTransform& tr = custom ? *local : transform_;
  auto fr = forward(params, inputs, task_.grid);
  std::vector<Field> tv, g;
  for (const auto& s : targets[0]) tv.push_back(s.values);
  LossAndGrad r;
  r.loss = loss_amse(fr.predictions, tv, tr, &g);
  r.grad = backward(fr.tape, params, g).params;
  return r;
}

double Trainer::train_step(TrainState& s) const {
  auto [idx, next] = next_batch(s.iter, s.train.batch_size);
  auto lg = batch_loss(s.params, idx, s.train.loss, s.train.amse_band_limit);
  if (!std::isfinite(lg.loss) || !all_finite(lg.grad)) {
    throw NumericalError("non-finite loss at iteration " + std::to_string(s.step));
  }
  clip_global_norm(lg.grad, s.train.grad_clip_norm);
  const double lr = lr_at(s.schedule, s.step);
  adamw_update(s.params.values, s.m, s.v, lg.grad, s.params.layout.decay_mask(), lr,
               s.step + 1 - s.moments_step, s.train);
  s.iter = next;
  ++s.step;
  s.last_loss = lg.loss;
  return lg.loss;
}

ValLosses Trainer::validate(const ParamSet& params, const TrainConfig& train) const {
  EmulatorModel model(params, task_.grid);
  ValLosses v;
  const auto one = evaluate_rollouts(model, task_.val, 1, train.val_ic_stride, task_.grid);
  v.one_step = one.truncated ? std::numeric_limits<double>::infinity() : one.mse[0];
  const auto multi =
      evaluate_rollouts(model, task_.val, train.val_rollout_steps, train.val_ic_stride, task_.grid);
  if (multi.truncated) {
    v.multi_step = std::numeric_limits<double>::infinity();
  } else {
    double s = 0.0;
    for (double x : multi.mse) s += x;
    v.multi_step = s / static_cast<double>(multi.mse.size());
  }
  return v;
}

std::vector<LossRecord> Trainer::run(TrainState& s, long until,
                                     const std::function<void(const TrainState&)>& on_step) const {
  if (until < s.step) throw ConfigError("run: target iteration is behind the state");
  if (until > s.schedule.total_iters) throw ConfigError("run: target beyond the schedule's total");
  std::vector<LossRecord> records;
  while (s.step < until) {
    const double lr = lr_at(s.schedule, s.step);
    const double loss = train_step(s);
    if (on_step) on_step(s);
    if (s.step % s.train.log_every == 0 || s.step == until) {
      const auto v = validate(s.params, s.train);
      records.push_back({s.step, lr, loss, v.one_step, v.multi_step});
    }
  }
  return records;
}

BranchResult Trainer::branch_cooldown(const TrainState& checkpoint, long total_iters, double frac,
                                      std::optional<LossSpec> loss) const {
  BranchResult r;
  r.state = checkpoint;
  auto& sch = r.state.schedule;
  sch.variant = ScheduleVariant::constant_cooldown;
  sch.total_iters = total_iters;
  sch.cooldown_frac = frac;
  sch.validate();
  if (checkpoint.step > sch.cooldown_start()) {
    throw ConfigError("branch_cooldown: checkpoint step " + std::to_string(checkpoint.step) +
                      " is beyond the branch's cooldown start " +
                      std::to_string(sch.cooldown_start()));
  }
  if (loss && *loss != r.state.train.loss) {
    r.state.train.loss = *loss;
    std::fill(r.state.m.begin(), r.state.m.end(), 0.0);
    std::fill(r.state.v.begin(), r.state.v.end(), 0.0);
    r.state.moments_step = r.state.step;
  }
  r.records = run(r.state, total_iters);
  if (r.records.empty()) {
    r.final_losses = validate(r.state.params, r.state.train);
  } else {
    r.final_losses = {r.records.back().val_1step, r.records.back().val_6step};
  }
  return r;
}

}  // namespace swinscale
