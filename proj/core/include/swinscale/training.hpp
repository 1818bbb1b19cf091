#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "swinscale/data.hpp"
#include "swinscale/dataset_io.hpp"
#include "swinscale/emulator.hpp"
#include "swinscale/spectral.hpp"

namespace swinscale {

// ---------------------------------------------------------------------------
// Task data: standardized splits trimmed to the model height.

struct TaskData {
  GridSpec grid;
  int time_period = 64;
  int band_limit = 0;  // highest degree carrying signal
  NormStats stats;
  std::vector<FieldSample> train, val, test;
  std::string data_hash;
};

TaskData prepare_task(const Dataset& dataset, int rows = -1);

// ---------------------------------------------------------------------------
// Learning-rate schedules

enum class ScheduleVariant { cosine, constant_cooldown };

std::string to_string(ScheduleVariant v);
ScheduleVariant schedule_variant_from_string(const std::string& s);

struct LRScheduleSpec {
  ScheduleVariant variant = ScheduleVariant::constant_cooldown;
  long warmup_iters = 500;
  double peak_lr = 1e-3;
  long total_iters = 10000;
  double cooldown_frac = 0.05;  // 0 means no cooldown

  void validate() const;
  // t0 = round(T (1 - frac)); equals T for cosine schedules.
  long cooldown_start() const;
};

double lr_at(const LRScheduleSpec& spec, long i);

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { mse, ar, amse };

struct LossSpec {
  LossKind kind = LossKind::mse;
  int steps = 1;  // rollout length for ar

  // "mse", "amse", "ar4" or "ar{4}".
  static LossSpec parse(const std::string& s);
  std::string name() const;
  int horizon() const { return kind == LossKind::ar ? steps : 1; }
  bool operator==(const LossSpec&) const = default;
};

// Mean over every element; grad (if given) receives dL/dpred.
double loss_mse(std::span<const Field> pred, std::span<const Field> target,
                std::vector<Field>* grad = nullptr);

// Per-field AMSE over degrees 0..L on coefficients; grad_u receives
// dL/dRe + i dL/dIm for every stored coefficient of u.
double amse(const SHTCoeffs& u, const SHTCoeffs& v, int L, SHTCoeffs* grad_u = nullptr);

// AMSE averaged over batch and channels, differentiable in pred. Fields with
// fewer rows than the transform grid are restored (last row repeated).
double loss_amse(std::span<const Field> pred, std::span<const Field> target,
                 const SphericalTransform& transform, std::vector<Field>* grad = nullptr);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;  // parameter gradient
};

// (1/k) sum_i MSE(F^i(u_n), u_{n+i}) with gradients through the whole chain.
// targets[i] holds the batch at step i + 1.
LossAndGrad loss_ar(const ParamSet& params, const GridSpec& grid,
                    std::span<const FieldSample> inputs,
                    const std::vector<std::vector<FieldSample>>& targets);

// ---------------------------------------------------------------------------
// Training state

struct TrainConfig {
  long batch_size = 16;
  double weight_decay = 1e-4;
  double grad_clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossSpec loss;
  std::uint64_t seed = 0;
  long log_every = 2000;
  int val_rollout_steps = 6;
  int val_ic_stride = 1;
  int amse_band_limit = -1;  // -1: the task's band limit

  void validate() const;
  // Covers what shapes the optimization trajectory except the loss, which a
  // cooldown branch may switch.
  std::uint64_t hash() const;
};

struct LossRecord {
  long iteration = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_1step = 0.0;
  double val_6step = 0.0;
  bool operator==(const LossRecord&) const = default;
};

void write_loss_csv(std::ostream& os, std::span<const LossRecord> records);

struct TrainState {
  ParamSet params;
  std::vector<double> m, v;  // Adam moments
  long step = 0;
  long moments_step = 0;  // step at which m and v were last zeroed; bias correction counts from here
  std::mt19937_64 rng;
  IteratorState iter;
  LRScheduleSpec schedule;
  TrainConfig train;
  std::string data_hash;
  double last_loss = 0.0;

  std::uint64_t config_hash() const;
};

TrainState init_train_state(const ModelConfig& model, const TrainConfig& train,
                            const LRScheduleSpec& schedule, const TaskData& task,
                            std::uint64_t init_seed);

void write_checkpoint(std::ostream& os, const TrainState& s);
TrainState read_checkpoint(std::istream& is);
// Checkpoints are immutable: saving over an existing file throws.
void save_checkpoint(const std::filesystem::path& path, const TrainState& s);
TrainState load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Trainer

struct ValLosses {
  double one_step = 0.0;
  double multi_step = 0.0;  // mean over leads 1..val_rollout_steps
};

struct BranchResult {
  TrainState state;
  std::vector<LossRecord> records;
  ValLosses final_losses;
};

class Trainer {
 public:
  explicit Trainer(const TaskData& task);

  const TaskData& task() const { return task_; }

  // Loss and parameter gradient on training pairs starting at `indices`
  // (positions in the train split); samples lacking targets are skipped.
  LossAndGrad batch_loss(const ParamSet& params, std::span<const long> indices,
                         const LossSpec& loss, int amse_band_limit = -1) const;

  // One optimizer step; returns the batch loss. Throws NumericalError on a
  // non-finite loss.
  double train_step(TrainState& s) const;

  ValLosses validate(const ParamSet& params, const TrainConfig& train) const;

  // Steps until s.step == until. A record is taken after every step that is a
  // multiple of log_every and after the final step. on_step runs after each
  // step, before any record.
  std::vector<LossRecord> run(TrainState& s, long until,
                              const std::function<void(const TrainState&)>& on_step = {}) const;

  // Continue a checkpoint under a constant+cooldown schedule ending at
  // total_iters, optionally switching the loss. A loss switch zeroes the Adam
  // moments: second moments gathered under the old loss are far smaller than
  // the new loss's gradients and would inflate the first updates.
  BranchResult branch_cooldown(const TrainState& checkpoint, long total_iters, double frac,
                               std::optional<LossSpec> loss = std::nullopt) const;

  long pair_count() const { return static_cast<long>(task_.train.size()) - 1; }

 private:
  const TaskData& task_;
  SphericalTransform transform_;
};

// Global-norm clip in place; returns the pre-clip norm.
double clip_global_norm(std::vector<double>& g, double max_norm);

// Decoupled weight decay followed by the bias-corrected Adam update, at
// optimizer step t (1-based).
void adamw_update(std::vector<double>& params, std::vector<double>& m, std::vector<double>& v,
                  std::span<const double> grad, std::span<const double> decay_mask, double lr,
                  long t, const TrainConfig& cfg);

}  // namespace swinscale
