#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "swinscale/scaling.hpp"
#include "swinscale/training.hpp"

namespace swinscale {

// Train-once / cool-down-many IsoFLOP sweep. Each model gets one constant-LR
// run to the largest budget's iteration count; the run is checkpointed at
// every smaller budget's cooldown start and each budget is reached by a
// cooldown branch from its checkpoint.
struct SweepSpec {
  std::vector<ModelConfig> models;
  std::vector<double> budgets;  // training FLOPs, strictly increasing
  TrainConfig train;
  LRScheduleSpec schedule;  // warmup, peak_lr and cooldown_frac are used
  // When > 0, each model's peak LR is peak_lr * sqrt(lr_ref_params / params).
  double lr_ref_params = 0.0;
  std::vector<LossSpec> branch_losses{LossSpec{}};
  std::uint64_t init_seed = 0;  // shared by every model, so one model matches a plain train run

  void validate() const;
  std::uint64_t hash() const;
  double peak_lr_for(const ModelConfig& m) const;
};

struct SweepRow {
  double budget = 0.0;
  int model = 0;
  std::size_t params = 0;
  long iterations = 0;
  long samples = 0;
  double epochs = 0.0;
  std::string loss;
  double val_1step = 0.0;
  double val_6step = 0.0;
  std::string status;  // ok | diverged | skipped

  bool operator==(const SweepRow&) const = default;
};

struct SweepOptions {
  // Checkpoints, rows and the sweep manifest live here; rerunning with the
  // same directory resumes without recomputing finished branches.
  std::optional<std::filesystem::path> run_dir;
  std::function<void(const SweepRow&)> on_row;
  std::function<void(const std::string&)> log;
};

std::vector<SweepRow> run_sweep(const Trainer& trainer, const SweepSpec& spec,
                                const SweepOptions& options = {});

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);
std::string sweep_row_json(const SweepRow& r);
SweepRow sweep_row_from_json(const std::string& line);

struct ScalingSummary {
  struct Budget {
    double budget = 0.0;
    ParabolaFit by_params;   // loss vs log10(params)
    ParabolaFit by_samples;  // loss vs log10(samples)
    double best_params = 0.0;   // best measured point
    double best_samples = 0.0;
    double best_loss = 0.0;
  };
  std::vector<Budget> budgets;
  std::optional<PowerLawFit> params_law;   // N*(C)
  std::optional<PowerLawFit> samples_law;  // S*(C)
};

// Fits one parabola per budget on rows with status ok and the given loss,
// then power laws through the parabola minima of budgets that have one.
ScalingSummary summarize_sweep(const std::vector<SweepRow>& rows, const std::string& loss = "mse",
                               bool use_multi_step = false);

}  // namespace swinscale
