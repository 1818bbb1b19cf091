#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "swinscale/emulator.hpp"
#include "swinscale/grid.hpp"
#include "swinscale/spectral.hpp"
#include "swinscale/synthetic.hpp"
#include "swinscale/types.hpp"

namespace swinscale {

// One-step forecast map F(u_n) -> u_{n+1}, applied to a batch of states.
class StepModel {
 public:
  virtual ~StepModel() = default;
  virtual std::vector<Field> step(std::span<const FieldSample> states) const = 0;
};

class EmulatorModel final : public StepModel {
 public:
  EmulatorModel(const ParamSet& params, GridSpec grid, int max_batch = 32)
      : params_(params), grid_(std::move(grid)), max_batch_(max_batch) {}
  std::vector<Field> step(std::span<const FieldSample> states) const override;

 private:
  const ParamSet& params_;
  GridSpec grid_;
  int max_batch_;
};

// The exact process map; a perfect model for synthetic data.
class OracleModel final : public StepModel {
 public:
  OracleModel(SyntheticProcessSpec process, const GridSpec& grid) : stepper_(std::move(process), grid) {}
  std::vector<Field> step(std::span<const FieldSample> states) const override;

 private:
  SyntheticStepper stepper_;
};

// u_1..u_N with u_i = F(u_{i-1}); the time coordinate advances one step per
// lead on a cycle of time_period steps.
std::vector<Field> rollout(const StepModel& model, const FieldSample& u0, int n_steps,
                           int time_period);

// sqrt(mean_{h,w} w_h (pred - target)^2) for one channel; w_h ~ cos(lat)
// normalized to mean 1 over the field's rows.
double area_rmse(const Field& pred, const Field& target, const GridSpec& grid, int channel);
std::vector<double> row_weights(const GridSpec& grid, int rows);

enum class RmseAggregation { mean_of_rmse, pooled };

struct RolloutReport {
  int n_ics = 0;
  int ic_stride = 1;
  int leads = 0;  // contiguous 1..leads
  RmseAggregation aggregation = RmseAggregation::mean_of_rmse;
  std::vector<std::vector<double>> rmse;  // [channel][lead-1]
  // Unweighted mean squared error per lead over ICs, channels and pixels;
  // the training loss metric in the same space.
  std::vector<double> mse;
  bool truncated = false;  // a non-finite state cut the rollout short
};

// Initial conditions at split positions 0, stride, 2*stride, ... that have
// n_steps targets inside the split.
std::vector<long> initial_conditions(long split_len, int n_steps, int ic_stride);

RolloutReport evaluate_rollouts(const StepModel& model, std::span<const FieldSample> split,
                                int n_steps, int ic_stride, const GridSpec& grid,
                                RmseAggregation aggregation = RmseAggregation::mean_of_rmse);

struct SpectrumReport {
  int lead = 0;
  int band_limit = 0;
  int n_ics = 0;
  std::vector<std::vector<double>> psd_pred;   // [channel][l]
  std::vector<std::vector<double>> psd_truth;  // [channel][l]
};

// Fields shorter than the grid (trimmed rows) are restored before analysis.
SpectrumReport spectrum_at_lead(const StepModel& model, std::span<const FieldSample> split,
                                int lead, const SphericalTransform& transform, int ic_stride);

// Mean over l in [l_lo, l_hi] and channels of |PSD_pred / PSD_truth - 1|.
double psd_ratio_error(const SpectrumReport& r, int l_lo, int l_hi);

void write_rollout_csv(std::ostream& os, const RolloutReport& r);
void write_spectrum_csv(std::ostream& os, const SpectrumReport& r);

}  // namespace swinscale
