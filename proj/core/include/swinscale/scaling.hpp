#pragma once

#include <span>
#include <string>
#include <vector>

#include "swinscale/emulator.hpp"

namespace swinscale {

// Forward matmul FLOPs per sample:
//   2T p^2 C_in E + 2T p^2 4 E + depth (24 T E^2 + 4 T M E) + 2T E p^2 C_out
// (the positional term only when the model uses positional inputs).
double flops_per_sample(const ModelConfig& cfg);
inline double training_flops_per_sample(const ModelConfig& cfg, double multiplier = 3.0) {
  return multiplier * flops_per_sample(cfg);
}

struct IsoFlopEntry {
  ModelConfig config;
  std::size_t params = 0;
  long iterations = 0;
  long samples = 0;
  double epochs = 0.0;
  double flops = 0.0;  // 3 F batch iterations
};

struct IsoFlopPlan {
  double budget = 0.0;
  long batch = 0;
  long dataset_len = 0;
  std::vector<IsoFlopEntry> entries;
  std::vector<std::string> warnings;  // dropped configurations
};

// iterations = round(C / (3 F batch)); configurations that would train for
// fewer than warmup_iters iterations, or miss C by more than 0.5% after
// rounding, are dropped with a warning.
IsoFlopPlan plan_isoflop(double budget, std::span<const ModelConfig> configs, long batch,
                         long dataset_len, long warmup_iters);

struct ParabolaFit {
  double a = 0.0, b = 0.0, c = 0.0;
  bool has_minimum = false;  // a > 0
  double x_star = 0.0;
  double y_star = 0.0;
  double residual_rms = 0.0;
};

// Least-squares y ~ a x^2 + b x + c; needs at least three points.
ParabolaFit fit_parabola(std::span<const double> x, std::span<const double> y);

struct PowerLawFit {
  double exponent = 0.0;
  double intercept = 0.0;  // log10
  double residual_rms = 0.0;
};

// Least squares on (log10 x, log10 y); needs two or more distinct positive x.
PowerLawFit fit_powerlaw(std::span<const double> x, std::span<const double> y);
double extrapolate(const PowerLawFit& fit, double x);

std::string to_json(const ParabolaFit& f, double budget);
std::string to_json(const PowerLawFit& f);

}  // namespace swinscale
