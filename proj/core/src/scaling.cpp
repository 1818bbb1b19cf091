#include "swinscale/scaling.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <nlohmann/json.hpp>

namespace swinscale {

double flops_per_sample(const ModelConfig& cfg) {
  cfg.validate();
  const double T = cfg.tokens(), E = cfg.embed, M = cfg.window_tokens();
  const double p2 = static_cast<double>(cfg.patch) * cfg.patch;
  const double patch = 2.0 * T * p2 * cfg.in_channels * E;
  const double pos = cfg.pos_enc ? 2.0 * T * p2 * 4.0 * E : 0.0;
  const double blocks = cfg.depth * (24.0 * T * E * E + 4.0 * T * M * E);
  const double head = 2.0 * T * E * p2 * cfg.out_channels;
  return patch + pos + blocks + head;
}

IsoFlopPlan plan_isoflop(double budget, std::span<const ModelConfig> configs, long batch,
                         long dataset_len, long warmup_iters) {
  if (!(budget > 0.0)) throw ConfigError("plan_isoflop: budget must be > 0");
  if (batch < 1 || dataset_len < 1) throw ConfigError("plan_isoflop: batch and dataset_len must be >= 1");
  IsoFlopPlan plan;
  plan.budget = budget;
  plan.batch = batch;
  plan.dataset_len = dataset_len;
  for (const auto& cfg : configs) {
    const double per_iter = training_flops_per_sample(cfg) * static_cast<double>(batch);
    const long iters = std::lround(budget / per_iter);
    const double flops = per_iter * static_cast<double>(iters);
    if (iters < warmup_iters || iters < 1) {
      plan.warnings.push_back(cfg.canonical() + ": " + std::to_string(iters) +
                              " iterations is below the warmup; dropped");
      continue;
    }
    if (std::abs(flops - budget) > 0.005 * budget) {
      plan.warnings.push_back(cfg.canonical() + ": rounding misses the budget by more than 0.5%; dropped");
      continue;
    }
    IsoFlopEntry e;
    e.config = cfg;
    e.params = param_count(cfg);
    e.iterations = iters;
    e.samples = iters * batch;
    e.epochs = static_cast<double>(e.samples) / static_cast<double>(dataset_len);
    e.flops = flops;
    plan.entries.push_back(e);
  }
  return plan;
}

ParabolaFit fit_parabola(std::span<const double> x, std::span<const double> y) {
  const long n = static_cast<long>(x.size());
  if (n != static_cast<long>(y.size())) throw ConfigError("fit_parabola: x and y differ in length");
  if (n < 3) throw ConfigError("fit_parabola: need at least 3 points");
  // Centre and scale x for conditioning; map back afterwards.
  double mx = 0.0;
  for (double v : x) mx += v;
  mx /= n;
  double sx = 0.0;
  for (double v : x) sx = std::max(sx, std::abs(v - mx));
  if (sx == 0.0) throw ConfigError("fit_parabola: x values are all equal");
  Eigen::MatrixXd A(n, 3);
  Eigen::VectorXd b(n);
  for (long i = 0; i < n; ++i) {
    const double t = (x[i] - mx) / sx;
    A(i, 0) = t * t;
    A(i, 1) = t;
    A(i, 2) = 1.0;
    b(i) = y[i];
  }
  const Eigen::Vector3d q = A.colPivHouseholderQr().solve(b);
  ParabolaFit f;
  f.a = q(0) / (sx * sx);
  f.b = q(1) / sx - 2.0 * q(0) * mx / (sx * sx);
  f.c = q(2) - q(1) * mx / sx + q(0) * mx * mx / (sx * sx);
  const Eigen::VectorXd r = A * q - b;
  f.residual_rms = std::sqrt(r.squaredNorm() / n);
  double ymax = 0.0;
  for (double v : y) ymax = std::max(ymax, std::abs(v));
  // Curvature indistinguishable from rounding noise counts as none.
  f.has_minimum = q(0) > 1e-12 * std::max(ymax, 1e-300);
  if (f.has_minimum) {
    f.x_star = mx - sx * q(1) / (2.0 * q(0));
    f.y_star = f.a * f.x_star * f.x_star + f.b * f.x_star + f.c;
  }
  return f;
}

PowerLawFit fit_powerlaw(std::span<const double> x, std::span<const double> y) {
  const long n = static_cast<long>(x.size());
  if (n != static_cast<long>(y.size())) throw ConfigError("fit_powerlaw: x and y differ in length");
  if (n < 2) throw ConfigError("fit_powerlaw: need at least 2 points");
  Eigen::MatrixXd A(n, 2);
  Eigen::VectorXd b(n);
  for (long i = 0; i < n; ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw ConfigError("fit_powerlaw: values must be positive");
    A(i, 0) = std::log10(x[i]);
    A(i, 1) = 1.0;
    b(i) = std::log10(y[i]);
  }
  const double mean = A.col(0).mean();
  A.col(0).array() -= mean;
  if (A.col(0).norm() == 0.0) throw ConfigError("fit_powerlaw: x values are all equal");
  const Eigen::Vector2d q = A.colPivHouseholderQr().solve(b);
  PowerLawFit f;
  f.exponent = q(0);
  f.intercept = q(1) - q(0) * mean;
  f.residual_rms = std::sqrt((A * q - b).squaredNorm() / n);
  return f;
}

double extrapolate(const PowerLawFit& fit, double x) {
  if (!(x > 0.0)) throw ConfigError("extrapolate: x must be positive");
  return std::pow(10.0, fit.intercept + fit.exponent * std::log10(x));
}

std::string to_json(const ParabolaFit& f, double budget) {
  nlohmann::json j{{"budget", budget}, {"a", f.a},     {"b", f.b},
                   {"c", f.c},         {"residual", f.residual_rms},
                   {"has_minimum", f.has_minimum}};
  j["x_star"] = f.has_minimum ? nlohmann::json(f.x_star) : nlohmann::json(nullptr);
  j["loss_star"] = f.has_minimum ? nlohmann::json(f.y_star) : nlohmann::json(nullptr);
  return j.dump();
}

std::string to_json(const PowerLawFit& f) {
  return nlohmann::json{{"exponent", f.exponent}, {"intercept", f.intercept}, {"residual", f.residual_rms}}
      .dump();
}

}  // namespace swinscale
