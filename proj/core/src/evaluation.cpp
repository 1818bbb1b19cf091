#include "swinscale/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

#include "swinscale/util.hpp"

namespace swinscale {

std::vector<Field> EmulatorModel::step(std::span<const FieldSample> states) const {
  std::vector<Field> out;
  out.reserve(states.size());
  for (std::size_t i = 0; i < states.size(); i += static_cast<std::size_t>(max_batch_)) {
    const auto chunk = states.subspan(i, std::min<std::size_t>(max_batch_, states.size() - i));
    auto r = forward(params_, chunk, grid_);
    for (auto& f : r.predictions) out.push_back(std::move(f));
  }
  return out;
}

std::vector<Field> OracleModel::step(std::span<const FieldSample> states) const {
  std::vector<Field> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(stepper_.step(s.values));
  return out;
}

std::vector<Field> rollout(const StepModel& model, const FieldSample& u0, int n_steps,
                           int time_period) {
  if (n_steps < 1) throw ConfigError("rollout: n_steps must be >= 1");
  std::vector<Field> out;
  FieldSample cur = u0;
  for (int k = 1; k <= n_steps; ++k) {
    auto next = model.step(std::span(&cur, 1));
    cur.values = std::move(next[0]);
    cur.index = u0.index + k;
    cur.time_frac = time_fraction(cur.index, time_period);
    out.push_back(cur.values);
  }
  return out;
}

std::vector<double> row_weights(const GridSpec& grid, int rows) {
  if (rows < 1 || rows > grid.n_lat) throw ShapeError("row_weights: bad row count");
  std::vector<double> w(grid.area_weights.begin(), grid.area_weights.begin() + rows);
  double mean = 0.0;
  for (double v : w) mean += v;
  mean /= rows;
  for (double& v : w) v /= mean;
  return w;
}

namespace {

double weighted_sq_error(const Field& pred, const Field& target, const std::vector<double>& w,
                         int channel) {
  const double* a = pred.channel(channel);
  const double* b = target.channel(channel);
  double s = 0.0;
  for (int h = 0; h < pred.height; ++h) {
    double row = 0.0;
    for (int x = 0; x < pred.width; ++x) {
      const double d = a[h * pred.width + x] - b[h * pred.width + x];
      row += d * d;
    }
    s += w[h] * row;
  }
  return s / static_cast<double>(pred.plane());
}

}  // namespace

double area_rmse(const Field& pred, const Field& target, const GridSpec& grid, int channel) {
  if (!pred.same_shape(target)) throw ShapeError("area_rmse: shape mismatch");
  if (pred.width != grid.n_lon) throw ShapeError("area_rmse: field width does not match grid");
  if (channel < 0 || channel >= pred.channels) throw ShapeError("area_rmse: channel out of range");
  return std::sqrt(weighted_sq_error(pred, target, row_weights(grid, pred.height), channel));
}

std::vector<long> initial_conditions(long split_len, int n_steps, int ic_stride) {
  if (n_steps < 1 || ic_stride < 1) throw ConfigError("rollout evaluation: n_steps and ic_stride must be >= 1");
  std::vector<long> ics;
  for (long i = 0; i + n_steps < split_len; i += ic_stride) ics.push_back(i);
  return ics;
}

RolloutReport evaluate_rollouts(const StepModel& model, std::span<const FieldSample> split,
                                int n_steps, int ic_stride, const GridSpec& grid,
                                RmseAggregation aggregation) {
  const auto ics = initial_conditions(static_cast<long>(split.size()), n_steps, ic_stride);
  if (ics.empty()) throw ConfigError("evaluate_rollouts: split too short for any initial condition");
  const int C = split[0].values.channels;
  const auto w = row_weights(grid, split[0].values.height);

  RolloutReport r;
  r.n_ics = static_cast<int>(ics.size());
  r.ic_stride = ic_stride;
  r.aggregation = aggregation;
  r.rmse.assign(C, {});

  std::vector<FieldSample> states;
  for (long i : ics) states.push_back(split[i]);
  for (int k = 1; k <= n_steps; ++k) {
    auto preds = model.step(states);
    bool finite = true;
    for (const auto& p : preds) finite = finite && all_finite(p.values);
    if (!finite) {
      r.truncated = true;
      break;
    }
    std::vector<double> acc(C, 0.0);
    double mse = 0.0;
    for (std::size_t n = 0; n < ics.size(); ++n) {
      const auto& truth = split[ics[n] + k];
      for (int c = 0; c < C; ++c) {
        const double e = weighted_sq_error(preds[n], truth.values, w, c);
        acc[c] += aggregation == RmseAggregation::mean_of_rmse ? std::sqrt(e) : e;
      }
      double s = 0.0;
      for (std::size_t i = 0; i < preds[n].values.size(); ++i) {
        const double d = preds[n].values[i] - truth.values.values[i];
        s += d * d;
      }
      mse += s / static_cast<double>(preds[n].values.size());
      states[n].values = std::move(preds[n]);
      states[n].index = truth.index;
      states[n].time_frac = truth.time_frac;
    }
    const double n_ics = static_cast<double>(ics.size());
    for (int c = 0; c < C; ++c) {
      r.rmse[c].push_back(aggregation == RmseAggregation::mean_of_rmse ? acc[c] / n_ics
                                                                       : std::sqrt(acc[c] / n_ics));
    }
    r.mse.push_back(mse / n_ics);
    r.leads = k;
  }
  return r;
}

SpectrumReport spectrum_at_lead(const StepModel& model, std::span<const FieldSample> split,
                                int lead, const SphericalTransform& transform, int ic_stride) {
  if (lead < 1) throw ConfigError("spectrum_at_lead: lead must be >= 1");
  const auto ics = initial_conditions(static_cast<long>(split.size()), lead, ic_stride);
  if (ics.empty()) throw ConfigError("spectrum_at_lead: split too short for any initial condition");
  const int C = split[0].values.channels;
  const int L = transform.band_limit();
  const int raw_rows = transform.grid().n_lat;

  SpectrumReport r;
  r.lead = lead;
  r.band_limit = L;
  r.n_ics = static_cast<int>(ics.size());
  r.psd_pred.assign(C, std::vector<double>(L + 1, 0.0));
  r.psd_truth.assign(C, std::vector<double>(L + 1, 0.0));

  std::vector<FieldSample> states;
  for (long i : ics) states.push_back(split[i]);
  for (int k = 1; k <= lead; ++k) {
    auto preds = model.step(states);
    for (std::size_t n = 0; n < ics.size(); ++n) {
      const auto& truth = split[ics[n] + k];
      states[n].values = std::move(preds[n]);
      states[n].index = truth.index;
      states[n].time_frac = truth.time_frac;
    }
  }
  for (std::size_t n = 0; n < ics.size(); ++n) {
    const Field pred = restore_rows(states[n].values, raw_rows);
    const Field truth = restore_rows(split[ics[n] + lead].values, raw_rows);
    for (int c = 0; c < C; ++c) {
      const auto pp = psd(transform.forward({pred.channel(c), pred.plane()}));
      const auto pt = psd(transform.forward({truth.channel(c), truth.plane()}));
      for (int l = 0; l <= L; ++l) {
        r.psd_pred[c][l] += pp[l] / static_cast<double>(ics.size());
        r.psd_truth[c][l] += pt[l] / static_cast<double>(ics.size());
      }
    }
  }
  return r;
}

double psd_ratio_error(const SpectrumReport& r, int l_lo, int l_hi) {
  if (l_lo < 0 || l_hi > r.band_limit || l_lo > l_hi) throw ConfigError("psd_ratio_error: bad band");
  double s = 0.0;
  int n = 0;
  for (std::size_t c = 0; c < r.psd_pred.size(); ++c) {
    for (int l = l_lo; l <= l_hi; ++l) {
      if (r.psd_truth[c][l] <= 0.0) continue;
      s += std::abs(r.psd_pred[c][l] / r.psd_truth[c][l] - 1.0);
      ++n;
    }
  }
  if (n == 0) throw NumericalError("psd_ratio_error: truth has no power in the band");
  return s / n;
}

void write_rollout_csv(std::ostream& os, const RolloutReport& r) {
  char buf[128];
  os << "channel,lead,rmse\n";
  for (std::size_t c = 0; c < r.rmse.size(); ++c) {
    for (int k = 0; k < r.leads; ++k) {
      std::snprintf(buf, sizeof(buf), "%zu,%d,%.17g\n", c, k + 1, r.rmse[c][k]);
      os << buf;
    }
  }
}

void write_spectrum_csv(std::ostream& os, const SpectrumReport& r) {
  char buf[160];
  os << "channel,ell,psd_pred,psd_truth\n";
  for (std::size_t c = 0; c < r.psd_pred.size(); ++c) {
    for (int l = 0; l <= r.band_limit; ++l) {
      std::snprintf(buf, sizeof(buf), "%zu,%d,%.17g,%.17g\n", c, l, r.psd_pred[c][l], r.psd_truth[c][l]);
      os << buf;
    }
  }
}

}  // namespace swinscale
