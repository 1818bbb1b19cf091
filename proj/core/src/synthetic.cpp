#include "swinscale/synthetic.hpp"

#include <cmath>
#include <random>
#include <string>

#include "swinscale/util.hpp"

namespace swinscale {

void SyntheticProcessSpec::validate(const GridSpec& grid) const {
  if (n_channels < 1) throw ConfigError("process: n_channels must be >= 1");
  if (static_cast<int>(rotation_rates.size()) != n_channels) {
    throw ConfigError("process: rotation_rates must have n_channels entries");
  }
  if (static_cast<int>(diffusivities.size()) != n_channels) {
    throw ConfigError("process: diffusivities must have n_channels entries");
  }
  for (double nu : diffusivities) {
    if (nu < 0.0) throw ConfigError("process: diffusivities must be >= 0");
  }
  if (!(spectral_slope > 1.0)) throw ConfigError("process: spectral_slope must be > 1");
  if (band_limit < 0) throw ConfigError("process: band_limit must be >= 0");
  if (band_limit > grid.max_degree()) {
    throw ConfigError("process: band_limit " + std::to_string(band_limit) +
                      " exceeds grid capacity " + std::to_string(grid.max_degree()));
  }
  if (time_period < 1) throw ConfigError("process: time_period must be >= 1");
}

std::vector<SHTCoeffs> initial_coefficients(const SyntheticProcessSpec& process) {
  std::vector<SHTCoeffs> out;
  out.reserve(process.n_channels);
  const int L = process.band_limit;
  for (int c = 0; c < process.n_channels; ++c) {
    std::mt19937_64 rng(splitmix64(process.seed * 0x9e3779b97f4a7c15ULL + c));
    SHTCoeffs a(L);
    for (int l = 0; l <= L; ++l) {
      const double var = std::pow(1.0 + l, -process.spectral_slope);
      a.at(l, 0) = cplx(std::sqrt(var) * standard_normal(rng), 0.0);
      for (int m = 1; m <= l; ++m) {
        const double s = std::sqrt(var / 2.0);
        a.at(l, m) = cplx(s * standard_normal(rng), s * standard_normal(rng));
        a.at(l, -m) = ((m % 2 == 0) ? 1.0 : -1.0) * std::conj(a.at(l, m));
      }
    }
    out.push_back(std::move(a));
  }
  return out;
}

void evolve(SHTCoeffs& coeffs, const SyntheticProcessSpec& process, int channel, long steps) {
  const double nu = process.diffusivities.at(channel);
  const double omega = process.rotation_rates.at(channel);
  for (int l = 0; l <= coeffs.band_limit; ++l) {
    const double decay = std::exp(-nu * l * (l + 1.0) * static_cast<double>(steps));
    for (int m = -l; m <= l; ++m) {
      coeffs.at(l, m) *= decay * std::polar(1.0, -m * omega * static_cast<double>(steps));
    }
  }
}

double time_fraction(long index, int period) {
  long r = index % period;
  if (r < 0) r += period;
  return static_cast<double>(r) / period;
}

std::vector<FieldSample> generate_sequence(const SyntheticProcessSpec& process,
                                           const GridSpec& grid, long n_steps) {
  process.validate(grid);
  SphericalTransform sht(grid, process.band_limit);
  auto coeffs = initial_coefficients(process);
  std::vector<FieldSample> out;
  out.reserve(n_steps);
  for (long n = 0; n < n_steps; ++n) {
    FieldSample s;
    s.index = n;
    s.time_frac = time_fraction(n, process.time_period);
    s.values = Field(process.n_channels, grid.n_lat, grid.n_lon);
    for (int c = 0; c < process.n_channels; ++c) {
      const auto plane = sht.inverse(coeffs[c]);
      std::copy(plane.begin(), plane.end(), s.values.channel(c));
      evolve(coeffs[c], process, c, 1);
    }
    out.push_back(std::move(s));
  }
  return out;
}

SyntheticStepper::SyntheticStepper(SyntheticProcessSpec process, const GridSpec& grid)
    : process_(std::move(process)), transform_(grid, process_.band_limit) {
  process_.validate(grid);
}

Field SyntheticStepper::step(const Field& f) const {
  if (f.channels != process_.n_channels || f.height != transform_.grid().n_lat ||
      f.width != transform_.grid().n_lon) {
    throw ShapeError("SyntheticStepper: field shape does not match process/grid");
  }
  Field out(f.channels, f.height, f.width);
  for (int c = 0; c < f.channels; ++c) {
    auto a = transform_.forward(std::span<const double>(f.channel(c), f.plane()));
    evolve(a, process_, c, 1);
    const auto plane = transform_.inverse(a);
    std::copy(plane.begin(), plane.end(), out.channel(c));
  }
  return out;
}

}  // namespace swinscale
