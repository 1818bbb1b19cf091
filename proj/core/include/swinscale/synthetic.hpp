#pragma once

#include <cstdint>
#include <vector>

#include "swinscale/grid.hpp"
#include "swinscale/spectral.hpp"
#include "swinscale/types.hpp"

namespace swinscale {

// Per-channel solid-body rotation plus spectral diffusion of a random
// band-limited field. Linear and exactly solvable in spectral space:
//   a_lm(n+1) = a_lm(n) * exp(-nu_c l(l+1)) * exp(-i m omega_c)
struct SyntheticProcessSpec {
  int n_channels = 4;
  double spectral_slope = 2.5;          // initial variance (1 + l)^-slope
  std::vector<double> rotation_rates;   // radians per step
  std::vector<double> diffusivities;    // per step, >= 0
  int band_limit = 30;
  std::uint64_t seed = 0;
  int time_period = 64;                 // steps per normalized-time cycle

  void validate(const GridSpec& grid) const;
};

// Random initial coefficients for every channel (deterministic in seed).
std::vector<SHTCoeffs> initial_coefficients(const SyntheticProcessSpec& process);

// Advance one channel's coefficients by `steps` steps in place.
void evolve(SHTCoeffs& coeffs, const SyntheticProcessSpec& process, int channel, long steps = 1);

double time_fraction(long index, int period);

std::vector<FieldSample> generate_sequence(const SyntheticProcessSpec& process,
                                           const GridSpec& grid, long n_steps);

// Exact one-step map of the process applied to an arbitrary band-limited
// field: analyse, evolve, synthesise. Works in standardized space too since
// the map is linear and leaves constant fields unchanged.
class SyntheticStepper {
 public:
  SyntheticStepper(SyntheticProcessSpec process, const GridSpec& grid);
  Field step(const Field& f) const;

 private:
  SyntheticProcessSpec process_;
  SphericalTransform transform_;
};

}  // namespace swinscale
