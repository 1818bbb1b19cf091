#pragma once

#include <complex>
#include <span>
#include <vector>

#include "swinscale/grid.hpp"

namespace swinscale {

using cplx = std::complex<double>;

// Spherical-harmonic coefficients a_lm, 0 <= l <= L, -l <= m <= l, stored
// densely at l*l + l + m. Orthonormal convention with the Condon-Shortley
// phase, so real fields satisfy a_{l,-m} = (-1)^m conj(a_lm).
struct SHTCoeffs {
  int band_limit = 0;
  std::vector<cplx> coeffs;

  SHTCoeffs() = default;
  explicit SHTCoeffs(int L)
      : band_limit(L), coeffs(static_cast<std::size_t>(L + 1) * (L + 1)) {}

  static std::size_t index(int l, int m) {
    return static_cast<std::size_t>(l) * l + l + m;
  }
  cplx& at(int l, int m) { return coeffs[index(l, m)]; }
  const cplx& at(int l, int m) const { return coeffs[index(l, m)]; }

  // Largest |a_{l,-m} - (-1)^m conj(a_lm)| over the stored coefficients.
  double symmetry_defect() const;
};

// Analysis/synthesis pair for one grid and band limit. The normalized
// associated Legendre table is built once in the constructor and never
// mutated afterwards, so one instance may be shared across threads.
class SphericalTransform {
 public:
  SphericalTransform(const GridSpec& grid, int band_limit);

  const GridSpec& grid() const { return grid_; }
  int band_limit() const { return band_limit_; }

  // a_lm = sum_h sum_w q_h (2pi/W) f(h,w) conj(Y_lm(h,w)); field is H x W.
  SHTCoeffs forward(std::span<const double> field) const;

  // Pointwise synthesis sum a_lm Y_lm. Rejects coefficients that are not
  // conjugate-symmetric; the imaginary residue is checked and dropped.
  std::vector<double> inverse(const SHTCoeffs& coeffs) const;

  // Adjoint of forward(): maps dL/da (as dL/dRe + i dL/dIm per coefficient,
  // all m treated as independent) to dL/df on the grid.
  void forward_adjoint(const SHTCoeffs& grad, std::span<double> out) const;

  // Orthonormal P_lm(sin lat_h) for m >= 0 (includes the Condon-Shortley phase).
  double legendre(int h, int l, int m) const {
    return plm_[static_cast<std::size_t>(h) * n_lm_ + lm(l, m)];
  }

 private:
  static std::size_t lm(int l, int m) { return static_cast<std::size_t>(l) * (l + 1) / 2 + m; }
  // Full complex synthesis for -L <= m <= L; returns (real, imag) planes.
  void synthesize(const SHTCoeffs& c, std::vector<double>& re, std::vector<double>* im) const;

  GridSpec grid_;
  int band_limit_;
  std::size_t n_lm_;
  std::vector<double> plm_;
  std::vector<double> cos_;  // cos(m * lon_w), [m][w]
  std::vector<double> sin_;
};

SHTCoeffs sht_forward(std::span<const double> field, const GridSpec& grid, int band_limit);
std::vector<double> sht_inverse(const SHTCoeffs& coeffs, const GridSpec& grid);

// Evaluate Y_lm at (latitude, longitude) directly, without tables.
cplx spherical_harmonic(int l, int m, double latitude, double longitude);

// PSD_l = (1/(2l+1)) sum_m |a_lm|^2.
std::vector<double> psd(const SHTCoeffs& coeffs);

struct CoherenceResult {
  std::vector<double> value;  // 0 where undefined
  std::vector<bool> defined;  // false when either input has zero power at l
};

// Per-degree coherence normalized so that coherence(u, u) = 1:
// sum_m Re(u_lm conj(v_lm)) / ((2l+1) sqrt(PSD_l(u) PSD_l(v))).
CoherenceResult coherence(const SHTCoeffs& u, const SHTCoeffs& v);

}  // namespace swinscale
