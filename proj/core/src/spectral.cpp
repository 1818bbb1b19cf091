#include "swinscale/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "swinscale/types.hpp"

namespace swinscale {

double SHTCoeffs::symmetry_defect() const {
  double worst = 0.0;
  for (int l = 0; l <= band_limit; ++l) {
    for (int m = 0; m <= l; ++m) {
      const double sign = (m % 2 == 0) ? 1.0 : -1.0;
      worst = std::max(worst, std::abs(at(l, -m) - sign * std::conj(at(l, m))));
    }
  }
  return worst;
}

SphericalTransform::SphericalTransform(const GridSpec& grid, int band_limit)
    : grid_(grid), band_limit_(band_limit) {
  if (band_limit < 0) throw ConfigError("SphericalTransform: negative band limit");
  if (band_limit > grid.max_degree()) {
    throw ConfigError("SphericalTransform: band limit " + std::to_string(band_limit) +
                      " exceeds grid capacity " + std::to_string(grid.max_degree()));
  }
  const int L = band_limit;
  const int H = grid.n_lat;
  const int W = grid.n_lon;
  n_lm_ = lm(L, L) + 1;
  plm_.assign(static_cast<std::size_t>(H) * n_lm_, 0.0);

  for (int h = 0; h < H; ++h) {
    const double x = std::sin(grid.latitudes[h]);
    const double s = std::cos(grid.latitudes[h]);
    double* p = plm_.data() + static_cast<std::size_t>(h) * n_lm_;
    double pmm = 1.0 / std::sqrt(4.0 * M_PI);
    for (int m = 0; m <= L; ++m) {
      if (m > 0) pmm *= -std::sqrt((2.0 * m + 1.0) / (2.0 * m)) * s;
      p[lm(m, m)] = pmm;
      if (m + 1 <= L) p[lm(m + 1, m)] = std::sqrt(2.0 * m + 3.0) * x * pmm;
      for (int l = m + 2; l <= L; ++l) {
        const double a = std::sqrt((4.0 * l * l - 1.0) / (static_cast<double>(l) * l - m * m));
        const double b = std::sqrt((static_cast<double>(l - 1) * (l - 1) - m * m) /
                                   (4.0 * (l - 1) * (l - 1) - 1.0));
        p[lm(l, m)] = a * (x * p[lm(l - 1, m)] - b * p[lm(l - 2, m)]);
      }
    }
  }

  cos_.resize(static_cast<std::size_t>(L + 1) * W);
  sin_.resize(cos_.size());
  for (int m = 0; m <= L; ++m) {
    for (int w = 0; w < W; ++w) {
      // reduce the angle exactly on the integer lattice before evaluating
      const long k = (static_cast<long>(m) * w) % W;
      const double ang = 2.0 * M_PI * static_cast<double>(k) / W;
      cos_[static_cast<std::size_t>(m) * W + w] = std::cos(ang);
      sin_[static_cast<std::size_t>(m) * W + w] = std::sin(ang);
    }
  }
}

SHTCoeffs SphericalTransform::forward(std::span<const double> field) const {
  const int L = band_limit_;
  const int H = grid_.n_lat;
  const int W = grid_.n_lon;
  if (field.size() != static_cast<std::size_t>(H) * W) {
    throw ShapeError("sht forward: field size does not match grid");
  }
  SHTCoeffs out(L);
  std::vector<cplx> fm(L + 1);
  const double dphi = 2.0 * M_PI / W;
  for (int h = 0; h < H; ++h) {
    const double* row = field.data() + static_cast<std::size_t>(h) * W;
    for (int m = 0; m <= L; ++m) {
      const double* c = cos_.data() + static_cast<std::size_t>(m) * W;
      const double* s = sin_.data() + static_cast<std::size_t>(m) * W;
      double re = 0.0, im = 0.0;
      for (int w = 0; w < W; ++w) {
        re += row[w] * c[w];
        im -= row[w] * s[w];
      }
      fm[m] = cplx(re, im) * (dphi * grid_.quad_weights[h]);
    }
    const double* p = plm_.data() + static_cast<std::size_t>(h) * n_lm_;
    for (int m = 0; m <= L; ++m) {
      for (int l = m; l <= L; ++l) out.at(l, m) += p[lm(l, m)] * fm[m];
    }
  }
  for (int l = 1; l <= L; ++l) {
    for (int m = 1; m <= l; ++m) {
      const double sign = (m % 2 == 0) ? 1.0 : -1.0;
      out.at(l, -m) = sign * std::conj(out.at(l, m));
    }
  }
  return out;
}

void SphericalTransform::synthesize(const SHTCoeffs& c, std::vector<double>& re,
                                    std::vector<double>* im) const {
  if (c.band_limit > band_limit_) {
    throw ConfigError("sht synthesis: coefficients exceed transform band limit");
  }
  const int L = c.band_limit;
  const int H = grid_.n_lat;
  const int W = grid_.n_lon;
  re.assign(static_cast<std::size_t>(H) * W, 0.0);
  if (im) im->assign(re.size(), 0.0);
  std::vector<cplx> gpos(L + 1), gneg(L + 1);
  for (int h = 0; h < H; ++h) {
    const double* p = plm_.data() + static_cast<std::size_t>(h) * n_lm_;
    for (int m = 0; m <= L; ++m) {
      cplx sp = 0.0, sn = 0.0;
      for (int l = m; l <= L; ++l) {
        sp += c.at(l, m) * p[lm(l, m)];
        if (m > 0) sn += c.at(l, -m) * p[lm(l, m)];
      }
      gpos[m] = sp;
      // P_{l,-m} = (-1)^m P_lm
      gneg[m] = (m % 2 == 0) ? sn : -sn;
    }
    double* out_re = re.data() + static_cast<std::size_t>(h) * W;
    double* out_im = im ? im->data() + static_cast<std::size_t>(h) * W : nullptr;
    for (int w = 0; w < W; ++w) {
      double r = gpos[0].real();
      double i = gpos[0].imag();
      for (int m = 1; m <= L; ++m) {
        const double cw = cos_[static_cast<std::size_t>(m) * W + w];
        const double sw = sin_[static_cast<std::size_t>(m) * W + w];
        // gpos e^{+i m phi} + gneg e^{-i m phi}
        r += (gpos[m].real() + gneg[m].real()) * cw - (gpos[m].imag() - gneg[m].imag()) * sw;
        i += (gpos[m].imag() + gneg[m].imag()) * cw + (gpos[m].real() - gneg[m].real()) * sw;
      }
      out_re[w] = r;
      if (out_im) out_im[w] = i;
    }
  }
}

std::vector<double> SphericalTransform::inverse(const SHTCoeffs& coeffs) const {
  double scale = 1.0;
  for (const auto& a : coeffs.coeffs) scale = std::max(scale, std::abs(a));
  if (coeffs.symmetry_defect() > 1e-12 * scale) {
    throw Error("sht inverse: coefficients are not conjugate-symmetric (not a real field)");
  }
  std::vector<double> re, im;
  synthesize(coeffs, re, &im);
  double residue = 0.0;
  for (double v : im) residue = std::max(residue, std::abs(v));
  if (residue > 1e-10 * scale) {
    throw NumericalError("sht inverse: imaginary residue " + std::to_string(residue));
  }
  return re;
}

void SphericalTransform::forward_adjoint(const SHTCoeffs& grad, std::span<double> out) const {
  const int H = grid_.n_lat;
  const int W = grid_.n_lon;
  if (out.size() != static_cast<std::size_t>(H) * W) {
    throw ShapeError("sht adjoint: output size does not match grid");
  }
  std::vector<double> re;
  synthesize(grad, re, nullptr);
  const double dphi = 2.0 * M_PI / W;
  for (int h = 0; h < H; ++h) {
    const double q = grid_.quad_weights[h] * dphi;
    for (int w = 0; w < W; ++w) {
      out[static_cast<std::size_t>(h) * W + w] = q * re[static_cast<std::size_t>(h) * W + w];
    }
  }
}

SHTCoeffs sht_forward(std::span<const double> field, const GridSpec& grid, int band_limit) {
  return SphericalTransform(grid, band_limit).forward(field);
}

std::vector<double> sht_inverse(const SHTCoeffs& coeffs, const GridSpec& grid) {
  return SphericalTransform(grid, coeffs.band_limit).inverse(coeffs);
}

cplx spherical_harmonic(int l, int m, double latitude, double longitude) {
  const int am = std::abs(m);
  if (am > l) return 0.0;
  const double theta = M_PI / 2 - latitude;
  const double base = std::sph_legendre(static_cast<unsigned>(l), static_cast<unsigned>(am), theta);
  const cplx y = base * std::polar(1.0, am * longitude);
  if (m >= 0) return y;
  return (am % 2 == 0 ? 1.0 : -1.0) * std::conj(y);
}

std::vector<double> psd(const SHTCoeffs& coeffs) {
  std::vector<double> out(coeffs.band_limit + 1, 0.0);
  for (int l = 0; l <= coeffs.band_limit; ++l) {
    double s = 0.0;
    for (int m = -l; m <= l; ++m) s += std::norm(coeffs.at(l, m));
    out[l] = s / (2.0 * l + 1.0);
  }
  return out;
}

CoherenceResult coherence(const SHTCoeffs& u, const SHTCoeffs& v) {
  if (u.band_limit != v.band_limit) throw ShapeError("coherence: band limits differ");
  const int L = u.band_limit;
  CoherenceResult r;
  r.value.assign(L + 1, 0.0);
  r.defined.assign(L + 1, false);
  const auto pu = psd(u);
  const auto pv = psd(v);
  for (int l = 0; l <= L; ++l) {
    if (!(pu[l] > 0.0) || !(pv[l] > 0.0)) continue;
    double cross = 0.0;
    for (int m = -l; m <= l; ++m) cross += (u.at(l, m) * std::conj(v.at(l, m))).real();
    r.value[l] = cross / ((2.0 * l + 1.0) * std::sqrt(pu[l] * pv[l]));
    r.defined[l] = true;
  }
  return r;
}

}  // namespace swinscale
