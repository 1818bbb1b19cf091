#include "swinscale/grid.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "swinscale/types.hpp"

namespace swinscale {

std::string to_string(GridKind kind) {
  return kind == GridKind::gauss_legendre ? "gauss-legendre" : "equiangular";
}

GridKind grid_kind_from_string(const std::string& s) {
  if (s == "gauss-legendre" || s == "gauss") return GridKind::gauss_legendre;
  if (s == "equiangular") return GridKind::equiangular;
  throw ConfigError("unknown grid kind '" + s + "'");
}

int GridSpec::max_degree() const {
  return std::min(n_lat - 1, n_lon / 2 - 1);
}

void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
  nodes.assign(n, 0.0);
  weights.assign(n, 0.0);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    // refresh derivative at the converged node
    double p0 = 1.0, p1 = x;
    for (int k = 2; k <= n; ++k) {
      const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = p2;
    }
    dp = n * (x * p1 - p0) / (x * x - 1.0);
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    nodes[i] = x;
    nodes[n - 1 - i] = -x;
    weights[i] = w;
    weights[n - 1 - i] = w;
  }
  if (n % 2 == 1) nodes[n / 2] = 0.0;
}

namespace {

// Fejer's first rule on the cell-centred colatitudes (k + 1/2) pi / n.
std::vector<double> fejer_weights(int n) {
  std::vector<double> w(n);
  for (int k = 0; k < n; ++k) {
    const double theta = (k + 0.5) * M_PI / n;
    double s = 0.0;
    for (int j = 1; j <= n / 2; ++j) s += std::cos(2.0 * j * theta) / (4.0 * j * j - 1.0);
    w[k] = 2.0 / n * (1.0 - 2.0 * s);
  }
  return w;
}

}  // namespace

GridSpec make_grid(int n_lat, int n_lon, GridKind kind) {
  if (n_lat < 2) throw ConfigError("make_grid: n_lat must be >= 2");
  if (n_lon < 4) throw ConfigError("make_grid: n_lon must be >= 4");
  if (n_lon % 2 != 0) throw ConfigError("make_grid: n_lon must be even");

  GridSpec g;
  g.n_lat = n_lat;
  g.n_lon = n_lon;
  g.kind = kind;
  g.latitudes.resize(n_lat);
  g.longitudes.resize(n_lon);
  for (int k = 0; k < n_lon; ++k) g.longitudes[k] = 2.0 * M_PI * k / n_lon;

  if (kind == GridKind::gauss_legendre) {
    std::vector<double> x;
    gauss_legendre(n_lat, x, g.quad_weights);
    for (int h = 0; h < n_lat; ++h) g.latitudes[h] = std::asin(x[h]);
  } else {
    g.quad_weights = fejer_weights(n_lat);
    for (int h = 0; h < n_lat; ++h) g.latitudes[h] = M_PI / 2 - (h + 0.5) * M_PI / n_lat;
  }

  g.area_weights.resize(n_lat);
  double sum = 0.0;
  for (int h = 0; h < n_lat; ++h) sum += std::cos(g.latitudes[h]);
  for (int h = 0; h < n_lat; ++h) g.area_weights[h] = std::cos(g.latitudes[h]) * n_lat / sum;
  return g;
}

}  // namespace swinscale
