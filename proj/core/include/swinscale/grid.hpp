#pragma once

#include <string>
#include <vector>

namespace swinscale {

enum class GridKind { gauss_legendre, equiangular };

std::string to_string(GridKind kind);
GridKind grid_kind_from_string(const std::string& s);

// Latitude-longitude grid on the sphere. Rows run north to south.
struct GridSpec {
  int n_lat = 0;
  int n_lon = 0;
  GridKind kind = GridKind::gauss_legendre;
  std::vector<double> latitudes;     // radians, decreasing
  std::vector<double> longitudes;    // radians, k * 2pi / n_lon
  std::vector<double> quad_weights;  // weights for d(sin lat); sum to 2
  std::vector<double> area_weights;  // proportional to cos(lat), grid mean 1

  // Largest spherical-harmonic degree the grid resolves exactly:
  // bounded by the latitude quadrature and by longitudinal aliasing.
  int max_degree() const;
};

// Gauss-Legendre rows put latitudes at the Legendre nodes (exact quadrature);
// equiangular rows are cell-centred with Fejer-type weights (approximate).
GridSpec make_grid(int n_lat, int n_lon, GridKind kind = GridKind::gauss_legendre);

// Nodes (descending) and weights of the n-point Gauss-Legendre rule on [-1, 1].
void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights);

}  // namespace swinscale
