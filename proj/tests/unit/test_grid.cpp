#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "swinscale/grid.hpp"
#include "swinscale/types.hpp"

using namespace swinscale;

TEST(GaussLegendre, IntegratesPolynomialsExactly) {
  for (int n : {2, 5, 12, 36}) {
    std::vector<double> x, w;
    gauss_legendre(n, x, w);
    for (int k = 0; k <= 2 * n - 1; ++k) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += w[i] * std::pow(x[i], k);
      const double exact = k % 2 == 1 ? 0.0 : 2.0 / (k + 1);
      EXPECT_NEAR(s, exact, 1e-13) << "n=" << n << " k=" << k;
    }
  }
}

TEST(GaussLegendre, NodesDescendingAndSymmetric) {
  std::vector<double> x, w;
  gauss_legendre(7, x, w);
  for (int i = 0; i + 1 < 7; ++i) EXPECT_GT(x[i], x[i + 1]);
  for (int i = 0; i < 7; ++i) {
    EXPECT_NEAR(x[i], -x[6 - i], 1e-15);
    EXPECT_NEAR(w[i], w[6 - i], 1e-15);
  }
}

TEST(MakeGrid, GaussRowsNorthToSouth) {
  const auto g = make_grid(8, 16);
  EXPECT_EQ(g.latitudes.size(), 8u);
  EXPECT_GT(g.latitudes.front(), 0.0);
  EXPECT_LT(g.latitudes.back(), 0.0);
  EXPECT_NEAR(std::accumulate(g.quad_weights.begin(), g.quad_weights.end(), 0.0), 2.0, 1e-13);
  EXPECT_DOUBLE_EQ(g.longitudes[1], 2.0 * M_PI / 16);
}

TEST(MakeGrid, AreaWeightsHaveUnitMeanAndFollowCosine) {
  for (auto kind : {GridKind::gauss_legendre, GridKind::equiangular}) {
    const auto g = make_grid(10, 20, kind);
    double mean = 0.0;
    for (double w : g.area_weights) mean += w;
    EXPECT_NEAR(mean / 10, 1.0, 1e-14);
    for (int h = 1; h < 10; ++h) {
      EXPECT_NEAR(g.area_weights[h] / g.area_weights[0],
                  std::cos(g.latitudes[h]) / std::cos(g.latitudes[0]), 1e-13);
    }
  }
}

TEST(MakeGrid, EquiangularIsCellCentred) {
  const auto g = make_grid(4, 8, GridKind::equiangular);
  EXPECT_NEAR(g.latitudes[0], M_PI / 2 - M_PI / 8, 1e-15);
  EXPECT_NEAR(g.latitudes[3], -(M_PI / 2 - M_PI / 8), 1e-15);
  double s = 0.0;
  for (double w : g.quad_weights) s += w;
  EXPECT_NEAR(s, 2.0, 1e-13);
}

TEST(MakeGrid, MaxDegree) {
  EXPECT_EQ(make_grid(36, 72).max_degree(), 35);
  EXPECT_EQ(make_grid(36, 40).max_degree(), 19);
}

TEST(MakeGrid, RejectsBadShapes) {
  EXPECT_THROW(make_grid(1, 16), ConfigError);
  EXPECT_THROW(make_grid(8, 2), ConfigError);
  EXPECT_THROW(make_grid(8, 15), ConfigError);
  EXPECT_THROW(grid_kind_from_string("hex"), ConfigError);
  EXPECT_EQ(grid_kind_from_string("gauss"), GridKind::gauss_legendre);
}
