#include <gtest/gtest.h>

#include <sstream>

#include "swinscale/util.hpp"

using namespace swinscale;

TEST(Fnv1a, KnownVectors) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ULL);
}

TEST(Hex64, FixedWidthLowercase) {
  EXPECT_EQ(hex64(0), "0000000000000000");
  EXPECT_EQ(hex64(0xABCDEF0123456789ULL), "abcdef0123456789");
}

TEST(Rng, Uniform01InUnitInterval) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 10000; ++i) {
    const double u = uniform01(rng);
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Rng, StandardNormalMoments) {
  std::mt19937_64 rng(6);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = standard_normal(rng);
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, UniformBelowCoversRange) {
  std::mt19937_64 rng(7);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) ++hits[uniform_below(rng, 7)];
  for (int h : hits) EXPECT_GT(h, 800);
}

TEST(BinIO, RoundTrip) {
  std::stringstream ss;
  binio::write<std::int32_t>(ss, -42);
  binio::write_string(ss, "hello");
  const std::vector<double> v{1.5, -0.0, 1e-300, 3.25};
  binio::write_doubles(ss, v);
  EXPECT_EQ(binio::read<std::int32_t>(ss), -42);
  EXPECT_EQ(binio::read_string(ss), "hello");
  EXPECT_EQ(binio::read_doubles(ss), v);
  EXPECT_THROW(binio::read<std::int64_t>(ss), Error);
}

TEST(VectorHelpers, DotAndDiff) {
  const std::vector<double> a{1, 2, 3}, b{4, -5, 6};
  EXPECT_EQ(dot(a, b), 12.0);
  EXPECT_EQ(max_abs_diff(a, b), 7.0);
  EXPECT_TRUE(all_finite(a));
  const std::vector<double> c{1.0, std::nan("")};
  EXPECT_FALSE(all_finite(c));
}
