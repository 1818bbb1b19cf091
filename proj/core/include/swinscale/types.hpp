#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace swinscale {

// Row-major so that one row is one token and Eigen::Map over std::vector
// storage matches the natural [tokens, features] layout.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or arguments; the CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes that do not line up with a model/grid configuration.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or diverged optimization; the CLI maps this to exit code 3.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// C x H x W block of doubles, channel-major then row-major.
struct Field {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  Field() = default;
  Field(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w),
        values(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return values.size(); }

  double& at(int c, int h, int w) {
    return values[static_cast<std::size_t>(c) * plane() + static_cast<std::size_t>(h) * width + w];
  }
  double at(int c, int h, int w) const {
    return values[static_cast<std::size_t>(c) * plane() + static_cast<std::size_t>(h) * width + w];
  }

  double* channel(int c) { return values.data() + static_cast<std::size_t>(c) * plane(); }
  const double* channel(int c) const {
    return values.data() + static_cast<std::size_t>(c) * plane();
  }

  bool same_shape(const Field& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

// One snapshot u_n of the state together with its normalized time coordinate.
struct FieldSample {
  long index = 0;
  Field values;
  double time_frac = 0.0;
};

}  // namespace swinscale
