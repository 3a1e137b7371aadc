#pragma once

// Thin-plate spline f(p) = a0 + a1 x + a2 y + sum_i w_i U(|p - c_i|), U(r) = r^2 log r^2.

#include "mmnet/image.hpp"

#include <Eigen/Dense>

namespace mmnet {

class TpsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline double tps_radial(double r2) { return r2 > 0.0 ? r2 * std::log(r2) : 0.0; }

struct TpsWarp {
  std::vector<Point> control;
  Eigen::MatrixX2d weights;          // radial weights, one row per control point
  Eigen::Matrix<double, 3, 2> affine;  // rows: constant, x, y

  Point apply(const Point& p) const;
  std::vector<Point> apply(const std::vector<Point>& points) const;
  Eigen::Matrix2d jacobian(const Point& p) const;  // d(out)/d(x, y)
};

/// Solves the bordered system [K + lambda I, P; P^T, 0] [W; A] = [dst; 0].
/// Needs at least 3 non-collinear, distinct control points.
TpsWarp tps_fit(const std::vector<Point>& src, const std::vector<Point>& dst, double lambda = 0.0);

/// Pull-back warp: out(x) = image(map(x)) with bilinear sampling, where `map` sends output
/// pixel coordinates to input pixel coordinates.
Image warp_image(const Image& image, const TpsWarp& map, Index out_h, Index out_w);

}  // namespace mmnet
