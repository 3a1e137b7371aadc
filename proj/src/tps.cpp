#include "mmnet/tps.hpp"

namespace mmnet {

Point TpsWarp::apply(const Point& p) const {
  double x = affine(0, 0) + affine(1, 0) * p.x + affine(2, 0) * p.y;
  double y = affine(0, 1) + affine(1, 1) * p.x + affine(2, 1) * p.y;
  for (std::size_t i = 0; i < control.size(); ++i) {
    const double dx = p.x - control[i].x, dy = p.y - control[i].y;
    const double u = tps_radial(dx * dx + dy * dy);
    x += weights(static_cast<Index>(i), 0) * u;
    y += weights(static_cast<Index>(i), 1) * u;
  }
  return {x, y};
}

std::vector<Point> TpsWarp::apply(const std::vector<Point>& points) const {
  std::vector<Point> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(apply(p));
  return out;
}

Eigen::Matrix2d TpsWarp::jacobian(const Point& p) const {
  Eigen::Matrix2d j;
  j << affine(1, 0), affine(2, 0), affine(1, 1), affine(2, 1);
  for (std::size_t i = 0; i < control.size(); ++i) {
    const double dx = p.x - control[i].x, dy = p.y - control[i].y;
    const double r2 = dx * dx + dy * dy;
    if (r2 == 0.0) continue;
    const double g = 2.0 * (std::log(r2) + 1.0);  // dU/dx = g * dx
    const auto row = static_cast<Index>(i);
    j(0, 0) += weights(row, 0) * g * dx;
    j(0, 1) += weights(row, 0) * g * dy;
    j(1, 0) += weights(row, 1) * g * dx;
    j(1, 1) += weights(row, 1) * g * dy;
  }
  return j;
}

TpsWarp tps_fit(const std::vector<Point>& src, const std::vector<Point>& dst, double lambda) {
  if (src.size() != dst.size()) throw TpsError("tps: control point lists differ in length");
  if (src.size() < 3) throw TpsError("tps: need at least 3 control points");
  if (!(lambda >= 0.0)) throw TpsError("tps: regularisation must be >= 0");
  const Index n = static_cast<Index>(src.size());
  Eigen::MatrixXd p(n, 3);
  for (Index i = 0; i < n; ++i) p.row(i) << 1.0, src[i].x, src[i].y;
  Eigen::FullPivLU<Eigen::MatrixXd> affine_rank(p);
  if (affine_rank.rank() < 3) throw TpsError("tps: control points are collinear");
  for (Index i = 0; i < n; ++i)
    for (Index k = i + 1; k < n; ++k) {
      if (src[i] == src[k]) {
        throw TpsError("tps: duplicated control point (" + std::to_string(src[i].x) + ", " +
                       std::to_string(src[i].y) + ")");
      }
    }

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + 3, n + 3);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < n; ++k) {
      const double dx = src[i].x - src[k].x, dy = src[i].y - src[k].y;
      a(i, k) = tps_radial(dx * dx + dy * dy);
    }
  a.topLeftCorner(n, n).diagonal().array() += lambda;
  a.topRightCorner(n, 3) = p;
  a.bottomLeftCorner(3, n) = p.transpose();
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n + 3, 2);
  for (Index i = 0; i < n; ++i) b.row(i) << dst[i].x, dst[i].y;

  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  if (!lu.isInvertible()) throw TpsError("tps: singular system");
  const Eigen::MatrixXd sol = lu.solve(b);
  TpsWarp warp;
  warp.control = src;
  warp.weights = sol.topRows(n);
  warp.affine = sol.bottomRows(3);
  return warp;
}

Image warp_image(const Image& image, const TpsWarp& map, Index out_h, Index out_w) {
  Image out(Shape{3, out_h, out_w});
  float px[3];
  for (Index i = 0; i < out_h; ++i)
    for (Index j = 0; j < out_w; ++j) {
      const Point q = map.apply(Point{static_cast<double>(j), static_cast<double>(i)});
      sample_bilinear(image, q.x, q.y, px);
      for (Index c = 0; c < 3; ++c) out[(c * out_h + i) * out_w + j] = px[c];
    }
  return out;
}

}  // namespace mmnet
