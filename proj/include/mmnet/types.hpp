#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace mmnet {

/// Pixel coordinates: x to the right, y down, origin at the top-left corner.
struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct BBox {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

  double longer_side() const { return std::max(x1 - x0, y1 - y0); }
  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Matched keypoints of one image pair in the canonical (resized) frame.
struct KeypointAnnotation {
  std::vector<Point> source;
  std::vector<Point> target;
  double source_w = 0.0, source_h = 0.0;  // image extents the points live in
  double target_w = 0.0, target_h = 0.0;
  std::optional<BBox> source_bbox;
  std::optional<BBox> target_bbox;

  std::size_t size() const { return source.size(); }
};

/// The image domain is [0, w) x [0, h).
inline bool inside(const Point& p, double w, double h) {
  return p.x >= 0.0 && p.y >= 0.0 && p.x < w && p.y < h;
}

}  // namespace mmnet
