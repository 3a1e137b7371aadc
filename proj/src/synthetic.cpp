#include "mmnet/synthetic.hpp"

#include <algorithm>
#include <numbers>

namespace mmnet {

WarpFamily parse_warp_family(std::string_view name) {
  if (name == "affine") return WarpFamily::affine;
  if (name == "tps") return WarpFamily::tps;
  throw std::invalid_argument("unknown warp family '" + std::string(name) + "' (affine|tps)");
}

std::string to_string(WarpFamily family) { return family == WarpFamily::affine ? "affine" : "tps"; }

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

double normal(std::mt19937_64& rng) {
  const double u1 = 1.0 - uniform01(rng);  // (0, 1]
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Warp Warp::from_affine(const Eigen::Matrix<double, 2, 3>& source_to_target) {
  if (std::abs(source_to_target.leftCols<2>().determinant()) < 1e-12) {
    throw std::invalid_argument("affine warp is singular");
  }
  Warp w;
  w.family = WarpFamily::affine;
  w.affine = source_to_target;
  return w;
}

Warp Warp::from_inverse_tps(TpsWarp target_to_source) {
  Warp w;
  w.family = WarpFamily::tps;
  w.inverse_tps = std::move(target_to_source);
  return w;
}

Point Warp::inverse(const Point& t) const {
  if (inverse_tps) return inverse_tps->apply(t);
  const Eigen::Vector2d v =
      affine.leftCols<2>().inverse() * (Eigen::Vector2d(t.x, t.y) - affine.col(2));
  return {v.x(), v.y()};
}

std::optional<Point> Warp::forward(const Point& s) const {
  if (!inverse_tps) {
    const Eigen::Vector2d v = affine.leftCols<2>() * Eigen::Vector2d(s.x, s.y) + affine.col(2);
    return Point{v.x(), v.y()};
  }
  // Solve inverse(t) = s by Newton's method starting from a first-order guess.
  const Point back = inverse_tps->apply(s);
  Eigen::Vector2d t(2.0 * s.x - back.x, 2.0 * s.y - back.y);
  for (int it = 0; it < 50; ++it) {
    const Point q = inverse_tps->apply(Point{t.x(), t.y()});
    const Eigen::Vector2d r(q.x - s.x, q.y - s.y);
    if (r.norm() < 1e-11) {
      if (inverse_tps->jacobian(Point{t.x(), t.y()}).determinant() <= 0.0) return std::nullopt;
      return Point{t.x(), t.y()};
    }
    const Eigen::Matrix2d j = inverse_tps->jacobian(Point{t.x(), t.y()});
    if (std::abs(j.determinant()) < 1e-12) return std::nullopt;
    t -= j.partialPivLu().solve(r);
    if (!t.allFinite()) return std::nullopt;
  }
  return std::nullopt;
}

Texture render_texture(std::mt19937_64& rng, Index height, Index width, bool grid_lines) {
  Texture tex;
  tex.image = Image(Shape{3, height, width});
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  const Index plane = height * width;
  std::vector<double> acc(static_cast<std::size_t>(3 * plane));

  // smooth background ramp
  for (Index c = 0; c < 3; ++c) {
    const double base = uniform(rng, 0.3, 0.7);
    const double gx = uniform(rng, -0.2, 0.2), gy = uniform(rng, -0.2, 0.2);
    for (Index i = 0; i < height; ++i)
      for (Index j = 0; j < width; ++j) {
        acc[static_cast<std::size_t>(c * plane + i * width + j)] =
            base + gx * (static_cast<double>(j) / w - 0.5) + gy * (static_cast<double>(i) / h - 0.5);
      }
  }

  if (grid_lines) {
    const double spacing = uniform(rng, 28.0, 48.0);
    const double angle = uniform(rng, 0.0, std::numbers::pi / 2.0);
    const double ox = uniform(rng, 0.0, spacing), oy = uniform(rng, 0.0, spacing);
    double color[3];
    for (double& v : color) v = uniform(rng, -0.35, 0.35);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (Index i = 0; i < height; ++i)
      for (Index j = 0; j < width; ++j) {
        const double u = ca * static_cast<double>(j) + sa * static_cast<double>(i) + ox;
        const double v = -sa * static_cast<double>(j) + ca * static_cast<double>(i) + oy;
        const double du = std::abs(u - spacing * std::round(u / spacing));
        const double dv = std::abs(v - spacing * std::round(v / spacing));
        const double strength = std::max(std::max(0.0, 1.0 - du / 1.5), std::max(0.0, 1.0 - dv / 1.5));
        if (strength <= 0.0) continue;
        for (Index c = 0; c < 3; ++c) acc[static_cast<std::size_t>(c * plane + i * width + j)] += strength * color[c];
      }
  }

  const int blobs = 48;
  for (int b = 0; b < blobs; ++b) {
    const double cx = uniform(rng, 0.0, w), cy = uniform(rng, 0.0, h);
    const double sigma = uniform(rng, 4.0, 14.0);
    double color[3];
    for (double& v : color) v = uniform(rng, -0.6, 0.6);
    const double reach = 3.0 * sigma;
    const Index i0 = std::max<Index>(0, static_cast<Index>(std::floor(cy - reach)));
    const Index i1 = std::min<Index>(height - 1, static_cast<Index>(std::ceil(cy + reach)));
    const Index j0 = std::max<Index>(0, static_cast<Index>(std::floor(cx - reach)));
    const Index j1 = std::min<Index>(width - 1, static_cast<Index>(std::ceil(cx + reach)));
    for (Index i = i0; i <= i1; ++i)
      for (Index j = j0; j <= j1; ++j) {
        const double dx = static_cast<double>(j) - cx, dy = static_cast<double>(i) - cy;
        const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        for (Index c = 0; c < 3; ++c) acc[static_cast<std::size_t>(c * plane + i * width + j)] += g * color[c];
      }
    tex.features.push_back({cx, cy});
  }

  for (Index k = 0; k < 3 * plane; ++k) {
    tex.image[k] = static_cast<float>(std::clamp(acc[static_cast<std::size_t>(k)], 0.0, 1.0));
  }
  return tex;
}

Warp random_warp(std::mt19937_64& rng, WarpFamily family, double magnitude, Index height,
                 Index width) {
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  const double angle = uniform(rng, -1.0, 1.0) * magnitude * 10.0 * std::numbers::pi / 180.0;
  const double sx = 1.0 + uniform(rng, -1.0, 1.0) * magnitude * 0.1;
  const double sy = sx * (1.0 + uniform(rng, -1.0, 1.0) * magnitude * 0.03);
  const double tx = uniform(rng, -1.0, 1.0) * magnitude * 12.0;
  const double ty = uniform(rng, -1.0, 1.0) * magnitude * 12.0;
  Eigen::Matrix2d lin;
  lin << std::cos(angle) * sx, -std::sin(angle) * sy, std::sin(angle) * sx, std::cos(angle) * sy;
  const Eigen::Vector2d center(w / 2.0, h / 2.0);
  Eigen::Matrix<double, 2, 3> a;
  a.leftCols<2>() = lin;
  a.col(2) = center - lin * center + Eigen::Vector2d(tx, ty);
  if (family == WarpFamily::affine) return Warp::from_affine(a);

  // TPS defined target -> source: a 4x4 control grid whose images are the inverse affine
  // positions plus independent jitter.
  const Warp global = Warp::from_affine(a);
  std::vector<Point> target_ctrl, source_ctrl;
  for (int gy = 0; gy < 4; ++gy)
    for (int gx = 0; gx < 4; ++gx) {
      const Point t{w * (0.1 + 0.8 * gx / 3.0), h * (0.1 + 0.8 * gy / 3.0)};
      const Point s = global.inverse(t);
      target_ctrl.push_back(t);
      source_ctrl.push_back({s.x + normal(rng) * magnitude * 8.0, s.y + normal(rng) * magnitude * 8.0});
    }
  return Warp::from_inverse_tps(tps_fit(target_ctrl, source_ctrl));
}

Image apply_warp(const Image& source, const Warp& warp) {
  const Index h = image_height(source), w = image_width(source);
  Image out(Shape{3, h, w});
  float px[3];
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j) {
      const Point s = warp.inverse(Point{static_cast<double>(j), static_cast<double>(i)});
      sample_bilinear(source, s.x, s.y, px);
      for (Index c = 0; c < 3; ++c) out[(c * h + i) * w + j] = px[c];
    }
  return out;
}

namespace {

bool well_inside(const Point& p, double w, double h, double margin) {
  return p.x >= margin && p.y >= margin && p.x <= w - 1.0 - margin && p.y <= h - 1.0 - margin;
}

const char* const kCategories[] = {"blobs", "lattice"};

}  // namespace

std::vector<SyntheticPair> generate_synthetic(const SyntheticSpec& spec) {
  if (spec.keypoints < 1 || spec.pairs < 0) throw std::invalid_argument("synthetic: bad counts");
  if (!(spec.magnitude >= 0.0)) throw std::invalid_argument("synthetic: magnitude must be >= 0");
  std::mt19937_64 rng(spec.seed);
  const double w = static_cast<double>(spec.width), h = static_cast<double>(spec.height);
  std::vector<SyntheticPair> out;
  for (Index n = 0; n < spec.pairs; ++n) {
    const bool lattice = n % 2 == 1;
    SyntheticPair pair;
    std::vector<Point> src, tgt;
    for (int attempt = 0; attempt < 100 && static_cast<Index>(src.size()) < spec.keypoints; ++attempt) {
      src.clear();
      tgt.clear();
      Texture tex = render_texture(rng, spec.height, spec.width, lattice);
      pair.warp = random_warp(rng, spec.family, spec.magnitude, spec.height, spec.width);
      std::vector<std::size_t> order(tex.features.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = order.size(); i > 1; --i) {
        const auto k = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
        std::swap(order[i - 1], order[std::min(k, i - 1)]);
      }
      for (std::size_t k : order) {
        if (static_cast<Index>(src.size()) == spec.keypoints) break;
        const Point ps = tex.features[k];
        if (!well_inside(ps, w, h, spec.margin)) continue;
        const auto pt = pair.warp.forward(ps);
        if (!pt || !well_inside(*pt, w, h, spec.margin)) continue;
        src.push_back(ps);
        tgt.push_back(*pt);
      }
      pair.source = std::move(tex.image);
    }
    if (static_cast<Index>(src.size()) < spec.keypoints) {
      throw std::runtime_error("synthetic: could not place keypoints for pair " + std::to_string(n));
    }
    pair.target = apply_warp(pair.source, pair.warp);
    char id[32];
    std::snprintf(id, sizeof id, "pair%05lld", static_cast<long long>(n));
    pair.record.pair_id = id;
    pair.record.category = kCategories[lattice ? 1 : 0];
    pair.record.source_image = std::string(id) + "_s.ppm";
    pair.record.target_image = std::string(id) + "_t.ppm";
    pair.record.source_kps = std::move(src);
    pair.record.target_kps = std::move(tgt);
    out.push_back(std::move(pair));
  }
  return out;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<SyntheticPair>& pairs) {
  std::filesystem::create_directories(dir / "images");
  std::vector<PairRecord> records;
  for (const auto& p : pairs) {
    write_ppm(dir / "images" / p.record.source_image, p.source);
    write_ppm(dir / "images" / p.record.target_image, p.target);
    records.push_back(p.record);
  }
  write_annotations(dir / "annotations.csv", records);
}

}  // namespace mmnet
