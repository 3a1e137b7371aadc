#pragma once

// Procedural correspondence pairs with exact ground truth. The source is a random texture
// (Gaussian colour blobs, optionally grid lines); the target is the source pulled back through
// the inverse warp. Keypoints sit on blob centres and are carried over by the forward warp.

#include "mmnet/dataset.hpp"
#include "mmnet/tps.hpp"

#include <random>

namespace mmnet {

enum class WarpFamily { affine, tps };

WarpFamily parse_warp_family(std::string_view name);
std::string to_string(WarpFamily family);

struct SyntheticSpec {
  std::uint64_t seed = 0;
  WarpFamily family = WarpFamily::tps;
  double magnitude = 1.0;  // 1.0: rotation 10 deg, scale 10%, shift 12 px, TPS jitter 8 px
  Index keypoints = 10;
  Index pairs = 10;
  Index height = 224;
  Index width = 320;
  double margin = 8.0;  // keypoints keep this distance from every border
};

/// Geometric map between the source frame and the target frame of one pair.
struct Warp {
  WarpFamily family = WarpFamily::affine;
  Eigen::Matrix<double, 2, 3> affine = Eigen::Matrix<double, 2, 3>::Identity();  // source -> target
  std::optional<TpsWarp> inverse_tps;                                           // target -> source

  static Warp from_affine(const Eigen::Matrix<double, 2, 3>& source_to_target);
  static Warp from_inverse_tps(TpsWarp target_to_source);

  Point inverse(const Point& target) const;
  /// Target position of a source point; empty when Newton's method fails or the map folds.
  std::optional<Point> forward(const Point& source) const;
};

/// Uniform [0,1) from 53 random bits and a Box-Muller normal, both platform independent.
double uniform01(std::mt19937_64& rng);
double uniform(std::mt19937_64& rng, double lo, double hi);
double normal(std::mt19937_64& rng);

struct Texture {
  Image image;
  std::vector<Point> features;  // blob centres
};

Texture render_texture(std::mt19937_64& rng, Index height, Index width, bool grid_lines);
Warp random_warp(std::mt19937_64& rng, WarpFamily family, double magnitude, Index height,
                 Index width);

/// Pull-back of the source through `warp`, bilinear.
Image apply_warp(const Image& source, const Warp& warp);

struct SyntheticPair {
  PairRecord record;
  Image source;
  Image target;
  Warp warp;
};

std::vector<SyntheticPair> generate_synthetic(const SyntheticSpec& spec);

/// Writes the standard dataset layout (annotations.csv + images/).
void write_dataset(const std::filesystem::path& dir, const std::vector<SyntheticPair>& pairs);

}  // namespace mmnet
