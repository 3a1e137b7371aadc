#pragma once

// Percentage of correct keypoints: a prediction is correct iff |pred - gt| <= alpha * d.

#include "mmnet/types.hpp"

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmnet {

enum class Normalizer { image, bbox };

Normalizer parse_normalizer(std::string_view name);
std::string to_string(Normalizer n);

/// Predictions of one pair with everything needed to score them.
struct PairPrediction {
  std::string pair_id;
  std::string category;
  std::vector<Point> source;
  std::vector<Point> predicted;
  std::vector<Point> truth;
  double target_w = 0.0, target_h = 0.0;
  std::optional<BBox> target_bbox;
};

/// d for one pair: longer side of the target image or of its target bounding box.
double pck_normalizer(const PairPrediction& pair, Normalizer kind);

struct Counts {
  std::size_t correct = 0;
  std::size_t total = 0;

  double ratio() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct PCKResult {
  double alpha = 0.1;
  Normalizer normalizer = Normalizer::image;
  std::map<std::string, Counts> per_category;
  Counts all;

  double value() const { return all.ratio(); }
};

std::size_t count_correct(const std::vector<Point>& predicted, const std::vector<Point>& truth,
                          double alpha, double d);

PCKResult pck(const std::vector<PairPrediction>& pairs, double alpha,
              Normalizer normalizer = Normalizer::image);

struct CurvePoint {
  double alpha;
  double pck;
};

/// Alphas must be ascending.
std::vector<CurvePoint> pck_curve(const std::vector<PairPrediction>& pairs,
                                  const std::vector<double>& alphas,
                                  Normalizer normalizer = Normalizer::image);

std::string pck_json(const PCKResult& result);
std::string curve_csv(const std::vector<CurvePoint>& curve);
/// Per-category text table with a closing `all` row.
std::string pck_table(const PCKResult& result);

}  // namespace mmnet
