#include "mmnet/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <iomanip>
#include <sstream>

namespace mmnet {

Normalizer parse_normalizer(std::string_view name) {
  if (name == "image") return Normalizer::image;
  if (name == "bbox") return Normalizer::bbox;
  throw std::invalid_argument("unknown PCK normalizer '" + std::string(name) + "' (image|bbox)");
}

std::string to_string(Normalizer n) { return n == Normalizer::image ? "image" : "bbox"; }

double pck_normalizer(const PairPrediction& pair, Normalizer kind) {
  double d = 0.0;
  if (kind == Normalizer::image) {
    d = std::max(pair.target_w, pair.target_h);
  } else {
    if (!pair.target_bbox) {
      throw std::invalid_argument("pck: pair '" + pair.pair_id + "' has no target bounding box");
    }
    d = pair.target_bbox->longer_side();
  }
  if (!(d > 0.0)) throw std::invalid_argument("pck: non-positive normalizer for pair '" + pair.pair_id + "'");
  return d;
}

std::size_t count_correct(const std::vector<Point>& predicted, const std::vector<Point>& truth,
                          double alpha, double d) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("pck: prediction/truth lengths differ");
  std::size_t n = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (distance(predicted[i], truth[i]) <= alpha * d) ++n;
  }
  return n;
}

PCKResult pck(const std::vector<PairPrediction>& pairs, double alpha, Normalizer normalizer) {
  if (pairs.empty()) throw std::invalid_argument("pck: no predictions");
  PCKResult r;
  r.alpha = alpha;
  r.normalizer = normalizer;
  for (const auto& p : pairs) {
    const double d = pck_normalizer(p, normalizer);
    const std::size_t ok = count_correct(p.predicted, p.truth, alpha, d);
    auto& c = r.per_category[p.category];
    c.correct += ok;
    c.total += p.truth.size();
    r.all.correct += ok;
    r.all.total += p.truth.size();
  }
  if (r.all.total == 0) throw std::invalid_argument("pck: no keypoints");
  return r;
}

std::vector<CurvePoint> pck_curve(const std::vector<PairPrediction>& pairs,
                                  const std::vector<double>& alphas, Normalizer normalizer) {
  if (!std::is_sorted(alphas.begin(), alphas.end())) {
    throw std::invalid_argument("pck_curve: alphas must be ascending");
  }
  std::vector<CurvePoint> out;
  for (double a : alphas) out.push_back({a, pck(pairs, a, normalizer).value()});
  return out;
}

std::string pck_json(const PCKResult& result) {
  nlohmann::ordered_json j;
  j["alpha"] = result.alpha;
  j["normalizer"] = to_string(result.normalizer);
  nlohmann::ordered_json cats = nlohmann::ordered_json::object();
  for (const auto& [name, c] : result.per_category) {
    cats[name] = {{"pck", c.ratio()}, {"correct", c.correct}, {"total", c.total}};
  }
  j["per_category"] = cats;
  j["all"] = {{"pck", result.all.ratio()}, {"correct", result.all.correct}, {"total", result.all.total}};
  return j.dump(2) + "\n";
}

std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::ostringstream ss;
  ss << "alpha,pck\n" << std::setprecision(10);
  for (const auto& p : curve) ss << p.alpha << ',' << p.pck << '\n';
  return ss.str();
}

std::string pck_table(const PCKResult& result) {
  std::ostringstream ss;
  ss << "PCK@" << result.alpha << " (" << to_string(result.normalizer) << ")\n";
  ss << std::left << std::setw(16) << "category" << std::right << std::setw(10) << "pck"
     << std::setw(10) << "correct" << std::setw(10) << "total" << '\n';
  auto row = [&](const std::string& name, const Counts& c) {
    ss << std::left << std::setw(16) << name << std::right << std::fixed << std::setprecision(4)
       << std::setw(10) << c.ratio() << std::setw(10) << c.correct << std::setw(10) << c.total << '\n';
  };
  for (const auto& [name, c] : result.per_category) row(name, c);
  row("all", result.all);
  return ss.str();
}

}  // namespace mmnet
