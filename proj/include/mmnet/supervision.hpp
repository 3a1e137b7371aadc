#pragma once

// Ground-truth probability maps, the multi-scale bidirectional BCE objective, and SGD with
// momentum.

#include "mmnet/match.hpp"
#include "mmnet/params.hpp"

#include <cmath>

namespace mmnet {

/// Continuous feature coordinate of a pixel coordinate: cell k spans [k*s, (k+1)*s) and its
/// center sits at integer coordinate k.
inline double feature_coordinate(double pixel, Index stride) {
  return pixel / static_cast<double>(stride) - 0.5;
}

/// Distance-weighted (bilinear) mass on the four cells around (fx, fy), clamped to the grid.
inline Tensor<double> bilinear_assign(double fx, double fy, Index h, Index w) {
  Tensor<double> map(Shape{h, w});
  fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
  fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
  const Index x0 = std::min<Index>(static_cast<Index>(std::floor(fx)), w - 1);
  const Index y0 = std::min<Index>(static_cast<Index>(std::floor(fy)), h - 1);
  const double ax = fx - static_cast<double>(x0);
  const double ay = fy - static_cast<double>(y0);
  const Index x1 = std::min(x0 + 1, w - 1);
  const Index y1 = std::min(y0 + 1, h - 1);
  map(y0, x0) += (1 - ay) * (1 - ax);
  map(y0, x1) += (1 - ay) * ax;
  map(y1, x0) += ay * (1 - ax);
  map(y1, x1) += ay * ax;
  return map;
}

/// Normalised 3x3 Gaussian, sigma = 1.
inline std::array<double, 9> gaussian3x3(double sigma = 1.0) {
  std::array<double, 9> k{};
  double total = 0.0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      k[(dy + 1) * 3 + dx + 1] = v;
      total += v;
    }
  for (double& v : k) v /= total;
  return k;
}

/// Zero-padded 3x3 smoothing followed by renormalisation to unit mass.
inline Tensor<double> smooth_and_normalize(const Tensor<double>& map, double sigma = 1.0) {
  const auto k = gaussian3x3(sigma);
  const Index h = map.dim(0), w = map.dim(1);
  Tensor<double> out(Shape{h, w});
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j) {
      double acc = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const Index y = i + dy, x = j + dx;
          if (y < 0 || y >= h || x < 0 || x >= w) continue;
          acc += k[(dy + 1) * 3 + dx + 1] * map(y, x);
        }
      out(i, j) = acc;
    }
  out.array() /= out.array().sum();
  return out;
}

/// Ground-truth matching distribution over an h x w grid at `scale` for a keypoint given in the
/// opposite image's pixel frame of extent (image_w, image_h).
inline Tensor<double> build_gt_map(const Point& kp, int scale, Index h, Index w, double image_w,
                                   double image_h) {
  if (!inside(kp, image_w, image_h)) {
    throw std::out_of_range("build_gt_map: keypoint (" + std::to_string(kp.x) + ", " +
                            std::to_string(kp.y) + ") lies outside the image");
  }
  const Index stride = scale_stride(scale);
  return smooth_and_normalize(
      bilinear_assign(feature_coordinate(kp.x, stride), feature_coordinate(kp.y, stride), h, w));
}

/// Per-direction losses of one scale, averaged over keypoints.
template <typename Scalar>
ad::Var<Scalar> scale_loss(const ScoreFactors<Scalar>& f, const KeypointAnnotation& ann) {
  const Index k = static_cast<Index>(ann.size());
  if (k == 0) throw std::invalid_argument("loss: annotation has no keypoints");
  const Index stride = scale_stride(f.scale);
  const Index hs = f.source_h(), ws = f.source_w(), ht = f.target_h(), wt = f.target_w();

  std::vector<Index> src_cells, tgt_cells;
  Tensor<Scalar> gt_fwd(Shape{k, ht * wt}), gt_bwd(Shape{k, hs * ws});
  for (Index i = 0; i < k; ++i) {
    const Cell cs = cell_of(ann.source[i], stride, hs, ws);
    const Cell ct = cell_of(ann.target[i], stride, ht, wt);
    src_cells.push_back(cs.row * ws + cs.col);
    tgt_cells.push_back(ct.row * wt + ct.col);
    const auto tf = build_gt_map(ann.target[i], f.scale, ht, wt, ann.target_w, ann.target_h);
    const auto tb = build_gt_map(ann.source[i], f.scale, hs, ws, ann.source_w, ann.source_h);
    for (Index c = 0; c < ht * wt; ++c) gt_fwd(i, c) = static_cast<Scalar>(tf[c]);
    for (Index c = 0; c < hs * ws; ++c) gt_bwd(i, c) = static_cast<Scalar>(tb[c]);
  }
  auto total = ad::add(ad::softmax_bce_sum(source_rows(f, src_cells), gt_fwd),
                       ad::softmax_bce_sum(target_columns(f, tgt_cells), gt_bwd));
  return ad::scalar_mul(total, Scalar(1) / static_cast<Scalar>(k));
}

template <typename Scalar>
struct PairLoss {
  ad::Var<Scalar> total;
  std::map<int, double> per_scale;  // unweighted, every scale that has factors
};

/// sum_l alpha_l [B(P_l(p^s), P~_l(p^s)) + B(P_l(p^t), P~_l(p^t))] over the supervised scales.
template <typename Scalar>
PairLoss<Scalar> pair_loss(const std::map<int, ScoreFactors<Scalar>>& factors,
                           const KeypointAnnotation& ann, const std::vector<int>& supervised,
                           const std::map<int, double>& weights) {
  if (supervised.empty()) throw std::invalid_argument("loss: no supervised scales");
  PairLoss<Scalar> out;
  std::vector<ad::Var<Scalar>> terms;
  for (const auto& [scale, f] : factors) {
    const bool used = std::find(supervised.begin(), supervised.end(), scale) != supervised.end();
    auto l = scale_loss(f, ann);
    out.per_scale[scale] = static_cast<double>(l.value()[0]);
    if (!used) continue;
    auto w = weights.find(scale);
    const double alpha = w == weights.end() ? 1.0 : w->second;
    terms.push_back(ad::scalar_mul(l, static_cast<Scalar>(alpha)));
  }
  for (int s : supervised) {
    if (!factors.count(s)) {
      throw std::invalid_argument("loss: scale " + std::to_string(s) + " is not available");
    }
  }
  out.total = terms.size() == 1 ? terms.front() : ad::add_n(terms);
  return out;
}

// -------------------------------------------------------------------------------------------
// Optimiser

inline double learning_rate(const TrainConfig& cfg, Index iteration) {
  const Index decays = cfg.decay_interval > 0 ? iteration / cfg.decay_interval : 0;
  return cfg.lr * std::pow(cfg.lr_decay_factor, static_cast<double>(decays));
}

template <typename Scalar>
struct SgdState {
  std::map<std::string, Tensor<Scalar>> velocity;
  Index iteration = 0;
};

template <typename Scalar>
double gradient_norm(const ParameterSet<Scalar>& params) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (p.grad.has_data()) sq += p.grad.array().template cast<double>().square().sum();
  }
  return std::sqrt(sq);
}

/// v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v.
/// With cfg.grad_clip > 0 the gradient is first rescaled so its global norm is at most grad_clip.
template <typename Scalar>
void sgd_step(ParameterSet<Scalar>& params, SgdState<Scalar>& state, const TrainConfig& cfg) {
  const Scalar lr = static_cast<Scalar>(learning_rate(cfg, state.iteration));
  const Scalar mom = static_cast<Scalar>(cfg.momentum);
  const Scalar wd = static_cast<Scalar>(cfg.weight_decay);
  if (cfg.grad_clip > 0) {
    const double norm = gradient_norm(params);
    if (norm > cfg.grad_clip) {
      const Scalar k = static_cast<Scalar>(cfg.grad_clip / norm);
      for (auto& [name, p] : params) {
        if (p.grad.has_data()) p.grad.array() *= k;
      }
    }
  }
  for (auto& [name, p] : params) {
    auto [it, fresh] = state.velocity.try_emplace(name, p.value.shape());
    auto& v = it->second.array();
    if (p.grad.has_data()) {
      v = mom * v + p.grad.array() + wd * p.value.array();
    } else {
      v = mom * v + wd * p.value.array();
    }
    p.value.array() -= lr * v;
  }
  ++state.iteration;
}

}  // namespace mmnet
