#pragma once

// Tiny end-to-end problem for exhaustive gradient checks of the full objective.

#include "mmnet/gradcheck.hpp"
#include "mmnet/model.hpp"

namespace mmnet {

struct ToyProblem {
  Model<double> model;
  Tensor<double> source;
  Tensor<double> target;
  KeypointAnnotation ann;
};

/// Random images on the toy canvas and `keypoints` random correspondences.
inline ToyProblem make_toy_problem(std::uint64_t seed, Index keypoints = 3,
                                   ModelConfig cfg = toy_model_config()) {
  std::mt19937_64 rng(seed);
  const Index h = cfg.encoder.input_h, w = cfg.encoder.input_w;
  ToyProblem toy{init_model<double>(cfg, seed), random_tensor({3, h, w}, rng, 0.0, 1.0),
                 random_tensor({3, h, w}, rng, 0.0, 1.0), {}};
  // small random biases so that no unit sits exactly on a ReLU kink
  for (auto& [name, p] : toy.model.params) {
    if (p.value.rank() == 1) p.value = random_tensor(p.value.shape(), rng, -0.05, 0.05);
  }
  toy.ann.source_w = toy.ann.target_w = static_cast<double>(w);
  toy.ann.source_h = toy.ann.target_h = static_cast<double>(h);
  const auto pts = random_tensor({keypoints, 4}, rng, 0.0, 1.0);
  for (Index k = 0; k < keypoints; ++k) {
    toy.ann.source.push_back({pts(k, 0) * (w - 1), pts(k, 1) * (h - 1)});
    toy.ann.target.push_back({pts(k, 2) * (w - 1), pts(k, 3) * (h - 1)});
  }
  return toy;
}

inline ad::Var<double> toy_objective(Binder<double>& bind, const ToyProblem& toy,
                                     const std::vector<int>& supervised,
                                     const std::map<int, double>& weights = {}) {
  auto& tape = bind.tape();
  auto fwd = forward_pair(bind, toy.model.config, tape.constant(toy.source), tape.constant(toy.target));
  return pair_loss(fwd.factors, toy.ann, supervised, weights).total;
}

}  // namespace mmnet
