#pragma once

#include "mmnet/enhance.hpp"
#include "mmnet/encoder.hpp"
#include "mmnet/match.hpp"
#include "mmnet/supervision.hpp"

namespace mmnet {

/// Two decoded scales (5 and 4) on a 64x64 canvas with a handful of channels per layer; small
/// enough for exhaustive finite-difference checks.
inline ModelConfig toy_model_config() {
  ModelConfig cfg;
  cfg.encoder.groups = {{{2, 2}, {2, 3}, {2, 3}, {2, 4}, {2, 4}}};
  cfg.encoder.input_h = 64;
  cfg.encoder.input_w = 64;
  cfg.sem.branch_channels = 2;
  cfg.lsa.r = 3;
  cfg.lsa.inner_channels = 2;
  cfg.feature_channels = 3;
  cfg.finest_scale = 4;
  cfg.init_gain = 1.0;
  return cfg;
}

template <typename Scalar>
struct Model {
  ModelConfig config;
  ParameterSet<Scalar> params;
};

/// Layers whose output is summed into the correlated features.
inline bool feeds_correlation(const std::string& name) {
  for (const char* tail : {".proj.weight", ".lsa.g.weight", ".cross.conv.weight"}) {
    if (name.ends_with(tail)) return true;
  }
  return false;
}

/// Reproducible for a given seed: conv/deconv weights fan-in uniform, biases zero. Weights
/// that feed the correlation are further scaled by `init_gain` so initial scores stay O(1).
template <typename Scalar>
Model<Scalar> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model<Scalar> model{config, {}};
  add_encoder_parameters(model.params, config.encoder);
  add_decoder_parameters(model.params, config);
  std::mt19937_64 rng(seed);
  for (auto& [name, p] : model.params) {
    if (p.value.rank() != 4) continue;
    fill_fan_in_uniform(p.value, rng);
    if (feeds_correlation(name)) p.value.array() *= static_cast<Scalar>(config.init_gain);
  }
  return model;
}

template <typename Scalar>
struct PairForward {
  std::map<int, ad::Var<Scalar>> source;  // enhanced maps per scale
  std::map<int, ad::Var<Scalar>> target;
  std::map<int, ScoreFactors<Scalar>> factors;
};

/// Shared-weight forward pass over both images of a pair.
template <typename Scalar>
PairForward<Scalar> forward_pair(Binder<Scalar>& bind, const ModelConfig& cfg,
                                 ad::Var<Scalar> source_image, ad::Var<Scalar> target_image) {
  PairForward<Scalar> out;
  out.source = enhance_pyramid(bind, encode(bind, source_image, cfg.encoder), cfg);
  out.target = enhance_pyramid(bind, encode(bind, target_image, cfg.encoder), cfg);
  out.factors = factored_match(out.source, out.target, cfg.flags.complementation);
  return out;
}

/// Enhanced features of one image at every decoder scale, without gradient tracking.
template <typename Scalar>
std::map<int, Tensor<Scalar>> extract_features(Model<Scalar>& model, const Tensor<Scalar>& image) {
  ad::Tape<Scalar> tape;
  Binder<Scalar> bind(tape, model.params, false);
  auto enhanced =
      enhance_pyramid(bind, encode(bind, tape.constant(image), model.config.encoder), model.config);
  std::map<int, Tensor<Scalar>> out;
  for (const auto& [l, v] : enhanced) out.emplace(l, v.value());
  return out;
}

/// Argmax transfer of source keypoints at every decoder scale.
template <typename Scalar>
std::map<int, std::vector<Point>> predict_all_scales(Model<Scalar>& model,
                                                     const Tensor<Scalar>& source,
                                                     const Tensor<Scalar>& target,
                                                     const std::vector<Point>& keypoints) {
  ad::Tape<Scalar> tape;
  Binder<Scalar> bind(tape, model.params, false);
  auto fwd = forward_pair(bind, model.config, tape.constant(source), tape.constant(target));
  std::map<int, std::vector<Point>> out;
  for (const auto& [l, f] : fwd.factors) {
    const Index stride = scale_stride(l);
    std::vector<Index> cells;
    for (const auto& p : keypoints) {
      const Cell c = cell_of(p, stride, f.source_h(), f.source_w());
      cells.push_back(c.row * f.source_w() + c.col);
    }
    const auto rows = source_rows(f, cells).value();
    const Index width = f.target_h() * f.target_w();
    auto& preds = out[l];
    for (std::size_t k = 0; k < keypoints.size(); ++k) {
      std::span<const Scalar> row(rows.data() + static_cast<Index>(k) * width,
                                  static_cast<std::size_t>(width));
      const Index idx = argmax_index(row);
      preds.push_back(cell_center({idx / f.target_w(), idx % f.target_w()}, stride));
    }
  }
  return out;
}

}  // namespace mmnet
