#pragma once

// Five-group convolutional backbone. Group g runs at 1/2^g of the input resolution; the first
// block of a group downsamples with a stride-2 conv, later blocks are residual conv-ReLU units.

#include "mmnet/config.hpp"
#include "mmnet/params.hpp"

namespace mmnet {

/// Block outputs per scale. Only scales 2..5 are kept: the decoder never reads group 1.
template <typename Scalar>
struct FeaturePyramid {
  std::map<int, std::vector<ad::Var<Scalar>>> blocks;

  const std::vector<ad::Var<Scalar>>& at(int scale) const { return blocks.at(scale); }
};

inline std::string encoder_param(int group, Index block, const char* what) {
  return "encoder.g" + std::to_string(group) + ".b" + std::to_string(block) + "." + what;
}

template <typename Scalar>
void add_encoder_parameters(ParameterSet<Scalar>& params, const EncoderConfig& cfg) {
  Index in_ch = 3;
  for (int g = 1; g <= kNumGroups; ++g) {
    const GroupSpec& spec = cfg.groups[g - 1];
    for (Index b = 0; b < spec.blocks; ++b) {
      const Index from = b == 0 ? in_ch : spec.channels;
      params.add(encoder_param(g, b, "weight"), {spec.channels, from, 3, 3});
      params.add(encoder_param(g, b, "bias"), {spec.channels});
    }
    in_ch = spec.channels;
  }
}

template <typename Scalar>
FeaturePyramid<Scalar> encode(Binder<Scalar>& bind, ad::Var<Scalar> image,
                              const EncoderConfig& cfg) {
  const auto& shape = image.shape();
  if (shape.size() != 3 || shape[0] != 3) {
    throw ShapeError("encode expects an RGB image [3,H,W], got " + shape_string(shape));
  }
  if (shape[1] % 32 != 0 || shape[2] % 32 != 0) {
    throw std::invalid_argument("encode: image extents " + shape_string(shape) +
                                " are not divisible by 32");
  }
  FeaturePyramid<Scalar> pyr;
  ad::Var<Scalar> x = image;
  for (int g = 1; g <= kNumGroups; ++g) {
    const GroupSpec& spec = cfg.groups[g - 1];
    std::vector<ad::Var<Scalar>> outs;
    for (Index b = 0; b < spec.blocks; ++b) {
      auto w = bind(encoder_param(g, b, "weight"));
      auto bias = bind(encoder_param(g, b, "bias"));
      if (b == 0) {
        x = ad::relu(ad::conv2d(x, w, bias, {.stride = 2, .padding = 1}));
      } else {
        x = ad::relu(ad::add(ad::conv2d(x, w, bias, {.stride = 1, .padding = 1}), x));
      }
      outs.push_back(x);
    }
    if (g >= 2) pyr.blocks.emplace(g, std::move(outs));
  }
  return pyr;
}

}  // namespace mmnet
