#pragma once

#include "mmnet/tensor.hpp"

#include <array>
#include <map>
#include <string>
#include <vector>

namespace mmnet {

/// Decoder scales run from the coarsest (5) down to `finest_scale`.
inline constexpr int kCoarsestScale = 5;
inline constexpr int kNumGroups = 5;

struct GroupSpec {
  Index blocks = 2;
  Index channels = 16;
};

struct EncoderConfig {
  std::array<GroupSpec, kNumGroups> groups{{{2, 16}, {2, 32}, {2, 64}, {2, 96}, {2, 128}}};
  Index input_h = 224;
  Index input_w = 320;

  void validate() const;
};

struct SEMConfig {
  std::vector<Index> dilations{1, 4, 8, 12};
  Index branch_channels = 32;
};

struct LSAConfig {
  Index r = 5;
  Index inner_channels = 10;
};

/// Switches mirroring the ablation rows of the original study.
struct AblationFlags {
  bool lsa = true;
  bool dense_fusion = true;
  bool cross_scale = true;
  bool complementation = true;
};

struct ModelConfig {
  EncoderConfig encoder;
  SEMConfig sem;
  LSAConfig lsa;
  AblationFlags flags;
  Index feature_channels = 21;
  int finest_scale = 2;
  double init_gain = 0.1;  // extra factor on the init of layers whose output is correlated

  void validate() const;
  std::vector<int> scales() const;  // coarse to fine: 5, 4, ..., finest_scale
};

struct TrainConfig {
  double lr = 0.0005;
  double momentum = 0.9;
  double weight_decay = 0.0002;
  double lr_decay_factor = 0.1;
  Index decay_interval = 10000;
  double grad_clip = 10.0;  // global gradient norm limit, 0 disables
  Index batch_size = 5;
  Index max_iters = 2000;
  std::map<int, double> loss_weights{{2, 1.0}, {3, 1.0}, {4, 1.0}, {5, 1.0}};
  std::vector<int> supervised_scales{2, 3, 4, 5};
  Index checkpoint_interval = 0;  // 0: only the final checkpoint
  Index validation_pairs = 25;
  double selection_alpha = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  double loss_weight(int scale) const;
};

/// Pixel stride of feature scale l relative to the input canvas.
inline Index scale_stride(int scale) { return Index{1} << scale; }

}  // namespace mmnet
