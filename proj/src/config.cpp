#include "mmnet/config.hpp"

#include <algorithm>
#include <stdexcept>

namespace mmnet {

void EncoderConfig::validate() const {
  for (const auto& g : groups) {
    if (g.blocks < 1) throw std::invalid_argument("encoder: every group needs at least one block");
    if (g.channels < 1) throw std::invalid_argument("encoder: channel counts must be positive");
  }
  if (input_h <= 0 || input_w <= 0 || input_h % 32 != 0 || input_w % 32 != 0) {
    throw std::invalid_argument("encoder: input size must be positive and divisible by 32");
  }
}

void ModelConfig::validate() const {
  encoder.validate();
  if (finest_scale < 2 || finest_scale > kCoarsestScale) {
    throw std::invalid_argument("model: finest_scale must lie in 2..5");
  }
  if (sem.dilations.empty() || sem.branch_channels < 1) {
    throw std::invalid_argument("model: SEM needs at least one dilation and one channel");
  }
  for (Index d : sem.dilations) {
    if (d < 1) throw std::invalid_argument("model: SEM dilations must be >= 1");
  }
  if (lsa.r < 1 || lsa.r % 2 == 0) throw std::invalid_argument("model: lsa.r must be odd");
  if (lsa.inner_channels < 1 || feature_channels < 1) {
    throw std::invalid_argument("model: channel counts must be positive");
  }
  if (!(init_gain > 0)) throw std::invalid_argument("model: init_gain must be positive");
}

std::vector<int> ModelConfig::scales() const {
  std::vector<int> out;
  for (int l = kCoarsestScale; l >= finest_scale; --l) out.push_back(l);
  return out;
}

void TrainConfig::validate() const {
  if (!(lr > 0) || momentum < 0 || weight_decay < 0 || !(lr_decay_factor > 0)) {
    throw std::invalid_argument("train: rates must be positive");
  }
  if (grad_clip < 0) throw std::invalid_argument("train: grad_clip must be >= 0");
  if (batch_size < 1 || max_iters < 0 || decay_interval < 1) {
    throw std::invalid_argument("train: batch size and decay interval must be >= 1");
  }
  if (supervised_scales.empty()) throw std::invalid_argument("train: supervised_scales is empty");
  for (int s : supervised_scales) {
    if (s < 2 || s > kCoarsestScale) throw std::invalid_argument("train: supervised scale out of range");
  }
}

double TrainConfig::loss_weight(int scale) const {
  auto it = loss_weights.find(scale);
  return it == loss_weights.end() ? 1.0 : it->second;
}

}  // namespace mmnet
