#pragma once

// Decoder feature pathway: per-scale fusion of every block output (SEM branches + 1x1
// projection, summed), local self-attention, and top-down cross-scale fusion.

#include "mmnet/config.hpp"
#include "mmnet/encoder.hpp"

namespace mmnet {

inline std::string decoder_param(int scale, const std::string& what) {
  return "decoder.s" + std::to_string(scale) + "." + what;
}
inline std::string block_param(int scale, Index block, const std::string& what) {
  return decoder_param(scale, "b" + std::to_string(block) + "." + what);
}

/// Weights of one local self-attention unit. q/k/v map C -> C' (followed by ReLU), g maps
/// C' -> C without a nonlinearity.
template <typename Scalar>
struct LsaWeights {
  ad::Var<Scalar> q_w, q_b, k_w, k_b, v_w, v_b, g_w, g_b;
};

template <typename Scalar>
LsaWeights<Scalar> bind_lsa(Binder<Scalar>& bind, int scale) {
  auto p = [&](const char* what) { return bind(decoder_param(scale, std::string("lsa.") + what)); };
  return {p("q.weight"), p("q.bias"), p("k.weight"), p("k.bias"),
          p("v.weight"), p("v.bias"), p("g.weight"), p("g.bias")};
}

template <typename Scalar>
void add_decoder_parameters(ParameterSet<Scalar>& params, const ModelConfig& cfg) {
  const Index c = cfg.feature_channels;
  for (int l : cfg.scales()) {
    const GroupSpec& group = cfg.encoder.groups[l - 1];
    for (Index b = 0; b < group.blocks; ++b) {
      for (std::size_t d = 0; d < cfg.sem.dilations.size(); ++d) {
        const std::string sem = "sem" + std::to_string(d) + ".";
        params.add(block_param(l, b, sem + "weight"),
                   {cfg.sem.branch_channels, group.channels, 3, 3});
        params.add(block_param(l, b, sem + "bias"), {cfg.sem.branch_channels});
      }
      params.add(block_param(l, b, "proj.weight"), {c, cfg.sem.branch_channels, 1, 1});
      params.add(block_param(l, b, "proj.bias"), {c});
    }
    const Index inner = cfg.lsa.inner_channels;
    for (const char* f : {"q", "k", "v"}) {
      params.add(decoder_param(l, std::string("lsa.") + f + ".weight"), {inner, c, 1, 1});
      params.add(decoder_param(l, std::string("lsa.") + f + ".bias"), {inner});
    }
    params.add(decoder_param(l, "lsa.g.weight"), {c, inner, 1, 1});
    params.add(decoder_param(l, "lsa.g.bias"), {c});
    if (l < kCoarsestScale) {
      params.add(decoder_param(l, "cross.deconv.weight"), {c, c, 4, 4});
      params.add(decoder_param(l, "cross.conv.weight"), {c, 2 * c, 3, 3});
      params.add(decoder_param(l, "cross.conv.bias"), {c});
    }
  }
}

/// One block's branch: sum of ReLU(dilated 3x3 conv) over the SEM dilations, then 1x1 to C.
template <typename Scalar>
ad::Var<Scalar> sem_branch(Binder<Scalar>& bind, int scale, Index block, ad::Var<Scalar> x,
                           const SEMConfig& sem) {
  std::vector<ad::Var<Scalar>> paths;
  for (std::size_t d = 0; d < sem.dilations.size(); ++d) {
    const Index dil = sem.dilations[d];
    const std::string name = "sem" + std::to_string(d) + ".";
    paths.push_back(ad::relu(ad::conv2d(x, bind(block_param(scale, block, name + "weight")),
                                        bind(block_param(scale, block, name + "bias")),
                                        {.stride = 1, .padding = dil, .dilation = dil})));
  }
  auto fused = paths.size() == 1 ? paths.front() : ad::add_n(paths);
  return ad::conv2d(fused, bind(block_param(scale, block, "proj.weight")),
                    bind(block_param(scale, block, "proj.bias")), {});
}

/// Sums the branch outputs of `blocks`. The list is aligned to the end of the group, so a
/// single-element list is fed through the last block's branch parameters.
template <typename Scalar>
ad::Var<Scalar> intra_scale_fuse(Binder<Scalar>& bind, int scale,
                                 const std::vector<ad::Var<Scalar>>& blocks,
                                 Index group_blocks, const SEMConfig& sem) {
  if (blocks.empty()) throw std::invalid_argument("intra_scale_fuse needs at least one block");
  if (static_cast<Index>(blocks.size()) > group_blocks) {
    throw std::invalid_argument("intra_scale_fuse: more block outputs than the group has");
  }
  const Index first = group_blocks - static_cast<Index>(blocks.size());
  std::vector<ad::Var<Scalar>> branches;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& s = blocks[b].shape();
    if (s.size() != 3 || s[1] != blocks[0].shape()[1] || s[2] != blocks[0].shape()[2]) {
      throw ShapeError("intra_scale_fuse: block outputs do not share spatial extents");
    }
    branches.push_back(sem_branch(bind, scale, first + static_cast<Index>(b), blocks[b], sem));
  }
  return branches.size() == 1 ? branches.front() : ad::add_n(branches);
}

/// X~_i = X_i + G(F_v(X'_i) softmax(F_q(X_i)^T F_k(X'_i))^T) over the r x r window of cell i.
/// X' is zero padded and F_k/F_v see the padded slots, so those slots carry ReLU(bias) keys and
/// values and take part in the softmax. Since F_k/F_v are 1x1 they are applied to the padded
/// map before the windows are unfolded. When `attention` is given it receives the
/// [H*W, r*r, 1] attention weights.
template <typename Scalar>
ad::Var<Scalar> local_self_attention(ad::Var<Scalar> x, const LsaWeights<Scalar>& w, Index r,
                                     ad::Var<Scalar>* attention = nullptr) {
  const auto& s = x.shape();
  if (s.size() != 3) throw ShapeError("local_self_attention expects [C,H,W]");
  if (r < 1 || r % 2 == 0) throw std::invalid_argument("local_self_attention: r must be odd");
  const Index h = s[1], wd = s[2], cells = h * wd;
  if (w.q_w.dim(1) != s[0] || w.g_w.dim(0) != s[0] || w.k_w.dim(1) != s[0] ||
      w.v_w.dim(1) != s[0] || w.g_w.dim(1) != w.v_w.dim(0) || w.q_w.dim(0) != w.k_w.dim(0)) {
    throw ShapeError("local_self_attention: weights do not fit a " + shape_string(s) + " input");
  }
  const Index inner = w.q_w.dim(0);
  auto q = ad::relu(ad::conv2d(x, w.q_w, w.q_b, {}));
  auto padded = ad::pad2d(x, r / 2);
  auto keys = ad::unfold_windows(ad::relu(ad::conv2d(padded, w.k_w, w.k_b, {})), r);    // [HW,r2,C']
  auto values = ad::unfold_windows(ad::relu(ad::conv2d(padded, w.v_w, w.v_b, {})), r);  // [HW,r2,C']
  auto qm = ad::reshape(ad::permute(ad::reshape(q, {inner, cells}), {1, 0}), {cells, inner, 1});
  auto att = ad::softmax(ad::matmul(keys, qm), {1});  // [HW,r2,1]
  if (attention != nullptr) *attention = att;
  auto mixed = ad::reshape(ad::matmul(values, att, true, false), {cells, inner});  // [HW,C']
  auto o = ad::reshape(ad::permute(mixed, {1, 0}), {inner, h, wd});
  return ad::add(x, ad::conv2d(o, w.g_w, w.g_b, {}));
}

/// deconv(upper, 4x4, stride 2, pad 1) -> concat with intra -> 3x3 conv, pad 1.
template <typename Scalar>
ad::Var<Scalar> cross_scale_fuse(ad::Var<Scalar> upper, ad::Var<Scalar> intra,
                                 ad::Var<Scalar> deconv_w, ad::Var<Scalar> conv_w,
                                 ad::Var<Scalar> conv_b) {
  const auto& us = upper.shape();
  const auto& is = intra.shape();
  if (us.size() != 3 || is.size() != 3 || 2 * us[1] != is[1] || 2 * us[2] != is[2]) {
    throw ShapeError("cross_scale_fuse: upper " + shape_string(us) +
                     " is not half the extent of " + shape_string(is));
  }
  auto up = ad::deconv2d(upper, deconv_w, std::nullopt, {.stride = 2, .padding = 1});
  auto cat = ad::concat_channels<Scalar>({up, intra});
  return ad::conv2d(cat, conv_w, conv_b, {.stride = 1, .padding = 1});
}

/// Enhanced maps keyed by scale, computed top-down from scale 5 to cfg.finest_scale.
template <typename Scalar>
std::map<int, ad::Var<Scalar>> enhance_pyramid(Binder<Scalar>& bind,
                                               const FeaturePyramid<Scalar>& pyr,
                                               const ModelConfig& cfg) {
  std::map<int, ad::Var<Scalar>> enhanced;
  std::optional<ad::Var<Scalar>> previous;
  for (int l : cfg.scales()) {
    const auto& all = pyr.at(l);
    const Index group_blocks = cfg.encoder.groups[l - 1].blocks;
    std::vector<ad::Var<Scalar>> used =
        cfg.flags.dense_fusion ? all : std::vector<ad::Var<Scalar>>{all.back()};
    auto x = intra_scale_fuse(bind, l, used, group_blocks, cfg.sem);
    if (cfg.flags.lsa) x = local_self_attention(x, bind_lsa(bind, l), cfg.lsa.r);
    if (previous && cfg.flags.cross_scale) {
      x = cross_scale_fuse(*previous, x, bind(decoder_param(l, "cross.deconv.weight")),
                           bind(decoder_param(l, "cross.conv.weight")),
                           bind(decoder_param(l, "cross.conv.bias")));
    }
    enhanced.emplace(l, x);
    previous = x;
  }
  return enhanced;
}

}  // namespace mmnet
