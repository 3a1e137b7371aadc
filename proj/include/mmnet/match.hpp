#pragma once

// Matching pathway: raw 4-D correlation, top-down matching complementation through 4-D bicubic
// upscaling, spatial softmax and argmax keypoint transfer.
//
// Because bicubic upscaling is linear and separable and the correlation is bilinear,
//   U(Ys^T Yt) = (U2 Ys)^T (U2 Yt)
// where U2 upsamples a feature map in 2-D. The accumulated score S_l therefore equals the
// correlation of stacked features [X_l ; U2(Y_{l+1})]. `ScoreFactors` uses this to produce
// individual rows and columns of S_l without materialising the 4-D tensor.

#include "mmnet/autodiff.hpp"
#include "mmnet/config.hpp"
#include "mmnet/types.hpp"

namespace mmnet {

enum class MatchKind { residual, accumulated };

template <typename Scalar>
struct MatchTensor {
  int scale = kCoarsestScale;
  ad::Var<Scalar> scores;  // [Hs, Ws, Ht, Wt]
  MatchKind kind = MatchKind::residual;
};

/// S~[i,j,m,n] = <Xs[:,i,j], Xt[:,m,n]>, no feature normalisation.
template <typename Scalar>
ad::Var<Scalar> correlate(ad::Var<Scalar> xs, ad::Var<Scalar> xt) {
  const auto& ss = xs.shape();
  const auto& ts = xt.shape();
  if (ss.size() != 3 || ts.size() != 3) throw ShapeError("correlate expects [C,H,W] maps");
  if (ss[0] != ts[0]) {
    throw ShapeError("correlate: channel counts differ (" + std::to_string(ss[0]) + " vs " +
                     std::to_string(ts[0]) + ")");
  }
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  using CMap = Eigen::Map<const RowMatrix>;
  using MMap = Eigen::Map<RowMatrix>;
  const Index c = ss[0], m = ss[1] * ss[2], n = ts[1] * ts[2];
  CMap A(xs.value().data(), c, m);
  CMap B(xt.value().data(), c, n);
  Tensor<Scalar> out(Shape{ss[1], ss[2], ts[1], ts[2]});
  MMap S(out.data(), m, n);
  for (Index k = 0; k < c; ++k) {
    for (Index i = 0; i < m; ++i) S.row(i) += A(k, i) * B.row(k);
  }
  return xs.tape->record(std::move(out), {xs, xt}, [c, m, n](ad::Tape<Scalar>& t, Index self) {
    const Index ia = t.input(self, 0), ib = t.input(self, 1);
    CMap G(t.grad(self).data(), m, n);
    CMap A(t.value(ia).data(), c, m);
    CMap B(t.value(ib).data(), c, n);
    if (t.requires_grad(ia)) MMap(t.grad_buffer(ia).data(), c, m).noalias() += B * G.transpose();
    if (t.requires_grad(ib)) MMap(t.grad_buffer(ib).data(), c, n).noalias() += A * G;
  });
}

/// Doubles all four extents of a score tensor by separable bicubic interpolation.
template <typename Scalar>
ad::Var<Scalar> upscale4d(ad::Var<Scalar> s) {
  if (s.shape().size() != 4) throw ShapeError("upscale4d expects a 4-D tensor");
  for (Index axis = 0; axis < 4; ++axis) s = ad::upsample2(s, axis);
  return s;
}

/// Checked variant: `target` must double every extent of `s`.
template <typename Scalar>
ad::Var<Scalar> upscale4d(ad::Var<Scalar> s, const Shape& target) {
  const auto& from = s.shape();
  if (from.size() != 4 || target.size() != 4) throw ShapeError("upscale4d expects 4-D extents");
  for (std::size_t a = 0; a < 4; ++a) {
    if (target[a] != 2 * from[a]) {
      throw ShapeError("upscale4d: " + shape_string(target) + " is not double " +
                       shape_string(from));
    }
  }
  return upscale4d(s);
}

/// S_l = S~_l + U(S_{l+1}); at the coarsest scale S_5 = S~_5.
template <typename Scalar>
MatchTensor<Scalar> complement(const MatchTensor<Scalar>& residual,
                               const std::optional<MatchTensor<Scalar>>& upper) {
  if (residual.kind != MatchKind::residual) {
    throw std::invalid_argument("complement: first argument must be a residual score tensor");
  }
  if (!upper) {
    if (residual.scale != kCoarsestScale) {
      throw std::invalid_argument("complement: only the coarsest scale has no upper term");
    }
    return {residual.scale, residual.scores, MatchKind::accumulated};
  }
  if (upper->kind != MatchKind::accumulated || upper->scale != residual.scale + 1) {
    throw std::invalid_argument("complement: upper term must be the accumulated tensor of scale " +
                                std::to_string(residual.scale + 1));
  }
  auto up = upscale4d(upper->scores, residual.scores.shape());
  return {residual.scale, ad::add(residual.scores, up), MatchKind::accumulated};
}

/// Dense route: accumulated 4-D score tensors for every decoder scale.
template <typename Scalar>
std::map<int, MatchTensor<Scalar>> dense_match(const std::map<int, ad::Var<Scalar>>& source,
                                               const std::map<int, ad::Var<Scalar>>& target,
                                               bool complementation) {
  std::map<int, MatchTensor<Scalar>> out;
  std::optional<MatchTensor<Scalar>> upper;
  for (auto it = source.rbegin(); it != source.rend(); ++it) {
    const int l = it->first;
    MatchTensor<Scalar> residual{l, correlate(it->second, target.at(l)), MatchKind::residual};
    MatchTensor<Scalar> acc = complementation ? complement(residual, upper)
                                              : MatchTensor<Scalar>{l, residual.scores,
                                                                    MatchKind::accumulated};
    out.emplace(l, acc);
    upper = acc;
  }
  return out;
}

/// Stacked features whose correlation equals the accumulated score tensor of one scale.
template <typename Scalar>
struct ScoreFactors {
  int scale = kCoarsestScale;
  ad::Var<Scalar> source;  // [D, Hs, Ws]
  ad::Var<Scalar> target;  // [D, Ht, Wt]

  Index source_h() const { return source.dim(1); }
  Index source_w() const { return source.dim(2); }
  Index target_h() const { return target.dim(1); }
  Index target_w() const { return target.dim(2); }
};

template <typename Scalar>
ad::Var<Scalar> upsample2_map(ad::Var<Scalar> x) {
  return ad::upsample2(ad::upsample2(x, 1), 2);
}

/// Factored route, scale by scale from coarse to fine.
template <typename Scalar>
std::map<int, ScoreFactors<Scalar>> factored_match(
    const std::map<int, ad::Var<Scalar>>& source, const std::map<int, ad::Var<Scalar>>& target,
    bool complementation) {
  std::map<int, ScoreFactors<Scalar>> out;
  std::optional<ScoreFactors<Scalar>> upper;
  for (auto it = source.rbegin(); it != source.rend(); ++it) {
    const int l = it->first;
    ScoreFactors<Scalar> f{l, it->second, target.at(l)};
    if (f.source.shape()[0] != f.target.shape()[0]) throw ShapeError("factored_match: channels differ");
    if (complementation && upper) {
      f.source = ad::concat_channels<Scalar>({f.source, upsample2_map(upper->source)});
      f.target = ad::concat_channels<Scalar>({f.target, upsample2_map(upper->target)});
    }
    out.emplace(l, f);
    upper = f;
  }
  return out;
}

/// Rows S_l[cell, :] for flattened source cells: [K, Ht*Wt].
template <typename Scalar>
ad::Var<Scalar> source_rows(const ScoreFactors<Scalar>& f, const std::vector<Index>& cells) {
  const Index d = f.source.dim(0);
  auto ys = ad::index_select(ad::reshape(f.source, {d, f.source_h() * f.source_w()}), 1, cells);
  auto yt = ad::reshape(f.target, {d, f.target_h() * f.target_w()});
  return ad::matmul(ys, yt, true, false);
}

/// Columns S_l[:, cell] for flattened target cells, laid out as [K, Hs*Ws].
template <typename Scalar>
ad::Var<Scalar> target_columns(const ScoreFactors<Scalar>& f, const std::vector<Index>& cells) {
  const Index d = f.target.dim(0);
  auto yt = ad::index_select(ad::reshape(f.target, {d, f.target_h() * f.target_w()}), 1, cells);
  auto ys = ad::reshape(f.source, {d, f.source_h() * f.source_w()});
  return ad::matmul(yt, ys, true, false);
}

// -------------------------------------------------------------------------------------------
// Probabilities and keypoint transfer (inference, no tape)

struct Cell {
  Index row = 0;
  Index col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

enum class Direction { source_to_target, target_to_source };

/// Softmax over the opposite image's cells: S[i,j,:,:] or S[:,:,m,n].
template <typename Scalar>
Tensor<Scalar> to_probability(const Tensor<Scalar>& scores, Cell query, Direction dir) {
  if (scores.rank() != 4) throw ShapeError("to_probability expects a 4-D score tensor");
  const Index hs = scores.dim(0), ws = scores.dim(1), ht = scores.dim(2), wt = scores.dim(3);
  const bool forward = dir == Direction::source_to_target;
  const Index qh = forward ? hs : ht, qw = forward ? ws : wt;
  if (query.row < 0 || query.col < 0 || query.row >= qh || query.col >= qw) {
    throw std::out_of_range("to_probability: query cell out of range");
  }
  Tensor<Scalar> out(forward ? Shape{ht, wt} : Shape{hs, ws});
  if (forward) {
    const Scalar* row = scores.data() + (query.row * ws + query.col) * ht * wt;
    std::copy(row, row + ht * wt, out.data());
  } else {
    const Index col = query.row * wt + query.col;
    for (Index s = 0; s < hs * ws; ++s) out[s] = scores[s * ht * wt + col];
  }
  softmax_rows_inplace(out.data(), 1, out.size());
  return out;
}

/// Arg-max over a flattened map; the lowest row-major index wins ties.
template <typename Scalar>
Index argmax_index(std::span<const Scalar> values) {
  Index best = 0;
  for (Index i = 1; i < static_cast<Index>(values.size()); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

/// Pixel-space center of a feature cell at the given stride.
inline Point cell_center(Cell c, Index stride) {
  const double s = static_cast<double>(stride);
  return {static_cast<double>(c.col) * s + s / 2.0, static_cast<double>(c.row) * s + s / 2.0};
}

/// Feature cell containing a pixel-space point: floor(coord / stride), clamped to the grid.
inline Cell cell_of(const Point& p, Index stride, Index h, Index w) {
  const double s = static_cast<double>(stride);
  const Index row = static_cast<Index>(std::floor(p.y / s));
  const Index col = static_cast<Index>(std::floor(p.x / s));
  return {std::clamp<Index>(row, 0, h - 1), std::clamp<Index>(col, 0, w - 1)};
}

/// Predicted point for a probability map over a grid of `width` columns.
template <typename Scalar>
Point transfer_keypoint(const Tensor<Scalar>& probability, Index stride) {
  if (probability.rank() != 2) throw ShapeError("transfer_keypoint expects a 2-D map");
  const Index idx = argmax_index(probability.values());
  const Index w = probability.dim(1);
  return cell_center({idx / w, idx % w}, stride);
}

/// Picks the scale with the best validation score; ties go to the finer scale.
inline int select_best_scale(const std::map<int, double>& score_by_scale) {
  if (score_by_scale.empty()) throw std::invalid_argument("select_scale: no scales evaluated");
  int best = score_by_scale.begin()->first;
  double best_score = score_by_scale.begin()->second;
  for (const auto& [scale, score] : score_by_scale) {
    if (score > best_score) {
      best = scale;
      best_score = score;
    }
  }
  return best;
}

}  // namespace mmnet
