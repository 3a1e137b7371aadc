#pragma once

// Raw numeric kernels shared by the autodiff ops and the inference paths. Everything here is
// deterministic: fixed loop order, single-threaded GEMM through Eigen.

#include "mmnet/tensor.hpp"

#include <array>
#include <cmath>
#include <limits>

namespace mmnet {

struct ConvGeometry {
  Index stride = 1;
  Index padding = 0;
  Index dilation = 1;
};

/// floor((in + 2p - d(k-1) - 1) / s) + 1, or a non-positive value when the window does not fit.
inline Index conv_output_extent(Index in, Index kernel, const ConvGeometry& g) {
  const Index span = in + 2 * g.padding - g.dilation * (kernel - 1) - 1;
  if (span < 0) return 0;
  return span / g.stride + 1;
}

/// Output extent of a transposed convolution with no output padding.
inline Index deconv_output_extent(Index in, Index kernel, const ConvGeometry& g) {
  return (in - 1) * g.stride - 2 * g.padding + g.dilation * (kernel - 1) + 1;
}

/// Lowering plan for a square-kernel convolution over a [channels, in_h, in_w] map. Kernel taps
/// that never touch an in-bounds pixel are dropped from the column matrix.
struct ConvPlan {
  Index channels = 0;
  Index in_h = 0, in_w = 0;
  Index out_h = 0, out_w = 0;
  Index kernel = 1;
  ConvGeometry geom;
  std::vector<Index> taps;  // ky * kernel + kx

  Index out_pixels() const { return out_h * out_w; }
  Index columns() const { return channels * static_cast<Index>(taps.size()); }
  bool dense() const { return static_cast<Index>(taps.size()) == kernel * kernel; }

  // valid output index range [lo, hi) along one axis for kernel offset `k`
  std::pair<Index, Index> valid_range(Index k, Index in_extent, Index out_extent) const {
    const Index shift = k * geom.dilation - geom.padding;  // in = o*s + shift
    Index lo = shift >= 0 ? 0 : (-shift + geom.stride - 1) / geom.stride;
    Index hi_num = in_extent - 1 - shift;
    Index hi = hi_num < 0 ? 0 : hi_num / geom.stride + 1;
    lo = std::min(lo, out_extent);
    hi = std::min(hi, out_extent);
    return {lo, std::max(lo, hi)};
  }
};

inline ConvPlan make_conv_plan(Index channels, Index in_h, Index in_w, Index out_h, Index out_w,
                               Index kernel, const ConvGeometry& geom) {
  ConvPlan plan{channels, in_h, in_w, out_h, out_w, kernel, geom, {}};
  for (Index ky = 0; ky < kernel; ++ky) {
    const auto [y0, y1] = plan.valid_range(ky, in_h, out_h);
    if (y0 >= y1) continue;
    for (Index kx = 0; kx < kernel; ++kx) {
      const auto [x0, x1] = plan.valid_range(kx, in_w, out_w);
      if (x0 < x1) plan.taps.push_back(ky * kernel + kx);
    }
  }
  return plan;
}

/// cols is column-major (out_pixels x columns); column (c * taps + t) holds the shifted plane.
template <typename Scalar>
void im2col(const Scalar* in, const ConvPlan& plan, Scalar* cols) {
  const Index ntaps = static_cast<Index>(plan.taps.size());
  const Index s = plan.geom.stride;
  for (Index c = 0; c < plan.channels; ++c) {
    const Scalar* plane = in + c * plan.in_h * plan.in_w;
    for (Index t = 0; t < ntaps; ++t) {
      const Index ky = plan.taps[t] / plan.kernel;
      const Index kx = plan.taps[t] % plan.kernel;
      Scalar* col = cols + (c * ntaps + t) * plan.out_pixels();
      const auto [y0, y1] = plan.valid_range(ky, plan.in_h, plan.out_h);
      const auto [x0, x1] = plan.valid_range(kx, plan.in_w, plan.out_w);
      const Index dy = ky * plan.geom.dilation - plan.geom.padding;
      const Index dx = kx * plan.geom.dilation - plan.geom.padding;
      std::fill(col, col + y0 * plan.out_w, Scalar(0));
      for (Index oy = y0; oy < y1; ++oy) {
        Scalar* row = col + oy * plan.out_w;
        const Scalar* src = plane + (oy * s + dy) * plan.in_w + dx;
        std::fill(row, row + x0, Scalar(0));
        if (s == 1) {
          std::copy(src + x0, src + x1, row + x0);
        } else {
          for (Index ox = x0; ox < x1; ++ox) row[ox] = src[ox * s];
        }
        std::fill(row + x1, row + plan.out_w, Scalar(0));
      }
      std::fill(col + y1 * plan.out_w, col + plan.out_pixels(), Scalar(0));
    }
  }
}

/// Adjoint of im2col: scatter-adds columns back into the [channels, in_h, in_w] map.
template <typename Scalar>
void col2im_add(const Scalar* cols, const ConvPlan& plan, Scalar* in) {
  const Index ntaps = static_cast<Index>(plan.taps.size());
  const Index s = plan.geom.stride;
  for (Index c = 0; c < plan.channels; ++c) {
    Scalar* plane = in + c * plan.in_h * plan.in_w;
    for (Index t = 0; t < ntaps; ++t) {
      const Index ky = plan.taps[t] / plan.kernel;
      const Index kx = plan.taps[t] % plan.kernel;
      const Scalar* col = cols + (c * ntaps + t) * plan.out_pixels();
      const auto [y0, y1] = plan.valid_range(ky, plan.in_h, plan.out_h);
      const auto [x0, x1] = plan.valid_range(kx, plan.in_w, plan.out_w);
      const Index dy = ky * plan.geom.dilation - plan.geom.padding;
      const Index dx = kx * plan.geom.dilation - plan.geom.padding;
      for (Index oy = y0; oy < y1; ++oy) {
        const Scalar* row = col + oy * plan.out_w;
        Scalar* dst = plane + (oy * s + dy) * plan.in_w + dx;
        if (s == 1) {
          for (Index ox = x0; ox < x1; ++ox) dst[ox] += row[ox];
        } else {
          for (Index ox = x0; ox < x1; ++ox) dst[ox * s] += row[ox];
        }
      }
    }
  }
}

/// Rows of a (channels*k*k x n) column-major weight matrix restricted to the plan's taps.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> gather_tap_rows(
    const Eigen::Ref<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>& full,
    const ConvPlan& plan) {
  const Index ntaps = static_cast<Index>(plan.taps.size());
  const Index kk = plan.kernel * plan.kernel;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> sub(plan.columns(), full.cols());
  for (Index c = 0; c < plan.channels; ++c) {
    for (Index t = 0; t < ntaps; ++t) sub.row(c * ntaps + t) = full.row(c * kk + plan.taps[t]);
  }
  return sub;
}

template <typename Scalar>
void scatter_tap_rows_add(
    const Eigen::Ref<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>& sub,
    const ConvPlan& plan, Eigen::Ref<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> full) {
  const Index ntaps = static_cast<Index>(plan.taps.size());
  const Index kk = plan.kernel * plan.kernel;
  for (Index c = 0; c < plan.channels; ++c) {
    for (Index t = 0; t < ntaps; ++t) full.row(c * kk + plan.taps[t]) += sub.row(c * ntaps + t);
  }
}

// ---------------------------------------------------------------------------------------------
// Bicubic factor-2 upsampling

inline constexpr double kCatmullRomA = -0.5;

/// Keys cubic convolution kernel.
inline double cubic_kernel(double x, double a = kCatmullRomA) {
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

/// Four-tap stencil for one output sample of a factor-2 upsampling along an axis of extent n,
/// half-pixel aligned (source coordinate (o + 0.5) / 2 - 0.5), taps clamped to the edge.
struct CubicStencil {
  std::array<Index, 4> index{};
  std::array<double, 4> weight{};
};

inline CubicStencil upsample2_stencil(Index out, Index n) {
  const double x = (static_cast<double>(out) + 0.5) / 2.0 - 0.5;
  const double base = std::floor(x);
  const double t = x - base;
  CubicStencil st;
  for (int k = 0; k < 4; ++k) {
    const Index idx = static_cast<Index>(base) - 1 + k;
    st.index[k] = std::clamp<Index>(idx, 0, n - 1);
    st.weight[k] = cubic_kernel(t - (k - 1));
  }
  return st;
}

/// Doubles `axis` of `in` by bicubic interpolation.
template <typename Scalar>
Tensor<Scalar> upsample2_axis(const Tensor<Scalar>& in, Index axis) {
  Shape out_shape = in.shape();
  const Index n = in.dim(axis);
  out_shape[axis] = 2 * n;
  Tensor<Scalar> out(out_shape);
  Index outer = 1, inner = 1;
  for (Index a = 0; a < axis; ++a) outer *= in.dim(a);
  for (Index a = axis + 1; a < in.rank(); ++a) inner *= in.dim(a);
  std::vector<CubicStencil> stencils(2 * n);
  for (Index o = 0; o < 2 * n; ++o) stencils[o] = upsample2_stencil(o, n);
  for (Index b = 0; b < outer; ++b) {
    const Scalar* src = in.data() + b * n * inner;
    Scalar* dst = out.data() + b * 2 * n * inner;
    for (Index o = 0; o < 2 * n; ++o) {
      Scalar* d = dst + o * inner;
      const auto& st = stencils[o];
      for (int k = 0; k < 4; ++k) {
        const Scalar w = static_cast<Scalar>(st.weight[k]);
        const Scalar* s = src + st.index[k] * inner;
        for (Index i = 0; i < inner; ++i) d[i] += w * s[i];
      }
    }
  }
  return out;
}

/// Adjoint of upsample2_axis: maps a gradient w.r.t. the doubled axis back to extent n.
template <typename Scalar>
Tensor<Scalar> upsample2_axis_adjoint(const Tensor<Scalar>& grad_out, Index axis) {
  Shape in_shape = grad_out.shape();
  const Index n = in_shape[axis] / 2;
  in_shape[axis] = n;
  Tensor<Scalar> grad_in(in_shape);
  Index outer = 1, inner = 1;
  for (Index a = 0; a < axis; ++a) outer *= in_shape[a];
  for (Index a = axis + 1; a < grad_out.rank(); ++a) inner *= in_shape[a];
  for (Index b = 0; b < outer; ++b) {
    const Scalar* g = grad_out.data() + b * 2 * n * inner;
    Scalar* d = grad_in.data() + b * n * inner;
    for (Index o = 0; o < 2 * n; ++o) {
      const auto st = upsample2_stencil(o, n);
      const Scalar* go = g + o * inner;
      for (int k = 0; k < 4; ++k) {
        const Scalar w = static_cast<Scalar>(st.weight[k]);
        Scalar* di = d + st.index[k] * inner;
        for (Index i = 0; i < inner; ++i) di[i] += w * go[i];
      }
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------------------------
// Softmax over a contiguous trailing block

/// In-place, row by row: data is (rows x width) row-major. Max-subtracted.
template <typename Scalar>
void softmax_rows_inplace(Scalar* data, Index rows, Index width) {
  for (Index r = 0; r < rows; ++r) {
    Scalar* row = data + r * width;
    Scalar m = row[0];
    for (Index i = 1; i < width; ++i) m = std::max(m, row[i]);
    Scalar sum = 0;
    for (Index i = 0; i < width; ++i) {
      row[i] = std::exp(row[i] - m);
      sum += row[i];
    }
    const Scalar inv = Scalar(1) / sum;
    for (Index i = 0; i < width; ++i) row[i] *= inv;
  }
}

/// Softmax of `in` over the given axes (any subset, any order).
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& in, std::span<const Index> axes) {
  if (axes.empty()) throw std::invalid_argument("softmax needs at least one reduction axis");
  std::vector<bool> reduce(in.rank(), false);
  for (Index a : axes) {
    if (a < 0 || a >= in.rank() || reduce[a]) throw ShapeError("invalid softmax axis");
    reduce[a] = true;
  }
  std::vector<Index> perm;
  Index width = 1;
  for (Index a = 0; a < in.rank(); ++a)
    if (!reduce[a]) perm.push_back(a);
  for (Index a = 0; a < in.rank(); ++a)
    if (reduce[a]) {
      perm.push_back(a);
      width *= in.dim(a);
    }
  bool identity = true;
  for (Index i = 0; i < in.rank(); ++i) identity = identity && perm[i] == i;
  if (identity) {
    Tensor<Scalar> out = in;
    softmax_rows_inplace(out.data(), out.size() / width, width);
    return out;
  }
  Tensor<Scalar> work = permuted(in, perm);
  softmax_rows_inplace(work.data(), work.size() / width, width);
  const auto inv = inverse_permutation(perm);
  return permuted(work, inv);
}

}  // namespace mmnet
