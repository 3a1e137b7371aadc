#pragma once

// Brute-force reference implementations shared by the unit and acceptance tests.

#include "mmnet/enhance.hpp"
#include "mmnet/gradcheck.hpp"

#include <filesystem>

namespace mmnet::testing {

using T = Tensor<double>;

inline T conv_oracle(const T& x, const T& w, const T* bias, Index stride, Index pad, Index dil) {
  const Index c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const Index o = w.dim(0), k = w.dim(2);
  const Index oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  const Index ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  T out(Shape{o, oh, ow});
  for (Index oc = 0; oc < o; ++oc)
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j) {
        double acc = bias ? (*bias)[oc] : 0.0;
        for (Index ic = 0; ic < c; ++ic)
          for (Index a = 0; a < k; ++a)
            for (Index b = 0; b < k; ++b) {
              const Index y = i * stride - pad + a * dil;
              const Index xx = j * stride - pad + b * dil;
              if (y < 0 || y >= h || xx < 0 || xx >= wd) continue;
              acc += w(oc, ic, a, b) * x(ic, y, xx);
            }
        out(oc, i, j) = acc;
      }
  return out;
}

/// Scatter form of the transposed convolution, weight [Cin, Cout, k, k].
inline T deconv_oracle(const T& x, const T& w, Index stride, Index pad) {
  const Index ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const Index co = w.dim(1), k = w.dim(2);
  const Index oh = (h - 1) * stride - 2 * pad + k, ow = (wd - 1) * stride - 2 * pad + k;
  T out(Shape{co, oh, ow});
  for (Index c = 0; c < ci; ++c)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < wd; ++j)
        for (Index o = 0; o < co; ++o)
          for (Index a = 0; a < k; ++a)
            for (Index b = 0; b < k; ++b) {
              const Index y = i * stride - pad + a, xx = j * stride - pad + b;
              if (y < 0 || y >= oh || xx < 0 || xx >= ow) continue;
              out(o, y, xx) += x(c, i, j) * w(c, o, a, b);
            }
  return out;
}

inline T matmul_oracle(const T& a, const T& b) {
  T out(Shape{a.dim(0), b.dim(1)});
  for (Index i = 0; i < a.dim(0); ++i)
    for (Index j = 0; j < b.dim(1); ++j)
      for (Index k = 0; k < a.dim(1); ++k) out(i, j) += a(i, k) * b(k, j);
  return out;
}

/// Catmull-Rom segment in matrix form between p1 and p2.
inline double catmull_rom(double p0, double p1, double p2, double p3, double t) {
  return 0.5 * (2 * p1 + (p2 - p0) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t * t +
                (3 * p1 - p0 - 3 * p2 + p3) * t * t * t);
}

/// Factor-2 upsampling of a 1-D signal, samples at (o + 0.5) / 2 - 0.5, edges replicated.
inline std::vector<double> upsample_1d(const std::vector<double>& v) {
  const Index n = static_cast<Index>(v.size());
  auto at = [&](Index i) { return v[std::clamp<Index>(i, 0, n - 1)]; };
  std::vector<double> out(2 * n);
  for (Index o = 0; o < 2 * n; ++o) {
    const double x = (o + 0.5) / 2.0 - 0.5;
    const Index i = static_cast<Index>(std::floor(x));
    out[o] = catmull_rom(at(i - 1), at(i), at(i + 1), at(i + 2), x - static_cast<double>(i));
  }
  return out;
}

/// Applies upsample_1d along every axis of a rank-4 tensor, one axis at a time.
inline T upscale4d_oracle(T s) {
  for (Index axis = 0; axis < 4; ++axis) {
    Shape shape = s.shape();
    shape[axis] *= 2;
    T out(shape);
    const Index n = s.dim(axis);
    std::array<Index, 4> idx{};
    for (idx[0] = 0; idx[0] < s.dim(0); ++idx[0])
      for (idx[1] = 0; idx[1] < s.dim(1); ++idx[1])
        for (idx[2] = 0; idx[2] < s.dim(2); ++idx[2])
          for (idx[3] = 0; idx[3] < s.dim(3); ++idx[3]) {
            if (idx[axis] != 0) continue;
            std::vector<double> line(n);
            auto src = idx;
            for (Index k = 0; k < n; ++k) {
              src[axis] = k;
              line[k] = s(src[0], src[1], src[2], src[3]);
            }
            const auto up = upsample_1d(line);
            auto dst = idx;
            for (Index k = 0; k < 2 * n; ++k) {
              dst[axis] = k;
              out(dst[0], dst[1], dst[2], dst[3]) = up[k];
            }
          }
    s = out;
  }
  return s;
}

struct LsaTensors {
  T q_w, q_b, k_w, k_b, v_w, v_b, g_w, g_b;
};

inline LsaTensors random_lsa(Index c, Index inner, std::mt19937_64& rng) {
  return {random_tensor({inner, c, 1, 1}, rng), random_tensor({inner}, rng),
          random_tensor({inner, c, 1, 1}, rng), random_tensor({inner}, rng),
          random_tensor({inner, c, 1, 1}, rng), random_tensor({inner}, rng),
          random_tensor({c, inner, 1, 1}, rng), random_tensor({c}, rng)};
}

inline LsaWeights<double> bind_lsa(ad::Tape<double>& t, const LsaTensors& w) {
  return {t.constant(w.q_w), t.constant(w.q_b), t.constant(w.k_w), t.constant(w.k_b),
          t.constant(w.v_w), t.constant(w.v_b), t.constant(w.g_w), t.constant(w.g_b)};
}

/// Per-cell attention with explicit loops; padded slots hold zero features.
inline T lsa_oracle(const T& x, const LsaTensors& w, Index r) {
  const Index c = x.dim(0), h = x.dim(1), wd = x.dim(2), inner = w.q_w.dim(0), half = r / 2;
  auto feature = [&](Index i, Index j) {
    std::vector<double> f(c, 0.0);
    if (i < 0 || i >= h || j < 0 || j >= wd) return f;
    for (Index ch = 0; ch < c; ++ch) f[ch] = x(ch, i, j);
    return f;
  };
  auto project = [&](const T& wt, const T& bt, const std::vector<double>& f) {
    std::vector<double> out(inner);
    for (Index o = 0; o < inner; ++o) {
      double acc = bt[o];
      for (Index ch = 0; ch < c; ++ch) acc += wt(o, ch, 0, 0) * f[ch];
      out[o] = std::max(acc, 0.0);
    }
    return out;
  };
  T out = x;
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < wd; ++j) {
      const auto q = project(w.q_w, w.q_b, feature(i, j));
      std::vector<double> logits, mixed(inner, 0.0);
      std::vector<std::vector<double>> values;
      for (Index a = 0; a < r; ++a)
        for (Index b = 0; b < r; ++b) {
          const auto f = feature(i + a - half, j + b - half);
          const auto k = project(w.k_w, w.k_b, f);
          double dot = 0.0;
          for (Index o = 0; o < inner; ++o) dot += q[o] * k[o];
          logits.push_back(dot);
          values.push_back(project(w.v_w, w.v_b, f));
        }
      const double m = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double& l : logits) z += (l = std::exp(l - m));
      for (std::size_t s = 0; s < logits.size(); ++s)
        for (Index o = 0; o < inner; ++o) mixed[o] += values[s][o] * logits[s] / z;
      for (Index ch = 0; ch < c; ++ch) {
        double acc = w.g_b[ch];
        for (Index o = 0; o < inner; ++o) acc += w.g_w(ch, o, 0, 0) * mixed[o];
        out(ch, i, j) += acc;
      }
    }
  return out;
}

inline T correlate_oracle(const T& a, const T& b) {
  T s(Shape{a.dim(1), a.dim(2), b.dim(1), b.dim(2)});
  for (Index i = 0; i < a.dim(1); ++i)
    for (Index j = 0; j < a.dim(2); ++j)
      for (Index m = 0; m < b.dim(1); ++m)
        for (Index n = 0; n < b.dim(2); ++n) {
          double d = 0.0;
          for (Index c = 0; c < a.dim(0); ++c) d += a(c, i, j) * b(c, m, n);
          s(i, j, m, n) = d;
        }
  return s;
}

/// Fresh empty directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mmnet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace mmnet::testing
