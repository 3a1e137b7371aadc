#pragma once

// Reverse-mode differentiation over Tensor. Every op records its output on a Tape together with
// a closure that pushes the output gradient to its inputs; backward() replays the tape in
// reverse order.

#include "mmnet/kernels.hpp"
#include "mmnet/tensor.hpp"

#include <cmath>
#include <deque>
#include <memory>
#include <optional>
#include <type_traits>

namespace mmnet::ad {

template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;

  void zero_grad() { grad = Tensor<Scalar>(value.shape()); }
};

template <typename Scalar>
class Tape;

/// Handle to a node on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  Index id = -1;

  const Tensor<Scalar>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  Index dim(Index axis) const { return value().dim(axis); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename Scalar>
class Tape {
 public:
  using T = Tensor<Scalar>;
  using Backward = std::function<void(Tape&, Index)>;

  struct Node {
    T value;
    T grad;
    bool requires_grad = false;
    std::vector<Index> inputs;
    Backward backward;
    Parameter<Scalar>* parameter = nullptr;
  };

  Tape() {
#ifndef NDEBUG
    check_finite_ = true;
#endif
  }

  /// Forward values are verified finite when enabled (on by default in debug builds).
  void set_check_finite(bool on) { check_finite_ = on; }
  /// Drops the gradients of non-leaf nodes once they have been propagated.
  void set_release_intermediate_grads(bool on) { release_intermediate_grads_ = on; }

  Var<Scalar> constant(T value) { return push(std::move(value), false, {}, nullptr); }
  Var<Scalar> leaf(T value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, {}, nullptr);
  }

  /// Leaf whose gradient is added into `param.grad` by backward().
  Var<Scalar> parameter(Parameter<Scalar>& param) {
    Var<Scalar> v = push(param.value, true, {}, nullptr);
    nodes_.back().parameter = &param;
    return v;
  }

  /// Records an op output. `backward` runs only when some input requires a gradient.
  Var<Scalar> record(T value, std::initializer_list<Var<Scalar>> inputs, Backward backward) {
    return record(std::move(value), std::vector<Var<Scalar>>(inputs), std::move(backward));
  }

  Var<Scalar> record(T value, const std::vector<Var<Scalar>>& inputs, Backward backward) {
    std::vector<Index> ids;
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.tape != this) throw TapeError("op input belongs to a different tape");
      ids.push_back(in.id);
      needs = needs || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), needs, std::move(ids), needs ? std::move(backward) : Backward{});
  }

  const T& value(Var<Scalar> v) const { return nodes_.at(v.id).value; }
  const T& value(Index id) const { return nodes_.at(id).value; }
  bool requires_grad(Var<Scalar> v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(Index id) const { return nodes_.at(id).requires_grad; }

  /// Gradient of node `id`; an empty tensor if nothing flowed into it.
  const T& grad(Index id) const { return nodes_.at(id).grad; }
  const T& grad(Var<Scalar> v) const { return grad(v.id); }

  /// Zero-initialised gradient accumulator for node `id`.
  T& grad_buffer(Index id) {
    Node& n = nodes_.at(id);
    if (!n.grad.has_data()) n.grad = T(n.value.shape());
    return n.grad;
  }

  Index input(Index id, std::size_t k) const { return nodes_[id].inputs[k]; }
  std::size_t size() const { return nodes_.size(); }

  void backward(Var<Scalar> loss) {
    if (loss.tape != this) throw TapeError("loss belongs to a different tape");
    const Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw TapeError("backward needs a scalar loss, got shape " + shape_string(root.value.shape()));
    }
    grad_buffer(loss.id).array().setConstant(Scalar(1));
    for (Index id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.grad.has_data()) continue;
      if (n.backward) {
        n.backward(*this, id);
        if (release_intermediate_grads_) n.grad = T();
      }
      if (n.parameter != nullptr) {
        if (!n.parameter->grad.has_data()) n.parameter->zero_grad();
        n.parameter->grad.array() += n.grad.array();
      }
    }
  }

  void clear() { nodes_.clear(); }

 private:
  Var<Scalar> push(T value, bool requires_grad, std::vector<Index> inputs, Backward backward) {
    const Index id = static_cast<Index>(nodes_.size());
    for (Index in : inputs) {
      if (in < 0 || in >= id) throw TapeError("tape edge does not point to an earlier node");
    }
    if (check_finite_ && !value.all_finite()) {
      throw std::domain_error("non-finite value produced at tape node " + std::to_string(id));
    }
    nodes_.push_back(Node{std::move(value), T{}, requires_grad, std::move(inputs),
                          std::move(backward), nullptr});
    return Var<Scalar>{this, id};
  }

  std::deque<Node> nodes_;
  bool check_finite_ = false;
  bool release_intermediate_grads_ = false;
};

namespace detail {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename Scalar>
void accumulate(Tape<Scalar>& tape, Index id, const Tensor<Scalar>& g) {
  if (!tape.requires_grad(id)) return;
  tape.grad_buffer(id).array() += g.array();
}

}  // namespace detail

// -------------------------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "add");
  Tensor<Scalar> out = a.value();
  out.array() += b.value().array();
  return a.tape->record(std::move(out), {a, b}, [](Tape<Scalar>& t, Index self) {
    const auto& g = t.grad(self);
    detail::accumulate(t, t.input(self, 0), g);
    detail::accumulate(t, t.input(self, 1), g);
  });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  return add(a, b);
}

/// Sum of several same-shape tensors, accumulated left to right.
template <typename Scalar>
Var<Scalar> add_n(const std::vector<Var<Scalar>>& terms) {
  if (terms.empty()) throw std::invalid_argument("add_n of no terms");
  Tensor<Scalar> out = terms.front().value();
  for (std::size_t i = 1; i < terms.size(); ++i) {
    detail::require_same_shape(terms.front(), terms[i], "add_n");
    out.array() += terms[i].value().array();
  }
  const auto n = terms.size();
  return terms.front().tape->record(std::move(out), terms, [n](Tape<Scalar>& t, Index self) {
    const auto& g = t.grad(self);
    for (std::size_t i = 0; i < n; ++i) detail::accumulate(t, t.input(self, i), g);
  });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<Scalar> out = a.value();
  out.array() *= b.value().array();
  return a.tape->record(std::move(out), {a, b}, [](Tape<Scalar>& t, Index self) {
    const auto& g = t.grad(self);
    const Index ia = t.input(self, 0), ib = t.input(self, 1);
    if (t.requires_grad(ia)) t.grad_buffer(ia).array() += g.array() * t.value(ib).array();
    if (t.requires_grad(ib)) t.grad_buffer(ib).array() += g.array() * t.value(ia).array();
  });
}

template <typename Scalar>
Var<Scalar> scalar_mul(Var<Scalar> a, Scalar s) {
  Tensor<Scalar> out = a.value();
  out.array() *= s;
  return a.tape->record(std::move(out), {a}, [s](Tape<Scalar>& t, Index self) {
    t.grad_buffer(t.input(self, 0)).array() += s * t.grad(self).array();
  });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  Tensor<Scalar> out = a.value();
  out.array() = out.array().max(Scalar(0));
  return a.tape->record(std::move(out), {a}, [](Tape<Scalar>& t, Index self) {
    const auto& y = t.value(self);
    t.grad_buffer(t.input(self, 0)).array() +=
        (y.array() > Scalar(0)).select(t.grad(self).array(), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Tensor<Scalar> out(Shape{});
  out[0] = a.value().array().sum();
  return a.tape->record(std::move(out), {a}, [](Tape<Scalar>& t, Index self) {
    t.grad_buffer(t.input(self, 0)).array() += t.grad(self)[0];
  });
}

// -------------------------------------------------------------------------------------------
// Layout

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> a, Shape shape) {
  Tensor<Scalar> out = a.value().reshaped(std::move(shape));
  return a.tape->record(std::move(out), {a}, [](Tape<Scalar>& t, Index self) {
    t.grad_buffer(t.input(self, 0)).array() += t.grad(self).array();
  });
}

template <typename Scalar>
Var<Scalar> permute(Var<Scalar> a, std::vector<Index> perm) {
  Tensor<Scalar> out = permuted(a.value(), perm);
  return a.tape->record(std::move(out), {a}, [perm](Tape<Scalar>& t, Index self) {
    const auto inv = inverse_permutation(perm);
    t.grad_buffer(t.input(self, 0)).array() += permuted(t.grad(self), inv).array();
  });
}

/// Concatenation along axis 0 (the channel axis of a [C,H,W] map).
template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat of no tensors");
  Shape shape = parts.front().shape();
  if (shape.empty()) throw ShapeError("concat needs rank >= 1");
  Index channels = 0;
  for (const auto& p : parts) {
    Shape tail(p.shape().begin() + 1, p.shape().end());
    Shape ref(shape.begin() + 1, shape.end());
    if (p.value().rank() != static_cast<Index>(shape.size()) || tail != ref) {
      throw ShapeError("concat: trailing extents differ, " + shape_string(p.shape()) + " vs " +
                       shape_string(shape));
    }
    channels += p.dim(0);
  }
  shape[0] = channels;
  Tensor<Scalar> out(shape);
  Index at = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + at);
    at += p.value().size();
  }
  const std::size_t count = parts.size();
  return parts.front().tape->record(std::move(out), parts, [count](Tape<Scalar>& t, Index self) {
    const auto& g = t.grad(self);
    Index at = 0;
    for (std::size_t k = 0; k < count; ++k) {
      const Index id = t.input(self, k);
      const Index n = t.value(id).size();
      if (t.requires_grad(id)) {
        t.grad_buffer(id).array() += Eigen::Map<const typename Tensor<Scalar>::Array>(g.data() + at, n);
      }
      at += n;
    }
  });
}

/// Gathers `indices` along `axis`; out.shape[axis] = indices.size().
template <typename Scalar>
Var<Scalar> index_select(Var<Scalar> a, Index axis, std::vector<Index> indices) {
  const auto& in = a.value();
  if (axis < 0 || axis >= in.rank()) throw ShapeError("index_select: bad axis");
  if (indices.empty()) throw ShapeError("index_select: no indices");
  Index outer = 1, inner = 1;
  for (Index d = 0; d < axis; ++d) outer *= in.dim(d);
  for (Index d = axis + 1; d < in.rank(); ++d) inner *= in.dim(d);
  const Index n = in.dim(axis);
  for (Index i : indices) {
    if (i < 0 || i >= n) throw std::out_of_range("index_select: index out of range");
  }
  Shape shape = in.shape();
  const Index m = static_cast<Index>(indices.size());
  shape[axis] = m;
  Tensor<Scalar> out(shape);
  for (Index o = 0; o < outer; ++o) {
    for (Index k = 0; k < m; ++k) {
      const Scalar* src = in.data() + (o * n + indices[k]) * inner;
      std::copy(src, src + inner, out.data() + (o * m + k) * inner);
    }
  }
  return a.tape->record(std::move(out), {a},
                        [indices, outer, inner, n, m](Tape<Scalar>& t, Index self) {
                          const auto& g = t.grad(self);
                          auto& gi = t.grad_buffer(t.input(self, 0));
                          for (Index o = 0; o < outer; ++o) {
                            for (Index k = 0; k < m; ++k) {
                              const Scalar* src = g.data() + (o * m + k) * inner;
                              Scalar* dst = gi.data() + (o * n + indices[k]) * inner;
                              for (Index i = 0; i < inner; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

// -------------------------------------------------------------------------------------------
// Contractions

/// C = op(A) op(B) for rank-2 operands, or batched over the leading axis for rank-3 operands.
template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b, bool trans_a = false, bool trans_b = false) {
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  using CMap = Eigen::Map<const RowMatrix>;
  using MMap = Eigen::Map<RowMatrix>;
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != bv.rank() || (av.rank() != 2 && av.rank() != 3)) {
    throw ShapeError("matmul expects two rank-2 or two rank-3 tensors");
  }
  const bool batched = av.rank() == 3;
  const Index batch = batched ? av.dim(0) : 1;
  if (batched && bv.dim(0) != batch) throw ShapeError("matmul: batch extents differ");
  const Index ar = av.dim(batched ? 1 : 0), ac = av.dim(batched ? 2 : 1);
  const Index br = bv.dim(batched ? 1 : 0), bc = bv.dim(batched ? 2 : 1);
  const Index m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const Index k2 = trans_b ? bc : br, n = trans_b ? br : bc;
  if (k != k2) {
    throw ShapeError("matmul: inner extents differ " + shape_string(av.shape()) + " x " +
                     shape_string(bv.shape()));
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Tensor<Scalar> out(shape);
  for (Index i = 0; i < batch; ++i) {
    CMap A(av.data() + i * ar * ac, ar, ac);
    CMap B(bv.data() + i * br * bc, br, bc);
    MMap C(out.data() + i * m * n, m, n);
    if (!trans_a && !trans_b) C.noalias() = A * B;
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  return a.tape->record(
      std::move(out), {a, b},
      [=](Tape<Scalar>& t, Index self) {
        const Index ia = t.input(self, 0), ib = t.input(self, 1);
        const auto& g = t.grad(self);
        const auto& av = t.value(ia);
        const auto& bv = t.value(ib);
        const bool need_a = t.requires_grad(ia), need_b = t.requires_grad(ib);
        Scalar* ga = need_a ? t.grad_buffer(ia).data() : nullptr;
        Scalar* gb = need_b ? t.grad_buffer(ib).data() : nullptr;
        for (Index i = 0; i < batch; ++i) {
          CMap A(av.data() + i * ar * ac, ar, ac);
          CMap B(bv.data() + i * br * bc, br, bc);
          CMap G(g.data() + i * m * n, m, n);
          if (need_a) {
            MMap GA(ga + i * ar * ac, ar, ac);
            // d op(A) = G op(B)^T
            if (!trans_a && !trans_b) GA.noalias() += G * B.transpose();
            else if (!trans_a && trans_b) GA.noalias() += G * B;
            else if (trans_a && !trans_b) GA.noalias() += B * G.transpose();
            else GA.noalias() += B.transpose() * G.transpose();
          }
          if (need_b) {
            MMap GB(gb + i * br * bc, br, bc);
            // d op(B) = op(A)^T G
            if (!trans_a && !trans_b) GB.noalias() += A.transpose() * G;
            else if (trans_a && !trans_b) GB.noalias() += A * G;
            else if (!trans_a && trans_b) GB.noalias() += G.transpose() * A;
            else GB.noalias() += G.transpose() * A.transpose();
          }
        }
      });
}

template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> a, std::vector<Index> axes) {
  Tensor<Scalar> out = mmnet::softmax(a.value(), axes);
  return a.tape->record(std::move(out), {a}, [axes](Tape<Scalar>& t, Index self) {
    // dx = y * (g - sum_axes(y * g))
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    std::vector<bool> reduce(y.rank(), false);
    for (Index ax : axes) reduce[ax] = true;
    std::vector<Index> perm;
    Index width = 1;
    for (Index d = 0; d < y.rank(); ++d)
      if (!reduce[d]) perm.push_back(d);
    for (Index d = 0; d < y.rank(); ++d)
      if (reduce[d]) {
        perm.push_back(d);
        width *= y.dim(d);
      }
    Tensor<Scalar> yp = permuted(y, perm);
    Tensor<Scalar> gp = permuted(g, perm);
    const Index rows = yp.size() / width;
    auto Y = yp.row_matrix(rows, width);
    auto G = gp.row_matrix(rows, width);
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = (Y.array() * G.array()).rowwise().sum();
    G = (Y.array() * (G.colwise() - dots).array()).matrix();
    t.grad_buffer(t.input(self, 0)).array() += permuted(gp, inverse_permutation(perm)).array();
  });
}

// -------------------------------------------------------------------------------------------
// Convolutions

namespace detail {

template <typename Scalar>
void add_bias(Tensor<Scalar>& out, const Tensor<Scalar>& bias) {
  const Index c = out.dim(0);
  if (bias.rank() != 1 || bias.dim(0) != c) throw ShapeError("bias extent must match channels");
  auto M = out.matrix(out.size() / c, c);
  M.rowwise() += bias.matrix(1, c).row(0);
}

/// 1x1, stride 1, no padding: a plain channel mixing GEMM without lowering.
template <typename Scalar>
Var<Scalar> pointwise_conv(Var<Scalar> x, Var<Scalar> w, std::optional<Var<Scalar>> bias) {
  const auto& xv = x.value();
  const Index cin = xv.dim(0), cout = w.dim(0), pixels = xv.size() / cin;
  Tensor<Scalar> out(Shape{cout, xv.dim(1), xv.dim(2)});
  out.matrix(pixels, cout).noalias() = xv.matrix(pixels, cin) * w.value().matrix(cin, cout);
  std::vector<Var<Scalar>> inputs{x, w};
  if (bias) {
    add_bias(out, bias->value());
    inputs.push_back(*bias);
  }
  return x.tape->record(
      std::move(out), inputs,
      [cin, cout, pixels, has_bias = bias.has_value()](Tape<Scalar>& t, Index self) {
        const Index ix = t.input(self, 0), iw = t.input(self, 1);
        const auto G = t.grad(self).matrix(pixels, cout);
        if (t.requires_grad(iw)) {
          t.grad_buffer(iw).matrix(cin, cout).noalias() +=
              t.value(ix).matrix(pixels, cin).transpose() * G;
        }
        if (t.requires_grad(ix)) {
          t.grad_buffer(ix).matrix(pixels, cin).noalias() +=
              G * t.value(iw).matrix(cin, cout).transpose();
        }
        if (has_bias) {
          const Index ib = t.input(self, 2);
          if (t.requires_grad(ib)) t.grad_buffer(ib).matrix(1, cout) += G.colwise().sum();
        }
      });
}

}  // namespace detail

/// Cross-correlation of x [Cin,H,W] with w [Cout,Cin,k,k], optional bias [Cout].
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> w, std::optional<std::type_identity_t<Var<Scalar>>> bias,
                   ConvGeometry geom) {
  using Matrix = typename Tensor<Scalar>::Matrix;
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 3 || wv.rank() != 4) throw ShapeError("conv2d expects x [C,H,W], w [O,C,k,k]");
  if (wv.dim(2) != wv.dim(3)) throw ShapeError("conv2d: square kernels only");
  if (wv.dim(1) != xv.dim(0)) {
    throw ShapeError("conv2d: weight " + shape_string(wv.shape()) + " does not fit input " +
                     shape_string(xv.shape()));
  }
  if (geom.stride < 1 || geom.dilation < 1 || geom.padding < 0) {
    throw std::invalid_argument("conv2d: stride and dilation must be >= 1, padding >= 0");
  }
  const Index cin = xv.dim(0), cout = wv.dim(0), k = wv.dim(2);
  const Index oh = conv_output_extent(xv.dim(1), k, geom);
  const Index ow = conv_output_extent(xv.dim(2), k, geom);
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: non-positive output extent");
  const ConvPlan plan = make_conv_plan(cin, xv.dim(1), xv.dim(2), oh, ow, k, geom);
  if (k == 1 && geom.stride == 1 && geom.padding == 0) {
    return detail::pointwise_conv(x, w, bias);
  }

  Matrix cols(plan.out_pixels(), plan.columns());
  im2col(xv.data(), plan, cols.data());
  const auto wfull = wv.matrix(cin * k * k, cout);
  Tensor<Scalar> out(Shape{cout, oh, ow});
  if (plan.dense()) {
    out.matrix(plan.out_pixels(), cout).noalias() = cols * wfull;
  } else {
    out.matrix(plan.out_pixels(), cout).noalias() = cols * gather_tap_rows<Scalar>(wfull, plan);
  }
  std::vector<Var<Scalar>> inputs{x, w};
  if (bias) {
    detail::add_bias(out, bias->value());
    inputs.push_back(*bias);
  }
  const bool keep_cols = w.requires_grad();
  if (!keep_cols) cols.resize(0, 0);
  return x.tape->record(
      std::move(out), inputs,
      [plan, cols = std::move(cols), has_bias = bias.has_value()](Tape<Scalar>& t, Index self) {
        const Index ix = t.input(self, 0), iw = t.input(self, 1);
        const auto& g = t.grad(self);
        const Index cout = g.dim(0);
        const Index kk = plan.kernel * plan.kernel;
        const auto G = g.matrix(plan.out_pixels(), cout);
        if (t.requires_grad(iw)) {
          auto gw = t.grad_buffer(iw).matrix(plan.channels * kk, cout);
          if (plan.dense()) {
            gw.noalias() += cols.transpose() * G;
          } else {
            Matrix sub = cols.transpose() * G;
            scatter_tap_rows_add<Scalar>(sub, plan, gw);
          }
        }
        if (t.requires_grad(ix)) {
          const auto wfull = t.value(iw).matrix(plan.channels * kk, cout);
          Matrix dcols;
          if (plan.dense()) dcols.noalias() = G * wfull.transpose();
          else dcols.noalias() = G * gather_tap_rows<Scalar>(wfull, plan).transpose();
          col2im_add(dcols.data(), plan, t.grad_buffer(ix).data());
        }
        if (has_bias) {
          const Index ib = t.input(self, 2);
          if (t.requires_grad(ib)) {
            t.grad_buffer(ib).matrix(1, cout) += G.colwise().sum();
          }
        }
      });
}

/// Transposed convolution of x [Cin,H,W] with w [Cin,Cout,k,k]: the adjoint of conv2d with the
/// same weights and geometry.
template <typename Scalar>
Var<Scalar> deconv2d(Var<Scalar> x, Var<Scalar> w, std::optional<std::type_identity_t<Var<Scalar>>> bias,
                     ConvGeometry geom) {
  using Matrix = typename Tensor<Scalar>::Matrix;
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 3 || wv.rank() != 4) {
    throw ShapeError("deconv2d expects x [C,H,W], w [C,O,k,k]");
  }
  if (wv.dim(2) != wv.dim(3)) throw ShapeError("deconv2d: square kernels only");
  if (wv.dim(0) != xv.dim(0)) {
    throw ShapeError("deconv2d: weight " + shape_string(wv.shape()) + " does not fit input " +
                     shape_string(xv.shape()));
  }
  if (geom.stride < 1 || geom.dilation < 1 || geom.padding < 0) {
    throw std::invalid_argument("deconv2d: stride and dilation must be >= 1, padding >= 0");
  }
  const Index cin = xv.dim(0), cout = wv.dim(1), k = wv.dim(2);
  const Index oh = deconv_output_extent(xv.dim(1), k, geom);
  const Index ow = deconv_output_extent(xv.dim(2), k, geom);
  if (oh <= 0 || ow <= 0) throw ShapeError("deconv2d: non-positive output extent");
  // The plan describes the forward conv that maps [cout,oh,ow] to [cin,H,W].
  const ConvPlan plan = make_conv_plan(cout, oh, ow, xv.dim(1), xv.dim(2), k, geom);
  const auto wfull = wv.matrix(cout * k * k, cin);
  const auto X = xv.matrix(plan.out_pixels(), cin);
  Matrix cols;
  if (plan.dense()) cols.noalias() = X * wfull.transpose();
  else cols.noalias() = X * gather_tap_rows<Scalar>(wfull, plan).transpose();
  Tensor<Scalar> out(Shape{cout, oh, ow});
  col2im_add(cols.data(), plan, out.data());
  std::vector<Var<Scalar>> inputs{x, w};
  if (bias) {
    detail::add_bias(out, bias->value());
    inputs.push_back(*bias);
  }
  return x.tape->record(
      std::move(out), inputs,
      [plan, has_bias = bias.has_value()](Tape<Scalar>& t, Index self) {
        const Index ix = t.input(self, 0), iw = t.input(self, 1);
        const auto& g = t.grad(self);
        const Index cin = t.value(ix).dim(0);
        const Index cout = plan.channels;
        const Index kk = plan.kernel * plan.kernel;
        Matrix gcols(plan.out_pixels(), plan.columns());
        im2col(g.data(), plan, gcols.data());
        if (t.requires_grad(ix)) {
          const auto wfull = t.value(iw).matrix(cout * kk, cin);
          auto gx = t.grad_buffer(ix).matrix(plan.out_pixels(), cin);
          if (plan.dense()) gx.noalias() += gcols * wfull;
          else gx.noalias() += gcols * gather_tap_rows<Scalar>(wfull, plan);
        }
        if (t.requires_grad(iw)) {
          const auto X = t.value(ix).matrix(plan.out_pixels(), cin);
          auto gw = t.grad_buffer(iw).matrix(cout * kk, cin);
          if (plan.dense()) {
            gw.noalias() += gcols.transpose() * X;
          } else {
            Matrix sub = gcols.transpose() * X;
            scatter_tap_rows_add<Scalar>(sub, plan, gw);
          }
        }
        if (has_bias) {
          const Index ib = t.input(self, 2);
          if (t.requires_grad(ib)) {
            t.grad_buffer(ib).matrix(1, cout) += g.matrix(g.size() / cout, cout).colwise().sum();
          }
        }
      });
}

// -------------------------------------------------------------------------------------------
// Spatial gathers and resampling

/// X' [C,H,W,r,r]: slot (a,b) of cell (i,j) holds X[:, i+a-r/2, j+b-r/2], zero outside the map.
template <typename Scalar>
Var<Scalar> gather_neighborhood(Var<Scalar> x, Index r) {
  const auto& xv = x.value();
  if (xv.rank() != 3) throw ShapeError("gather_neighborhood expects [C,H,W]");
  if (r < 1 || r % 2 == 0) throw std::invalid_argument("neighborhood size must be odd and >= 1");
  const Index c = xv.dim(0), h = xv.dim(1), w = xv.dim(2), half = r / 2;
  Tensor<Scalar> out(Shape{c, h, w, r, r});
  auto visit = [=](auto&& fn) {
    for (Index ch = 0; ch < c; ++ch)
      for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j)
          for (Index a = 0; a < r; ++a) {
            const Index y = i + a - half;
            if (y < 0 || y >= h) continue;
            for (Index b = 0; b < r; ++b) {
              const Index xx = j + b - half;
              if (xx < 0 || xx >= w) continue;
              fn(((ch * h + y) * w + xx), ((((ch * h + i) * w + j) * r + a) * r + b));
            }
          }
  };
  visit([&](Index src, Index dst) { out[dst] = xv[src]; });
  return x.tape->record(std::move(out), {x}, [visit](Tape<Scalar>& t, Index self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_buffer(t.input(self, 0));
    visit([&](Index src, Index dst) { gx[src] += g[dst]; });
  });
}

/// Zero padding of `p` cells on every side of a [C,H,W] map.
template <typename Scalar>
Var<Scalar> pad2d(Var<Scalar> x, Index p) {
  const auto& xv = x.value();
  if (xv.rank() != 3) throw ShapeError("pad2d expects [C,H,W]");
  if (p < 0) throw std::invalid_argument("pad2d: negative padding");
  const Index c = xv.dim(0), h = xv.dim(1), w = xv.dim(2), hp = h + 2 * p, wp = w + 2 * p;
  Tensor<Scalar> out(Shape{c, hp, wp});
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < h; ++i) {
      const Scalar* src = xv.data() + (ch * h + i) * w;
      std::copy(src, src + w, out.data() + (ch * hp + i + p) * wp + p);
    }
  return x.tape->record(std::move(out), {x}, [=](Tape<Scalar>& t, Index self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_buffer(t.input(self, 0));
    for (Index ch = 0; ch < c; ++ch)
      for (Index i = 0; i < h; ++i) {
        const Scalar* src = g.data() + (ch * hp + i + p) * wp + p;
        Scalar* dst = gx.data() + (ch * h + i) * w;
        for (Index j = 0; j < w; ++j) dst[j] += src[j];
      }
  });
}

/// Cell-major r x r windows of an already padded map: x [C, H+r-1, W+r-1] -> [H*W, r*r, C]
/// with out[i*W + j, a*r + b, c] = x[c, i+a, j+b].
template <typename Scalar>
Var<Scalar> unfold_windows(Var<Scalar> x, Index r) {
  const auto& xv = x.value();
  if (xv.rank() != 3) throw ShapeError("unfold_windows expects [C,H,W]");
  if (r < 1 || xv.dim(1) < r || xv.dim(2) < r) throw ShapeError("unfold_windows: map smaller than window");
  const Index c = xv.dim(0), hp = xv.dim(1), wp = xv.dim(2);
  const Index h = hp - r + 1, w = wp - r + 1;
  Tensor<Scalar> out(Shape{h * w, r * r, c});
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j)
      for (Index a = 0; a < r; ++a)
        for (Index b = 0; b < r; ++b) {
          Scalar* dst = out.data() + (((i * w + j) * r + a) * r + b) * c;
          const Scalar* src = xv.data() + (i + a) * wp + (j + b);
          for (Index ch = 0; ch < c; ++ch) dst[ch] = src[ch * hp * wp];
        }
  return x.tape->record(std::move(out), {x}, [=](Tape<Scalar>& t, Index self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_buffer(t.input(self, 0));
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j)
        for (Index a = 0; a < r; ++a)
          for (Index b = 0; b < r; ++b) {
            const Scalar* src = g.data() + (((i * w + j) * r + a) * r + b) * c;
            Scalar* dst = gx.data() + (i + a) * wp + (j + b);
            for (Index ch = 0; ch < c; ++ch) dst[ch * hp * wp] += src[ch];
          }
  });
}

/// Doubles one axis by half-pixel aligned Catmull-Rom interpolation with clamped edges.
template <typename Scalar>
Var<Scalar> upsample2(Var<Scalar> a, Index axis) {
  if (axis < 0 || axis >= a.value().rank()) throw ShapeError("upsample2: bad axis");
  Tensor<Scalar> out = upsample2_axis(a.value(), axis);
  return a.tape->record(std::move(out), {a}, [axis](Tape<Scalar>& t, Index self) {
    t.grad_buffer(t.input(self, 0)).array() += upsample2_axis_adjoint(t.grad(self), axis).array();
  });
}

// -------------------------------------------------------------------------------------------
// Losses

/// Lower bound applied to log(p) and log(1-p), matching the usual BCE clamp.
inline constexpr double kLogFloor = -100.0;

/// sum_j -[t_j log p_j + (1 - t_j) log(1 - p_j)] over every element.
template <typename Scalar>
Var<Scalar> binary_cross_entropy_sum(Var<Scalar> p, const Tensor<Scalar>& target) {
  if (p.shape() != target.shape()) throw ShapeError("bce: prediction/target shapes differ");
  const auto& pv = p.value();
  double total = 0.0;
  for (Index i = 0; i < pv.size(); ++i) {
    const double pi = static_cast<double>(pv[i]);
    const double ti = static_cast<double>(target[i]);
    const double lp = std::max(std::log(pi), kLogFloor);
    const double lq = std::max(std::log1p(-pi), kLogFloor);
    total -= ti * lp + (1.0 - ti) * lq;
  }
  Tensor<Scalar> out(Shape{});
  out[0] = static_cast<Scalar>(total);
  return p.tape->record(std::move(out), {p}, [target](Tape<Scalar>& t, Index self) {
    const Index ip = t.input(self, 0);
    const auto& pv = t.value(ip);
    const double g = static_cast<double>(t.grad(self)[0]);
    auto& gp = t.grad_buffer(ip);
    for (Index i = 0; i < pv.size(); ++i) {
      const double pi = static_cast<double>(pv[i]);
      const double ti = static_cast<double>(target[i]);
      double d = 0.0;
      if (std::log(pi) > kLogFloor) d -= ti / pi;
      if (std::log1p(-pi) > kLogFloor) d += (1.0 - ti) / (1.0 - pi);
      gp[i] += static_cast<Scalar>(g * d);
    }
  });
}

/// binary_cross_entropy_sum(softmax(logits, {1}), target) for [R, N] logits, evaluated from the
/// logits so that saturated rows keep finite, exact gradients.
template <typename Scalar>
Var<Scalar> softmax_bce_sum(Var<Scalar> logits, const Tensor<Scalar>& target) {
  const auto& sv = logits.value();
  if (sv.rank() != 2) throw ShapeError("softmax_bce expects [R, N] logits");
  if (sv.shape() != target.shape()) throw ShapeError("softmax_bce: logit/target shapes differ");
  const Index rows = sv.dim(0), n = sv.dim(1);
  // per element: dL/ds, filled during the forward pass
  auto grad = std::make_shared<std::vector<double>>(static_cast<std::size_t>(sv.size()));
  std::vector<double> e(static_cast<std::size_t>(n)), q(static_cast<std::size_t>(n)),
      a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const Scalar* s = sv.data() + r * n;
    const Scalar* tr = target.data() + r * n;
    Index top = 0;
    for (Index j = 1; j < n; ++j)
      if (s[j] > s[top]) top = j;
    const double m = static_cast<double>(s[top]);
    double z = 0.0, rest = 0.0;
    for (Index j = 0; j < n; ++j) {
      e[j] = std::exp(static_cast<double>(s[j]) - m);
      z += e[j];
      if (j != top) rest += e[j];
    }
    const double log_z = std::log(z);
    double sum_a = 0.0, sum_b = 0.0, c_rest = 0.0;
    for (Index j = 0; j < n; ++j) {
      const double t = static_cast<double>(tr[j]);
      const double others = j == top ? rest : z - e[j];
      const double lp = static_cast<double>(s[j]) - m - log_z;
      const double lq = std::log(others) - log_z;
      q[j] = others / z;
      a[j] = lp > kLogFloor ? t : 0.0;
      b[j] = lq > kLogFloor ? 1.0 - t : 0.0;
      total -= t * std::max(lp, kLogFloor) + (1.0 - t) * std::max(lq, kLogFloor);
      sum_a += a[j];
      sum_b += b[j];
      if (j != top && b[j] != 0.0) c_rest += b[j] / q[j];
    }
    const double c_top = b[top] != 0.0 ? b[top] / q[top] : 0.0;
    for (Index j = 0; j < n; ++j) {
      const double p = e[j] / z;
      const double c_others = j == top ? c_rest : c_rest - (b[j] != 0.0 ? b[j] / q[j] : 0.0) + c_top;
      (*grad)[r * n + j] = -a[j] + p * (sum_a + sum_b) - p * c_others;
    }
  }
  Tensor<Scalar> out(Shape{});
  out[0] = static_cast<Scalar>(total);
  return logits.tape->record(std::move(out), {logits}, [grad](Tape<Scalar>& t, Index self) {
    const double g = static_cast<double>(t.grad(self)[0]);
    auto& gs = t.grad_buffer(t.input(self, 0));
    for (Index i = 0; i < gs.size(); ++i) gs[i] += static_cast<Scalar>(g * (*grad)[i]);
  });
}

}  // namespace mmnet::ad
