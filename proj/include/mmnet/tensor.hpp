#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmnet {

using Index = std::int64_t;
using Shape = std::vector<Index>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-dimensional array. The last axis is contiguous.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    for (Index d : shape_) {
      if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
    data_ = Array::Constant(shape_size(shape_), fill);
  }

  static Tensor from(Shape shape, std::span<const Scalar> values) {
    Tensor t(std::move(shape));
    if (static_cast<Index>(values.size()) != t.size()) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_string(t.shape_));
    }
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  static Tensor from(Shape shape, std::initializer_list<Scalar> values) {
    return from(std::move(shape), std::span<const Scalar>(values.begin(), values.size()));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return static_cast<Index>(data_.size()); }
  /// False only for a default-constructed tensor. A rank-0 tensor holds one value.
  bool has_data() const { return data_.size() > 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> values() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Array& array() { return data_; }
  const Array& array() const { return data_; }

  /// Column-major view with `rows` contiguous; for a [C,H,W] tensor, matrix(H*W, C) has one
  /// column per channel plane.
  Eigen::Map<Matrix> matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return Eigen::Map<Matrix>(data(), rows, cols);
  }
  Eigen::Map<const Matrix> matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return Eigen::Map<const Matrix>(data(), rows, cols);
  }
  Eigen::Map<RowMatrix> row_matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return Eigen::Map<RowMatrix>(data(), rows, cols);
  }
  Eigen::Map<const RowMatrix> row_matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return Eigen::Map<const RowMatrix>(data(), rows, cols);
  }

  template <typename... Ix>
  Scalar& operator()(Ix... ix) {
    return data_[offset({static_cast<Index>(ix)...})];
  }
  template <typename... Ix>
  const Scalar& operator()(Ix... ix) const {
    return data_[offset({static_cast<Index>(ix)...})];
  }

  Scalar& operator[](Index i) { return data_[i]; }
  const Scalar& operator[](Index i) const { return data_[i]; }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }

  void reshape_inplace(Shape shape) {
    if (shape_size(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.array() = data_.template cast<Other>();
    return out;
  }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  void check_view(Index rows, Index cols) const {
    if (rows * cols != size()) {
      throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " does not cover tensor " + shape_string(shape_));
    }
  }

  Index offset(std::initializer_list<Index> ix) const {
    if (static_cast<Index>(ix.size()) != rank()) {
      throw ShapeError("index rank mismatch for tensor " + shape_string(shape_));
    }
    Index off = 0;
    std::size_t axis = 0;
    for (Index i : ix) {
      const Index extent = shape_[axis++];
      if (i < 0 || i >= extent) throw std::out_of_range("tensor index out of range");
      off = off * extent + i;
    }
    return off;
  }

  Shape shape_;
  Array data_;
};

/// Row-major strides for `shape`.
inline std::vector<Index> strides_of(const Shape& shape) {
  std::vector<Index> strides(shape.size(), 1);
  for (Index i = static_cast<Index>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * shape[i + 1];
  }
  return strides;
}

/// out.shape[i] = in.shape[perm[i]].
template <typename Scalar>
Tensor<Scalar> permuted(const Tensor<Scalar>& in, std::span<const Index> perm) {
  const Index rank = in.rank();
  if (static_cast<Index>(perm.size()) != rank) throw ShapeError("permutation rank mismatch");
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (Index i = 0; i < rank; ++i) {
    const Index p = perm[i];
    if (p < 0 || p >= rank || seen[p]) throw ShapeError("invalid permutation");
    seen[p] = true;
    out_shape[i] = in.dim(p);
  }
  Tensor<Scalar> out(out_shape);
  const auto in_strides = strides_of(in.shape());
  std::vector<Index> src_stride(rank);
  for (Index i = 0; i < rank; ++i) src_stride[i] = in_strides[perm[i]];

  std::vector<Index> counter(rank, 0);
  Index src = 0;
  const Index n = out.size();
  Scalar* dst = out.data();
  const Scalar* base = in.data();
  const Index inner = rank ? out_shape[rank - 1] : 1;
  const Index inner_stride = rank ? src_stride[rank - 1] : 0;
  for (Index o = 0; o < n; o += inner) {
    for (Index k = 0; k < inner; ++k) dst[o + k] = base[src + k * inner_stride];
    for (Index ax = rank - 2; ax >= 0; --ax) {
      src += src_stride[ax];
      if (++counter[ax] < out_shape[ax]) break;
      src -= src_stride[ax] * out_shape[ax];
      counter[ax] = 0;
    }
  }
  return out;
}

inline std::vector<Index> inverse_permutation(std::span<const Index> perm) {
  std::vector<Index> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<Index>(i);
  return inv;
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  return (a.array() - b.array()).abs().maxCoeff();
}

}  // namespace mmnet
