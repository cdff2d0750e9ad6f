#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "aquant/errors.hpp"

namespace aquant {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixd = RowMatrix<double>;

inline Index shape_numel(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-dimensional array.
///
/// A default-constructed tensor is empty (rank 0, no elements). Every other
/// tensor has strictly positive extents and size() == product(shape()).
template <typename Scalar>
class Tensor {
public:
  using value_type = Scalar;
  using Flat = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstFlat = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (static_cast<Index>(data_.size()) != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  template <typename Derived>
  static Tensor from_matrix(const Eigen::DenseBase<Derived>& m) {
    Tensor t({static_cast<Index>(m.rows()), static_cast<Index>(m.cols())});
    t.matrix() = m.template cast<Scalar>();
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const noexcept { return static_cast<Index>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<Scalar> data() noexcept { return data_; }
  std::span<const Scalar> data() const noexcept { return data_; }
  const std::vector<Scalar>& vec() const noexcept { return data_; }

  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const Scalar& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  Flat flat() { return Flat(data_.data(), size()); }
  ConstFlat flat() const { return ConstFlat(data_.data(), size()); }

  /// View as rows x (size/rows); the leading axis becomes the row index.
  MatrixMap matrix() { return MatrixMap(data_.data(), rows2d(), cols2d()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows2d(), cols2d()); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, std::vector<Other>(data_.begin(), data_.end()));
  }

  /// Rows [begin, begin + count) along the leading axis.
  Tensor slice_rows(Index begin, Index count) const {
    if (rank() == 0 || begin < 0 || count <= 0 || begin + count > shape_[0])
      throw ShapeError("row slice out of range for " + shape_str(shape_));
    Shape s = shape_;
    s[0] = count;
    const Index stride = size() / shape_[0];
    return Tensor(std::move(s), std::vector<Scalar>(data_.begin() + begin * stride,
                                                   data_.begin() + (begin + count) * stride));
  }

  /// Gathers the given rows along the leading axis.
  Tensor gather_rows(std::span<const Index> rows) const {
    if (rank() == 0 || rows.empty()) throw ShapeError("row gather on empty selection");
    const Index stride = size() / shape_[0];
    Shape s = shape_;
    s[0] = static_cast<Index>(rows.size());
    Tensor out(std::move(s));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r] < 0 || rows[r] >= shape_[0]) throw ShapeError("row index out of range");
      std::copy_n(data_.begin() + rows[r] * stride, stride, out.data_.begin() + static_cast<Index>(r) * stride);
    }
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (Index d : shape)
      if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  Index rows2d() const { return shape_.empty() ? 0 : shape_[0]; }
  Index cols2d() const { return shape_.empty() ? 0 : size() / shape_[0]; }

  Shape shape_;
  std::vector<Scalar> data_;
};

using Tensorf = Tensor<float>;

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

/// Matrix product of two rank-2 tensors. Each output element is accumulated in double.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_shape(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 operands");
  require_shape(a.dim(1) == b.dim(0), "matmul inner dimensions differ: " + shape_str(a.shape()) +
                                          " x " + shape_str(b.shape()));
  const RowMatrixd prod = a.matrix().template cast<double>() * b.matrix().template cast<double>();
  return Tensor<Scalar>::from_matrix(prod);
}

struct ConvGeometry {
  Index batch, in_ch, height, width;
  Index out_ch, kernel, stride, pad;
  Index out_h, out_w;

  Index patch() const { return in_ch * kernel * kernel; }
  Index positions() const { return out_h * out_w; }
};

template <typename Scalar>
ConvGeometry conv_geometry(const Shape& x, const Shape& w, Index stride, Index pad) {
  require_shape(x.size() == 4, "conv2d input must be NCHW, got " + shape_str(x));
  require_shape(w.size() == 4 && w[2] == w[3], "conv2d kernel must be OIKK, got " + shape_str(w));
  require_shape(x[1] == w[1], "conv2d channel mismatch: input " + shape_str(x) + " kernel " + shape_str(w));
  require_shape(stride >= 1 && pad >= 0, "conv2d needs stride >= 1 and pad >= 0");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], stride, pad, 0, 0};
  g.out_h = (g.height + 2 * pad - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kernel) / stride + 1;
  require_shape(g.height + 2 * pad >= g.kernel && g.width + 2 * pad >= g.kernel && g.out_h > 0 && g.out_w > 0,
                "conv2d output extents must be positive");
  return g;
}

/// Patch matrix of shape (C*K*K) x (N*OH*OW), column index = n*OH*OW + oy*OW + ox.
template <typename Scalar>
RowMatrixd im2col(const Tensor<Scalar>& x, const ConvGeometry& g) {
  RowMatrixd cols = RowMatrixd::Zero(g.patch(), g.batch * g.positions());
  const auto xd = x.data();
  for (Index c = 0; c < g.in_ch; ++c)
    for (Index ky = 0; ky < g.kernel; ++ky)
      for (Index kx = 0; kx < g.kernel; ++kx) {
        const Index row = (c * g.kernel + ky) * g.kernel + kx;
        double* out = cols.row(row).data();
        for (Index n = 0; n < g.batch; ++n) {
          const Scalar* plane = xd.data() + (n * g.in_ch + c) * g.height * g.width;
          for (Index oy = 0; oy < g.out_h; ++oy) {
            const Index iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.height) continue;
            for (Index ox = 0; ox < g.out_w; ++ox) {
              const Index ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= g.width) continue;
              out[(n * g.out_h + oy) * g.out_w + ox] = plane[iy * g.width + ix];
            }
          }
        }
      }
  return cols;
}

/// Adjoint of im2col: scatters patch gradients back onto an NCHW tensor.
template <typename Scalar>
Tensor<Scalar> col2im(const RowMatrixd& cols, const ConvGeometry& g) {
  std::vector<double> acc(static_cast<std::size_t>(g.batch * g.in_ch * g.height * g.width), 0.0);
  for (Index c = 0; c < g.in_ch; ++c)
    for (Index ky = 0; ky < g.kernel; ++ky)
      for (Index kx = 0; kx < g.kernel; ++kx) {
        const double* in = cols.row((c * g.kernel + ky) * g.kernel + kx).data();
        for (Index n = 0; n < g.batch; ++n) {
          double* plane = acc.data() + (n * g.in_ch + c) * g.height * g.width;
          for (Index oy = 0; oy < g.out_h; ++oy) {
            const Index iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.height) continue;
            for (Index ox = 0; ox < g.out_w; ++ox) {
              const Index ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= g.width) continue;
              plane[iy * g.width + ix] += in[(n * g.out_h + oy) * g.out_w + ox];
            }
          }
        }
      }
  return Tensor<Scalar>({g.batch, g.in_ch, g.height, g.width}, std::vector<Scalar>(acc.begin(), acc.end()));
}

/// (O x N*P) channel-major matrix -> NCHW tensor.
template <typename Scalar>
Tensor<Scalar> channels_to_nchw(const RowMatrixd& m, const ConvGeometry& g) {
  Tensor<Scalar> y({g.batch, g.out_ch, g.out_h, g.out_w});
  const Index p = g.positions();
  for (Index n = 0; n < g.batch; ++n)
    for (Index o = 0; o < g.out_ch; ++o)
      for (Index i = 0; i < p; ++i) y[(n * g.out_ch + o) * p + i] = static_cast<Scalar>(m(o, n * p + i));
  return y;
}

/// NCHW tensor -> (C x N*P) channel-major matrix.
template <typename Scalar>
RowMatrixd nchw_to_channels(const Tensor<Scalar>& y) {
  const Index n_ = y.dim(0), c_ = y.dim(1), p = y.dim(2) * y.dim(3);
  RowMatrixd m(c_, n_ * p);
  for (Index n = 0; n < n_; ++n)
    for (Index c = 0; c < c_; ++c)
      for (Index i = 0; i < p; ++i) m(c, n * p + i) = y[(n * c_ + c) * p + i];
  return m;
}

/// 2-D cross-correlation with zero padding, NCHW input and OIKK kernel.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, Index stride, Index pad) {
  const ConvGeometry g = conv_geometry<Scalar>(x.shape(), w.shape(), stride, pad);
  const RowMatrixd cols = im2col(x, g);
  const RowMatrixd out = w.matrix().template cast<double>() * cols;
  return channels_to_nchw<Scalar>(out, g);
}

/// Gradients of conv2d with respect to its input and kernel.
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> conv2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                                          const Tensor<Scalar>& grad_out, Index stride,
                                                          Index pad) {
  const ConvGeometry g = conv_geometry<Scalar>(x.shape(), w.shape(), stride, pad);
  require_shape(grad_out.shape() == Shape({g.batch, g.out_ch, g.out_h, g.out_w}),
                "conv2d gradient shape mismatch: " + shape_str(grad_out.shape()));
  const RowMatrixd cols = im2col(x, g);
  const RowMatrixd dy = nchw_to_channels(grad_out);
  const RowMatrixd dw = dy * cols.transpose();
  const RowMatrixd dcols = w.matrix().template cast<double>().transpose() * dy;
  Tensor<Scalar> grad_w(w.shape());
  grad_w.matrix() = dw.template cast<Scalar>();
  return {col2im<Scalar>(dcols, g), std::move(grad_w)};
}

/// Kernel gradient only, reusing a precomputed patch matrix.
template <typename Scalar>
Tensor<Scalar> conv2d_weight_grad(const RowMatrixd& cols, const Tensor<Scalar>& grad_out, const Shape& w_shape) {
  const RowMatrixd dy = nchw_to_channels(grad_out);
  require_shape(dy.cols() == cols.cols(), "conv2d weight-gradient geometry mismatch");
  Tensor<Scalar> grad_w(w_shape);
  grad_w.matrix() = (dy * cols.transpose()).template cast<Scalar>();
  return grad_w;
}

}  // namespace aquant
