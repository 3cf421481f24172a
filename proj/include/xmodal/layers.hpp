#pragma once

// Building blocks for the hand-differentiated network: convolution lowering,
// pointwise activations and a single long short-term memory step.
//
// Feature maps are stored channel-major: a batch of N images with C channels
// and H x W pixels is a (C, N*H*W) matrix whose column n*H*W + y*W + x holds
// pixel (y, x) of image n. In column-major memory this is exactly the
// N x H x W x C interleaved order used on disk.

#include <Eigen/Core>

#include "xmodal/common.hpp"

namespace xmodal {

struct ConvGeometry {
  Eigen::Index channels;
  Eigen::Index height;
  Eigen::Index width;
  Eigen::Index kernel;
  Eigen::Index stride;
  Eigen::Index pad;

  Eigen::Index out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  Eigen::Index out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  Eigen::Index patch_size() const { return channels * kernel * kernel; }
};

/// (C, N*H*W) -> (C*k*k, N*Ho*Wo). Row index is (c*k + ky)*k + kx.
template <typename Scalar>
Mat<Scalar> im2col(const Mat<Scalar>& x, const ConvGeometry& g, Eigen::Index images);

/// Adjoint of im2col: scatters-and-adds patch columns back into an image.
template <typename Scalar>
Mat<Scalar> col2im(const Mat<Scalar>& cols, const ConvGeometry& g, Eigen::Index images);

inline constexpr double kLeakySlope = 0.2;

template <typename Derived>
Mat<typename Derived::Scalar> leaky_relu(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return x.unaryExpr([](S v) { return v > S(0) ? v : S(kLeakySlope) * v; });
}

/// grad * d/dx leaky_relu(x), evaluated at pre-activation x.
template <typename DG, typename DX>
Mat<typename DX::Scalar> leaky_relu_backward(const Eigen::MatrixBase<DG>& grad, const Eigen::MatrixBase<DX>& pre) {
  using S = typename DX::Scalar;
  return grad.binaryExpr(pre, [](S g, S v) { return v > S(0) ? g : S(kLeakySlope) * g; });
}

template <typename Derived>
Mat<typename Derived::Scalar> sigmoid(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return (S(1) / (S(1) + (-x.array()).exp())).matrix();
}

/// Caches of one recurrent step, kept for backpropagation through time.
template <typename Scalar>
struct LstmStep {
  Mat<Scalar> input;  // [x; h_prev]
  Mat<Scalar> in_gate, forget_gate, cell_gate, out_gate;
  Mat<Scalar> c_prev, c, tanh_c, h;
};

/// One step of a long short-term memory cell with stacked gate weights
/// (rows: input, forget, cell, output) acting on [x; h_prev].
template <typename Scalar>
LstmStep<Scalar> lstm_forward(const Eigen::Ref<const Mat<Scalar>>& weight, const Eigen::Ref<const Mat<Scalar>>& bias,
                              const Mat<Scalar>& x, const Mat<Scalar>& h_prev, const Mat<Scalar>& c_prev);

/// Backward through one step. `dh` and `dc` hold the gradient arriving at h
/// and c; on return they hold the gradient for h_prev and c_prev. Returns the
/// gradient with respect to x.
template <typename Scalar>
Mat<Scalar> lstm_backward(const Eigen::Ref<const Mat<Scalar>>& weight, const LstmStep<Scalar>& step, Mat<Scalar>& dh,
                          Mat<Scalar>& dc, Eigen::Ref<Mat<Scalar>> dweight, Eigen::Ref<Mat<Scalar>> dbias);

}  // namespace xmodal
