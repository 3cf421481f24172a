#include "xmodal/layers.hpp"

namespace xmodal {

namespace {

// Visits every (patch row, output column) pair whose input pixel lies inside
// the image, calling f(row, col, input_column, channel).
template <typename F>
void for_each_patch_tap(const ConvGeometry& g, Eigen::Index images, F&& f) {
  const Eigen::Index ho = g.out_height(), wo = g.out_width();
  const Eigen::Index k = g.kernel;
  for (Eigen::Index n = 0; n < images; ++n) {
    for (Eigen::Index oy = 0; oy < ho; ++oy) {
      for (Eigen::Index ox = 0; ox < wo; ++ox) {
        const Eigen::Index col = (n * ho + oy) * wo + ox;
        for (Eigen::Index ky = 0; ky < k; ++ky) {
          const Eigen::Index iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          for (Eigen::Index kx = 0; kx < k; ++kx) {
            const Eigen::Index ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.width) continue;
            const Eigen::Index in_col = (n * g.height + iy) * g.width + ix;
            for (Eigen::Index c = 0; c < g.channels; ++c) {
              f((c * k + ky) * k + kx, col, in_col, c);
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Mat<Scalar> im2col(const Mat<Scalar>& x, const ConvGeometry& g, Eigen::Index images) {
  Mat<Scalar> cols = Mat<Scalar>::Zero(g.patch_size(), images * g.out_height() * g.out_width());
  for_each_patch_tap(g, images, [&](Eigen::Index row, Eigen::Index col, Eigen::Index in_col, Eigen::Index c) {
    cols(row, col) = x(c, in_col);
  });
  return cols;
}

template <typename Scalar>
Mat<Scalar> col2im(const Mat<Scalar>& cols, const ConvGeometry& g, Eigen::Index images) {
  Mat<Scalar> x = Mat<Scalar>::Zero(g.channels, images * g.height * g.width);
  for_each_patch_tap(g, images, [&](Eigen::Index row, Eigen::Index col, Eigen::Index in_col, Eigen::Index c) {
    x(c, in_col) += cols(row, col);
  });
  return x;
}

template <typename Scalar>
LstmStep<Scalar> lstm_forward(const Eigen::Ref<const Mat<Scalar>>& weight, const Eigen::Ref<const Mat<Scalar>>& bias,
                              const Mat<Scalar>& x, const Mat<Scalar>& h_prev, const Mat<Scalar>& c_prev) {
  const Eigen::Index hidden = h_prev.rows();
  LstmStep<Scalar> s;
  s.input.resize(x.rows() + hidden, x.cols());
  s.input.topRows(x.rows()) = x;
  s.input.bottomRows(hidden) = h_prev;
  Mat<Scalar> gates = weight * s.input;
  gates.colwise() += bias.col(0);
  s.in_gate = sigmoid(gates.topRows(hidden));
  s.forget_gate = sigmoid(gates.middleRows(hidden, hidden));
  s.cell_gate = gates.middleRows(2 * hidden, hidden).array().tanh().matrix();
  s.out_gate = sigmoid(gates.bottomRows(hidden));
  s.c_prev = c_prev;
  s.c = (s.forget_gate.array() * c_prev.array() + s.in_gate.array() * s.cell_gate.array()).matrix();
  s.tanh_c = s.c.array().tanh().matrix();
  s.h = (s.out_gate.array() * s.tanh_c.array()).matrix();
  return s;
}

template <typename Scalar>
Mat<Scalar> lstm_backward(const Eigen::Ref<const Mat<Scalar>>& weight, const LstmStep<Scalar>& s, Mat<Scalar>& dh,
                          Mat<Scalar>& dc, Eigen::Ref<Mat<Scalar>> dweight, Eigen::Ref<Mat<Scalar>> dbias) {
  const Eigen::Index hidden = s.h.rows();
  const Eigen::Index in_rows = s.input.rows() - hidden;
  const auto one = Scalar(1);

  dc.array() += dh.array() * s.out_gate.array() * (one - s.tanh_c.array().square());
  Mat<Scalar> dgates(4 * hidden, s.h.cols());
  dgates.topRows(hidden) =
      (dc.array() * s.cell_gate.array() * s.in_gate.array() * (one - s.in_gate.array())).matrix();
  dgates.middleRows(hidden, hidden) =
      (dc.array() * s.c_prev.array() * s.forget_gate.array() * (one - s.forget_gate.array())).matrix();
  dgates.middleRows(2 * hidden, hidden) =
      (dc.array() * s.in_gate.array() * (one - s.cell_gate.array().square())).matrix();
  dgates.bottomRows(hidden) =
      (dh.array() * s.tanh_c.array() * s.out_gate.array() * (one - s.out_gate.array())).matrix();

  dweight.noalias() += dgates * s.input.transpose();
  dbias.col(0) += dgates.rowwise().sum();
  Mat<Scalar> dinput = weight.transpose() * dgates;

  dc = (dc.array() * s.forget_gate.array()).matrix();
  dh = dinput.bottomRows(hidden);
  return dinput.topRows(in_rows);
}

#define XMODAL_INSTANTIATE_LAYERS(S)                                                                               \
  template Mat<S> im2col<S>(const Mat<S>&, const ConvGeometry&, Eigen::Index);                                   \
  template Mat<S> col2im<S>(const Mat<S>&, const ConvGeometry&, Eigen::Index);                                   \
  template LstmStep<S> lstm_forward<S>(const Eigen::Ref<const Mat<S>>&, const Eigen::Ref<const Mat<S>>&,         \
                                       const Mat<S>&, const Mat<S>&, const Mat<S>&);                             \
  template Mat<S> lstm_backward<S>(const Eigen::Ref<const Mat<S>>&, const LstmStep<S>&, Mat<S>&, Mat<S>&,        \
                                   Eigen::Ref<Mat<S>>, Eigen::Ref<Mat<S>>);

XMODAL_INSTANTIATE_LAYERS(float)
XMODAL_INSTANTIATE_LAYERS(double)

}  // namespace xmodal
