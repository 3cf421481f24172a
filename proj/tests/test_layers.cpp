#include <cmath>

#include "doctest.h"
#include "xmodal/layers.hpp"
#include "xmodal/noise.hpp"

using namespace xmodal;

namespace {

double conv_at(const Eigen::MatrixXd& w, const Eigen::MatrixXd& x, const ConvGeometry& g, Eigen::Index n,
               Eigen::Index co, Eigen::Index oy, Eigen::Index ox) {
  double s = 0.0;
  for (Eigen::Index c = 0; c < g.channels; ++c) {
    for (Eigen::Index ky = 0; ky < g.kernel; ++ky) {
      for (Eigen::Index kx = 0; kx < g.kernel; ++kx) {
        const Eigen::Index y = oy * g.stride - g.pad + ky, xx = ox * g.stride - g.pad + kx;
        if (y < 0 || y >= g.height || xx < 0 || xx >= g.width) continue;
        s += w(co, (c * g.kernel + ky) * g.kernel + kx) * x(c, (n * g.height + y) * g.width + xx);
      }
    }
  }
  return s;
}

}  // namespace

TEST_CASE("im2col lowering matches a direct convolution") {
  NoiseSource rng(1);
  for (const ConvGeometry g : {ConvGeometry{2, 8, 6, 4, 2, 1}, ConvGeometry{3, 5, 5, 3, 1, 1}}) {
    const Eigen::Index n = 2;
    const Eigen::MatrixXd x = rng.normal_matrix<double>(g.channels, n * g.height * g.width);
    const Eigen::MatrixXd w = rng.normal_matrix<double>(3, g.patch_size());
    const Eigen::MatrixXd y = w * im2col(x, g, n);
    const Eigen::Index ho = g.out_height(), wo = g.out_width();
    REQUIRE(y.cols() == n * ho * wo);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index co = 0; co < 3; ++co) {
        for (Eigen::Index oy = 0; oy < ho; ++oy) {
          for (Eigen::Index ox = 0; ox < wo; ++ox) {
            CHECK(y(co, (i * ho + oy) * wo + ox) == doctest::Approx(conv_at(w, x, g, i, co, oy, ox)).epsilon(1e-12));
          }
        }
      }
    }
  }
}

TEST_CASE("col2im is the adjoint of im2col") {
  NoiseSource rng(2);
  const ConvGeometry g{3, 8, 8, 4, 2, 1};
  const Eigen::Index n = 3;
  const Eigen::MatrixXd x = rng.normal_matrix<double>(g.channels, n * 64);
  const Eigen::MatrixXd c = rng.normal_matrix<double>(g.patch_size(), n * g.out_height() * g.out_width());
  const double lhs = (im2col(x, g, n).array() * c.array()).sum();
  const double rhs = (x.array() * col2im(c, g, n).array()).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("stride-2 transposed convolution doubles the resolution") {
  const ConvGeometry g{1, 8, 8, 4, 2, 1};
  CHECK(g.out_height() == 4);
  CHECK(g.out_width() == 4);
  const Eigen::MatrixXd cols = Eigen::MatrixXd::Ones(16, 16);
  const Eigen::MatrixXd up = col2im(cols, g, 1);
  CHECK(up.cols() == 64);
  // interior pixels are covered by 2x2 input positions
  CHECK(up(0, 3 * 8 + 3) == 4.0);
  CHECK(up(0, 0) == 1.0);
}

TEST_CASE("activations") {
  Eigen::MatrixXd x(1, 4);
  x << -2.0, -0.0, 0.5, 3.0;
  const Eigen::MatrixXd y = leaky_relu(x);
  CHECK(y(0, 0) == doctest::Approx(-0.4));
  CHECK(y(0, 2) == 0.5);
  const Eigen::MatrixXd g = leaky_relu_backward(Eigen::MatrixXd::Ones(1, 4), x);
  CHECK(g(0, 0) == doctest::Approx(0.2));
  CHECK(g(0, 3) == 1.0);
  const Eigen::MatrixXd s = sigmoid(x);
  CHECK(s(0, 1) == 0.5);
  CHECK(s(0, 3) == doctest::Approx(1.0 / (1.0 + std::exp(-3.0))));
}

TEST_CASE("lstm step against hand-written gates") {
  NoiseSource rng(3);
  const Eigen::Index in = 3, R = 2;
  const Eigen::MatrixXd w = rng.normal_matrix<double>(4 * R, in + R), b = rng.normal_matrix<double>(4 * R, 1);
  const Eigen::MatrixXd x = rng.normal_matrix<double>(in, 1), h = rng.normal_matrix<double>(R, 1),
                        c = rng.normal_matrix<double>(R, 1);
  const auto s = lstm_forward<double>(w, b, x, h, c);
  Eigen::VectorXd v(in + R);
  v << x.col(0), h.col(0);
  const Eigen::VectorXd a = w * v + b.col(0);
  auto sig = [](double t) { return 1.0 / (1.0 + std::exp(-t)); };
  for (Eigen::Index r = 0; r < R; ++r) {
    const double cn = sig(a(R + r)) * c(r, 0) + sig(a(r)) * std::tanh(a(2 * R + r));
    CHECK(s.c(r, 0) == doctest::Approx(cn).epsilon(1e-14));
    CHECK(s.h(r, 0) == doctest::Approx(sig(a(3 * R + r)) * std::tanh(cn)).epsilon(1e-14));
  }
}

TEST_CASE("lstm backward matches finite differences") {
  NoiseSource rng(4);
  const Eigen::Index in = 3, R = 4, B = 2;
  Eigen::MatrixXd w = rng.normal_matrix<double>(4 * R, in + R), b = rng.normal_matrix<double>(4 * R, 1);
  Eigen::MatrixXd x = rng.normal_matrix<double>(in, B);
  const Eigen::MatrixXd h = rng.normal_matrix<double>(R, B), c = rng.normal_matrix<double>(R, B);
  const Eigen::MatrixXd gh = rng.normal_matrix<double>(R, B), gc = rng.normal_matrix<double>(R, B);
  // L = <gh, h'> + <gc, c'>
  auto loss = [&]() {
    const auto s = lstm_forward<double>(w, b, x, h, c);
    return (gh.array() * s.h.array()).sum() + (gc.array() * s.c.array()).sum();
  };
  const auto s = lstm_forward<double>(w, b, x, h, c);
  Eigen::MatrixXd dh = gh, dc = gc, dw = Eigen::MatrixXd::Zero(4 * R, in + R), db = Eigen::MatrixXd::Zero(4 * R, 1);
  const Eigen::MatrixXd dx = lstm_backward<double>(w, s, dh, dc, dw, db);
  const double eps = 1e-6;
  auto numeric = [&](double& p) {
    const double keep = p;
    p = keep + eps;
    const double up = loss();
    p = keep - eps;
    const double down = loss();
    p = keep;
    return (up - down) / (2 * eps);
  };
  for (Eigen::Index i = 0; i < w.size(); i += 3) CHECK(dw(i) == doctest::Approx(numeric(w(i))).epsilon(1e-7));
  for (Eigen::Index i = 0; i < b.size(); ++i) CHECK(db(i) == doctest::Approx(numeric(b(i))).epsilon(1e-7));
  for (Eigen::Index i = 0; i < x.size(); ++i) CHECK(dx(i) == doctest::Approx(numeric(x(i))).epsilon(1e-7));
  CHECK(dc.rows() == R);
  CHECK(dh.rows() == R);
}
