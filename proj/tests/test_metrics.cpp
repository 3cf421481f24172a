#include <cmath>

#include "doctest.h"
#include "fixed_images.hpp"
#include "xmodal/metrics.hpp"
#include "xmodal/noise.hpp"

using namespace xmodal;

namespace {

// Direct per-window SSIM with a 2-D Gaussian window, no separability.
double brute_force_ssim(const Eigen::MatrixXf& x, const Eigen::MatrixXf& y, int h, int w) {
  const int n = 11, r = 5;
  double weights[11][11], total = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      weights[i][j] = std::exp(-((i - r) * (i - r) + (j - r) * (j - r)) / (2 * 1.5 * 1.5));
      total += weights[i][j];
    }
  }
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double sum = 0.0;
  int count = 0;
  for (int cy = r; cy < h - r; ++cy) {
    for (int cx = r; cx < w - r; ++cx) {
      double mx = 0, my = 0;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          const double wt = weights[i][j] / total;
          mx += wt * x(0, (cy - r + i) * w + cx - r + j);
          my += wt * y(0, (cy - r + i) * w + cx - r + j);
        }
      }
      double vx = 0, vy = 0, cxy = 0;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          const double wt = weights[i][j] / total;
          const double a = x(0, (cy - r + i) * w + cx - r + j) - mx, b = y(0, (cy - r + i) * w + cx - r + j) - my;
          vx += wt * a * a;
          vy += wt * b * b;
          cxy += wt * a * b;
        }
      }
      sum += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return sum / count;
}

Eigen::MatrixXf random_image(NoiseSource& rng, int h, int w) {
  Eigen::MatrixXf m(1, h * w);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = static_cast<float>(rng.uniform());
  return m;
}

FrameStream constant_stream(int T, float v) {
  FrameStream s(T, 16, 16, 1);
  s.data.setConstant(v);
  return s;
}

}  // namespace

TEST_CASE("psnr analytic values") {
  const Eigen::MatrixXf zeros = Eigen::MatrixXf::Zero(1, 64), ones = Eigen::MatrixXf::Ones(1, 64);
  CHECK(psnr(zeros, zeros) == kPsnrCap);
  CHECK(psnr(zeros, ones) == doctest::Approx(0.0));
  const Eigen::MatrixXf offset = Eigen::MatrixXf::Constant(1, 64, 0.1f);
  // 10 log10(1 / 0.01)
  CHECK(psnr(zeros, offset) == doctest::Approx(20.0).epsilon(1e-6));
  CHECK_THROWS_AS(psnr(zeros, Eigen::MatrixXf::Zero(1, 63)), std::invalid_argument);
  CHECK_THROWS_AS(psnr(zeros, ones, 0.0), std::invalid_argument);
}

TEST_CASE("psnr of streams averages per-frame values") {
  FrameStream a = constant_stream(2, 0.0f), b = constant_stream(2, 0.0f);
  b.frame(1).setConstant(0.1f);
  CHECK(psnr(a, b) == doctest::Approx((100.0 + 20.0) / 2).epsilon(1e-6));
  CHECK(psnr(a, b, 1.0, 1) == doctest::Approx(20.0).epsilon(1e-6));
}

TEST_CASE("ssim of an image with itself is one and psnr is capped") {
  for (int k = 0; k < kNumFixedImages; ++k) {
    const auto [x, y, h, w] = fixed_image_pair(k);
    CHECK(ssim(x, x, h, w) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(psnr(x, x) == kPsnrCap);
  }
}

TEST_CASE("ssim matches the frozen reference implementation values") {
  for (int k = 0; k < kNumFixedImages; ++k) {
    const auto [x, y, h, w] = fixed_image_pair(k);
    INFO("image " << k);
    CHECK(std::abs(ssim(x, y, h, w) - kReferenceSsim[k]) < 1e-6);
  }
}

TEST_CASE("ssim matches a brute-force window oracle") {
  for (int k = 0; k < kNumFixedImages; ++k) {
    const auto [x, y, h, w] = fixed_image_pair(k);
    CHECK(ssim(x, y, h, w) == doctest::Approx(brute_force_ssim(x, y, h, w)).epsilon(1e-12));
  }
}

TEST_CASE("ssim of a checkerboard against its inverse") {
  Eigen::MatrixXf board(1, 32 * 32);
  for (int r = 0; r < 32; ++r) {
    for (int c = 0; c < 32; ++c) board(0, r * 32 + c) = static_cast<float>((r / 4 + c / 4) % 2);
  }
  const Eigen::MatrixXf inverse = (1.0f - board.array()).matrix();
  const double v = ssim(board, inverse, 32, 32);
  CHECK(v < 0.5);
  CHECK(v == doctest::Approx(-0.903411668365663).epsilon(1e-9));
}

TEST_CASE("ssim is symmetric") {
  NoiseSource rng(3);
  for (int i = 0; i < 100; ++i) {
    const Eigen::MatrixXf a = random_image(rng, 16, 16), b = random_image(rng, 16, 16);
    CHECK(ssim(a, b, 16, 16) == ssim(b, a, 16, 16));
  }
}

TEST_CASE("ssim lies in [-1, 1]") {
  NoiseSource rng(4);
  for (int i = 0; i < 50; ++i) {
    const Eigen::MatrixXf a = random_image(rng, 12, 14), b = random_image(rng, 12, 14);
    const double v = ssim(a, b, 12, 14);
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("ssim decreases with additive noise level") {
  const auto [x, y, h, w] = fixed_image_pair(0);
  NoiseSource rng(9);
  const Eigen::MatrixXf n = rng.normal_matrix<float>(1, x.cols());
  double last = 1.0;
  for (float sigma : {0.01f, 0.05f, 0.1f}) {
    const Eigen::MatrixXf noisy = x + sigma * n;
    const double v = ssim(x, noisy, h, w);
    CHECK(v < last);
    last = v;
  }
}

TEST_CASE("ssim averages channels") {
  const auto [x, y, h, w] = fixed_image_pair(1);
  Eigen::MatrixXf x2(2, x.cols()), y2(2, x.cols());
  x2 << x, x;
  y2 << y, x;
  CHECK(ssim(x2, y2, h, w) == doctest::Approx((ssim(x, y, h, w) + 1.0) / 2).epsilon(1e-12));
}

TEST_CASE("ssim rejects images smaller than the window") {
  const Eigen::MatrixXf small = Eigen::MatrixXf::Zero(1, 10 * 10);
  CHECK_THROWS_AS(ssim(small, small, 10, 10), std::invalid_argument);
}

TEST_CASE("diversity score") {
  const FrameStream zero = constant_stream(3, 0.0f), one = constant_stream(3, 1.0f), half = constant_stream(3, 0.5f);
  SUBCASE("identical samples score zero") {
    const FrameStream s[] = {half, half, half};
    CHECK(diversity_score(s) == 0.0);
  }
  SUBCASE("constant streams 0 and 1 score one") {
    const FrameStream s[] = {zero, one};
    CHECK(diversity_score(s) == doctest::Approx(1.0));
  }
  SUBCASE("invariant under reordering") {
    NoiseSource rng(5);
    std::vector<FrameStream> s;
    for (int k = 0; k < 4; ++k) {
      FrameStream f(3, 16, 16, 1);
      f.data = rng.normal_matrix<float>(1, f.data.cols());
      s.push_back(f);
    }
    const double a = diversity_score(s);
    std::swap(s[0], s[3]);
    std::swap(s[1], s[2]);
    CHECK(diversity_score(s) == doctest::Approx(a).epsilon(1e-12));
  }
  SUBCASE("fewer than two samples is rejected") {
    const FrameStream s[] = {zero};
    CHECK_THROWS_AS(diversity_score(s), std::invalid_argument);
  }
}
