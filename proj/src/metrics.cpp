#include "xmodal/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace xmodal {

namespace {

void check_same_stream(const FrameStream& x, const FrameStream& y, int first) {
  if (x.height != y.height || x.width != y.width || x.channels != y.channels || x.data.cols() != y.data.cols()) {
    throw std::invalid_argument("metric: stream shapes differ");
  }
  if (first < 0 || first >= x.length()) throw std::invalid_argument("metric: no frames in range");
}

Eigen::VectorXd gaussian_kernel(int size, double sigma) {
  Eigen::VectorXd k(size);
  const double r = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) k(i) = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
  return k / k.sum();
}

// Valid-mode separable filter of an (H, W) image.
Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& img, const Eigen::VectorXd& k) {
  const Eigen::Index n = k.size();
  const Eigen::Index oh = img.rows() - n + 1, ow = img.cols() - n + 1;
  Eigen::MatrixXd rows = Eigen::MatrixXd::Zero(img.rows(), ow);
  for (Eigen::Index j = 0; j < n; ++j) rows += k(j) * img.middleCols(j, ow);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(oh, ow);
  for (Eigen::Index i = 0; i < n; ++i) out += k(i) * rows.middleRows(i, oh);
  return out;
}

Eigen::MatrixXd channel_image(const Eigen::MatrixXf& m, Eigen::Index c, int height, int width) {
  Eigen::MatrixXd img(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) img(y, x) = m(c, Eigen::Index{y} * width + x);
  }
  return img;
}

}  // namespace

double psnr(const Eigen::MatrixXf& x, const Eigen::MatrixXf& y, double max_value) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw std::invalid_argument("psnr: shape mismatch");
  if (x.size() == 0) throw std::invalid_argument("psnr: empty image");
  if (!(max_value > 0)) throw std::invalid_argument("psnr: max_value must be > 0");
  const double mse = (x.cast<double>() - y.cast<double>()).squaredNorm() / static_cast<double>(x.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(max_value * max_value / mse));
}

double psnr(const FrameStream& x, const FrameStream& y, double max_value, int first) {
  check_same_stream(x, y, first);
  double sum = 0.0;
  for (int t = first; t < x.length(); ++t) sum += psnr(Eigen::MatrixXf(x.frame(t)), Eigen::MatrixXf(y.frame(t)), max_value);
  return sum / (x.length() - first);
}

double ssim(const Eigen::MatrixXf& x, const Eigen::MatrixXf& y, int height, int width, const SsimOptions& opt) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw std::invalid_argument("ssim: shape mismatch");
  if (x.cols() != Eigen::Index{height} * width || x.rows() < 1) throw std::invalid_argument("ssim: bad image shape");
  if (height < opt.window || width < opt.window) throw std::invalid_argument("ssim: image smaller than the window");
  const Eigen::VectorXd k = gaussian_kernel(opt.window, opt.sigma);
  const double c1 = std::pow(opt.k1 * opt.max_value, 2), c2 = std::pow(opt.k2 * opt.max_value, 2);
  double total = 0.0;
  for (Eigen::Index c = 0; c < x.rows(); ++c) {
    const Eigen::MatrixXd a = channel_image(x, c, height, width), b = channel_image(y, c, height, width);
    const Eigen::ArrayXXd ma = filter_valid(a, k).array(), mb = filter_valid(b, k).array();
    const Eigen::ArrayXXd maa = ma * ma, mbb = mb * mb, mab = ma * mb;
    const Eigen::ArrayXXd vaa = filter_valid(a.cwiseProduct(a), k).array() - maa;
    const Eigen::ArrayXXd vbb = filter_valid(b.cwiseProduct(b), k).array() - mbb;
    const Eigen::ArrayXXd vab = filter_valid(a.cwiseProduct(b), k).array() - mab;
    const Eigen::ArrayXXd s = ((2 * mab + c1) * (2 * vab + c2)) / ((maa + mbb + c1) * (vaa + vbb + c2));
    total += s.mean();
  }
  return total / static_cast<double>(x.rows());
}

double ssim(const FrameStream& x, const FrameStream& y, int first, const SsimOptions& opt) {
  check_same_stream(x, y, first);
  double sum = 0.0;
  for (int t = first; t < x.length(); ++t) {
    sum += ssim(Eigen::MatrixXf(x.frame(t)), Eigen::MatrixXf(y.frame(t)), x.height, x.width, opt);
  }
  return sum / (x.length() - first);
}

double diversity_score(std::span<const FrameStream> samples, int first) {
  if (samples.size() < 2) throw std::invalid_argument("diversity_score: need at least two samples");
  for (const auto& s : samples) check_same_stream(samples.front(), s, first);
  const int T = samples.front().length();
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t j = i + 1; j < samples.size(); ++j, ++pairs) {
      double per_t = 0.0;
      for (int t = first; t < T; ++t) {
        const auto d = (samples[i].frame(t).cast<double>() - samples[j].frame(t).cast<double>()).eval();
        per_t += std::sqrt(d.squaredNorm() / static_cast<double>(d.size()));
      }
      sum += per_t / (T - first);
    }
  }
  return sum / static_cast<double>(pairs);
}

}  // namespace xmodal
