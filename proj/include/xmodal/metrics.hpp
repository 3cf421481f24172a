#pragma once

#include <span>

#include "xmodal/model.hpp"

namespace xmodal {

inline constexpr double kPsnrCap = 100.0;

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double max_value = 1.0;
};

/// 10 log10(max^2 / MSE) for images of shape (C, H*W); capped at 100 dB.
double psnr(const Eigen::MatrixXf& x, const Eigen::MatrixXf& y, double max_value = 1.0);

/// Mean per-frame PSNR over frames [first, T).
double psnr(const FrameStream& x, const FrameStream& y, double max_value = 1.0, int first = 0);

/// Mean local SSIM over windows lying fully inside the image, with Gaussian
/// weights and population (co)variances. Images are (C, H*W), row-major
/// pixels; channels are averaged.
double ssim(const Eigen::MatrixXf& x, const Eigen::MatrixXf& y, int height, int width, const SsimOptions& opt = {});

/// Mean per-frame SSIM over frames [first, T).
double ssim(const FrameStream& x, const FrameStream& y, int first = 0, const SsimOptions& opt = {});

/// Mean over unordered sample pairs of the per-pixel RMS difference,
/// averaged over frames [first, T).
double diversity_score(std::span<const FrameStream> samples, int first = 0);

}  // namespace xmodal
