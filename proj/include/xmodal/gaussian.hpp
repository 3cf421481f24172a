#pragma once

// Diagonal-Gaussian latent math: closed-form KL between two diagonal
// Gaussians, reparameterized sampling and log-density.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "xmodal/common.hpp"

namespace xmodal {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

/// N(mean, diag(exp(log_var))). log_var is clamped to [-10, 10] on
/// construction.
template <typename Scalar>
class DiagonalGaussian {
 public:
  DiagonalGaussian(Vec<Scalar> mean, Vec<Scalar> log_var)
      : mean_(std::move(mean)), log_var_(std::move(log_var)) {
    if (mean_.size() < 1 || mean_.size() != log_var_.size()) {
      throw std::invalid_argument(
          "DiagonalGaussian: mean and log_var must have equal length >= 1 (got " +
          std::to_string(mean_.size()) + " and " + std::to_string(log_var_.size()) + ")");
    }
    if (!mean_.allFinite() || !log_var_.allFinite()) {
      throw std::invalid_argument("DiagonalGaussian: non-finite parameters");
    }
    log_var_ = log_var_.cwiseMax(Scalar(kLogVarMin)).cwiseMin(Scalar(kLogVarMax));
  }

  /// N(0, I) of dimension `dim`.
  static DiagonalGaussian standard(Eigen::Index dim) {
    return DiagonalGaussian(Vec<Scalar>::Zero(dim), Vec<Scalar>::Zero(dim));
  }

  Eigen::Index dim() const { return mean_.size(); }
  const Vec<Scalar>& mean() const { return mean_; }
  const Vec<Scalar>& log_var() const { return log_var_; }
  Vec<Scalar> variance() const { return log_var_.array().exp().matrix(); }
  Vec<Scalar> stddev() const { return (Scalar(0.5) * log_var_.array()).exp().matrix(); }

 private:
  Vec<Scalar> mean_;
  Vec<Scalar> log_var_;
};

namespace detail {
inline void check_dims(Eigen::Index a, Eigen::Index b, const char* op) {
  if (a != b) {
    throw std::invalid_argument(std::string(op) + ": dimension mismatch (" + std::to_string(a) +
                                " vs " + std::to_string(b) + ")");
  }
}
}  // namespace detail

/// Column-wise KL[q || p] for batches of diagonal Gaussians stored as
/// (D x N) matrices. Returns a 1 x N row of per-column divergences.
template <typename DQ, typename DLq, typename DP, typename DLp>
auto kl_divergence_columns(const Eigen::MatrixBase<DQ>& mean_q, const Eigen::MatrixBase<DLq>& log_var_q,
                           const Eigen::MatrixBase<DP>& mean_p, const Eigen::MatrixBase<DLp>& log_var_p) {
  using Scalar = typename DQ::Scalar;
  const auto diff = (mean_q - mean_p).array();
  const auto per_dim = Scalar(0.5) * (log_var_p.array() - log_var_q.array()) +
                       (log_var_q.array().exp() + diff.square()) / (Scalar(2) * log_var_p.array().exp()) -
                       Scalar(0.5);
  return per_dim.colwise().sum().matrix().eval();
}

/// KL[q || p] = sum_d 1/2 (lv_p - lv_q) + (var_q + (mu_q - mu_p)^2) / (2 var_p) - 1/2.
template <typename Scalar>
Scalar kl_divergence(const DiagonalGaussian<Scalar>& q, const DiagonalGaussian<Scalar>& p) {
  detail::check_dims(q.dim(), p.dim(), "kl_divergence");
  return kl_divergence_columns(q.mean(), q.log_var(), p.mean(), p.log_var())(0);
}

/// Partial derivatives of KL[q || p] with respect to all four parameter
/// vectors, evaluated column-wise.
template <typename Scalar>
struct KlGradient {
  Mat<Scalar> mean_q, log_var_q, mean_p, log_var_p;
};

template <typename Scalar>
KlGradient<Scalar> kl_divergence_gradient(const Mat<Scalar>& mean_q, const Mat<Scalar>& log_var_q,
                                          const Mat<Scalar>& mean_p, const Mat<Scalar>& log_var_p) {
  const auto inv_var_p = (-log_var_p.array()).exp();
  const auto ratio = (log_var_q - log_var_p).array().exp();
  const Mat<Scalar> diff = mean_q - mean_p;
  KlGradient<Scalar> g;
  g.mean_q = (diff.array() * inv_var_p).matrix();
  g.mean_p = -g.mean_q;
  g.log_var_q = (Scalar(0.5) * ratio - Scalar(0.5)).matrix();
  g.log_var_p = (Scalar(0.5) - Scalar(0.5) * ratio - Scalar(0.5) * diff.array().square() * inv_var_p).matrix();
  return g;
}

/// mean + exp(log_var / 2) * noise.
template <typename Scalar, typename Derived>
Vec<Scalar> reparameterized_sample(const DiagonalGaussian<Scalar>& g, const Eigen::MatrixBase<Derived>& noise) {
  detail::check_dims(noise.size(), g.dim(), "reparameterized_sample");
  return g.mean() + (g.stddev().array() * noise.array()).matrix();
}

template <typename Scalar, typename Derived>
Scalar log_density(const Eigen::MatrixBase<Derived>& x, const DiagonalGaussian<Scalar>& g) {
  detail::check_dims(x.size(), g.dim(), "log_density");
  const auto diff = (x - g.mean()).array();
  const Scalar log_two_pi = static_cast<Scalar>(std::log(2.0 * std::numbers::pi));
  return Scalar(-0.5) *
         (Scalar(g.dim()) * log_two_pi + g.log_var().sum() + (diff.square() / g.variance().array()).sum());
}

}  // namespace xmodal
