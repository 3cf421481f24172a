#pragma once

// Monte-Carlo estimate of KL[q || p] = E_q[log q(x) - log p(x)] with its
// standard error.

#include "xmodal/gaussian.hpp"
#include "xmodal/noise.hpp"

namespace xmodal {

struct MonteCarloEstimate {
  double mean;
  double standard_error;
};

inline MonteCarloEstimate monte_carlo_kl(const DiagonalGaussian<double>& q, const DiagonalGaussian<double>& p,
                                         int draws, NoiseSource& rng) {
  double sum = 0.0, sq = 0.0;
  Eigen::VectorXd x(q.dim());
  for (int n = 0; n < draws; ++n) {
    for (Eigen::Index d = 0; d < q.dim(); ++d) x(d) = q.mean()(d) + q.stddev()(d) * rng.normal();
    const double v = log_density(x, q) - log_density(x, p);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / draws;
  const double var = (sq / draws - mean * mean) * draws / (draws - 1.0);
  return {mean, std::sqrt(var / draws)};
}

inline DiagonalGaussian<double> random_gaussian(NoiseSource& rng, Eigen::Index dim) {
  Eigen::VectorXd mean(dim), log_var(dim);
  for (Eigen::Index d = 0; d < dim; ++d) {
    mean(d) = rng.normal();
    log_var(d) = 4.0 * rng.uniform() - 2.0;
  }
  return {mean, log_var};
}

}  // namespace xmodal
