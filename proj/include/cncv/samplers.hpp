#pragma once

// Exact multivariate-Gaussian sampling and a Metropolis-adjusted Langevin
// (MALA) chain.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <sstream>
#include <vector>

#include "cncv/errors.hpp"
#include "cncv/rng.hpp"

namespace cncv {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline Vec standard_normal(Eigen::Index d, RngStream& rng) {
  Vec z(d);
  for (Eigen::Index i = 0; i < d; ++i) z(i) = rng.normal();
  return z;
}

/// Draws mu + L z with L the lower Cholesky factor of cov; reuse for many draws.
class GaussianSampler {
 public:
  GaussianSampler(Vec mean, const Mat& cov) : mean_(std::move(mean)) {
    require_dims(static_cast<std::size_t>(cov.rows()), static_cast<std::size_t>(mean_.size()),
                 "GaussianSampler");
    require_dims(static_cast<std::size_t>(cov.cols()), static_cast<std::size_t>(mean_.size()),
                 "GaussianSampler");
    Eigen::LLT<Mat> llt(cov);
    if (llt.info() != Eigen::Success) {
      throw NumericError("GaussianSampler: covariance is not symmetric positive definite");
    }
    chol_ = llt.matrixL();
  }

  Vec operator()(RngStream& rng) const {
    return mean_ + chol_.triangularView<Eigen::Lower>() * standard_normal(mean_.size(), rng);
  }

  /// n draws as the columns of a d x n matrix.
  Mat sample(Eigen::Index n, RngStream& rng) const {
    Mat z(mean_.size(), n);
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = rng.normal();
    Mat out = chol_.triangularView<Eigen::Lower>() * z;
    out.colwise() += mean_;
    return out;
  }

  const Vec& mean() const noexcept { return mean_; }
  const Mat& cholesky() const noexcept { return chol_; }

 private:
  Vec mean_;
  Mat chol_;
};

inline Vec gaussian_exact_sample(const Vec& mean, const Mat& cov, RngStream& rng) {
  return GaussianSampler(mean, cov)(rng);
}

struct MalaConfig {
  double step_size = 0.1;
  int burn_in = 1000;
  int thinning = 5;
  double target_acceptance = 0.574;
  bool adapt = true;

  void validate() const {
    if (!(step_size > 0.0)) throw ConfigError("mala: step_size must be > 0");
    if (burn_in < 0) throw ConfigError("mala: burn_in must be >= 0");
    if (thinning < 1) throw ConfigError("mala: thinning must be >= 1");
    if (!(target_acceptance > 0.0 && target_acceptance < 1.0)) {
      throw ConfigError("mala: target_acceptance must lie in (0, 1)");
    }
  }
};

struct MalaChain {
  std::vector<Vec> draws;
  double acceptance_rate = 0.0;  // over the post-burn-in steps
  double step_size = 0.0;        // frozen value after burn-in
};

using ScoreFn = std::function<Vec(const Vec&)>;
using LogDensityFn = std::function<double(const Vec&)>;

namespace detail {

[[noreturn]] inline void mala_non_finite(const Vec& x, const char* what) {
  std::ostringstream os;
  os << "mala: non-finite " << what << " at state [" << x.transpose() << "]";
  throw NumericError(os.str());
}

}  // namespace detail

/// Runs burn-in (with step adaptation if enabled) then returns n thinned states.
///
/// Proposal x' = x + (eps^2 / 2) score(x) + eps z. During burn-in the log step
/// size follows a Robbins-Monro update toward the target acceptance rate with
/// gain (t + 1)^-0.6; it is frozen afterwards.
inline MalaChain mala_chain(const ScoreFn& score, const LogDensityFn& log_density, const Vec& x0,
                            int n, const MalaConfig& config, RngStream& rng) {
  config.validate();
  if (n < 1) throw ConfigError("mala: n must be >= 1");

  Vec x = x0;
  double logp = log_density(x);
  Vec grad = score(x);
  if (!std::isfinite(logp)) detail::mala_non_finite(x, "log-density");
  if (!grad.allFinite()) detail::mala_non_finite(x, "score");

  double log_eps = std::log(config.step_size);
  MalaChain out;
  out.draws.reserve(static_cast<std::size_t>(n));
  long accepted_after = 0;
  long steps_after = 0;
  const long total = static_cast<long>(config.burn_in) + static_cast<long>(n) * config.thinning;

  for (long t = 0; t < total; ++t) {
    const double eps = std::exp(log_eps);
    const double half_eps2 = 0.5 * eps * eps;
    const Vec z = standard_normal(x.size(), rng);
    const Vec prop = x + half_eps2 * grad + eps * z;
    const double logp_prop = log_density(prop);
    const Vec grad_prop = score(prop);
    if (!std::isfinite(logp_prop)) detail::mala_non_finite(prop, "log-density");
    if (!grad_prop.allFinite()) detail::mala_non_finite(prop, "score");

    // log q(a | b) = -|a - b - half_eps2 * score(b)|^2 / (2 eps^2)
    const double log_q_forward = -(prop - x - half_eps2 * grad).squaredNorm() / (2.0 * eps * eps);
    const double log_q_backward =
        -(x - prop - half_eps2 * grad_prop).squaredNorm() / (2.0 * eps * eps);
    const double log_alpha = logp_prop - logp + log_q_backward - log_q_forward;
    const double accept_prob = log_alpha >= 0.0 ? 1.0 : std::exp(log_alpha);
    const bool accept = rng.uniform() < accept_prob;
    if (accept) {
      x = prop;
      logp = logp_prop;
      grad = grad_prop;
    }

    if (t < config.burn_in) {
      if (config.adapt) {
        log_eps += (accept_prob - config.target_acceptance) / std::pow(static_cast<double>(t + 1), 0.6);
      }
      continue;
    }
    ++steps_after;
    if (accept) ++accepted_after;
    if ((t - config.burn_in + 1) % config.thinning == 0) out.draws.push_back(x);
  }
  out.acceptance_rate = steps_after ? static_cast<double>(accepted_after) / steps_after : 0.0;
  out.step_size = std::exp(log_eps);
  return out;
}

}  // namespace cncv
