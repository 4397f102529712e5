#pragma once

// Stylized Bayesian inverse problems y = F(x) + eps, eps ~ N(0, sigma^2 I),
// with analytic prior, likelihood and posterior scores.
//
//   gaussian   : x ~ N(0, Sigma_prior), F(x) = x
//   rosenbrock : p(x) ~ exp(-a (x1 - mu)^2 - b (x2 - x1^2)^2), F(x) = x, d = 2
//   nonlinear  : x ~ N(0, I), F(x) = A x + sin(x), cond(A) = 2

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

#include "cncv/errors.hpp"
#include "cncv/rng.hpp"
#include "cncv/samplers.hpp"

namespace cncv {

enum class ProblemKind { Gaussian, Rosenbrock, Nonlinear };

inline std::string_view to_string(ProblemKind k) {
  switch (k) {
    case ProblemKind::Gaussian: return "gaussian";
    case ProblemKind::Rosenbrock: return "rosenbrock";
    case ProblemKind::Nonlinear: return "nonlinear";
  }
  return "?";
}

inline ProblemKind problem_kind_from_string(std::string_view s) {
  if (s == "gaussian") return ProblemKind::Gaussian;
  if (s == "rosenbrock") return ProblemKind::Rosenbrock;
  if (s == "nonlinear") return ProblemKind::Nonlinear;
  throw ConfigError("unknown problem kind '" + std::string(s) + "'");
}

struct RosenbrockParams {
  double mu = 0.0;
  double a = 0.5;
  double b = 1.0;
};

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix, sign-fixed).
inline Mat random_orthogonal(Eigen::Index d, RngStream& rng) {
  Mat g(d, d);
  for (Eigen::Index j = 0; j < d; ++j)
    for (Eigen::Index i = 0; i < d; ++i) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ();
  const Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < d; ++i) {
    if (r(i, i) < 0.0) q.col(i) *= -1.0;
  }
  return q;
}

/// Q diag(lambda) Q^T with log-uniform lambda in [0.25, 4].
inline Mat random_spd(Eigen::Index d, RngStream& rng) {
  const Mat q = random_orthogonal(d, rng);
  Vec lambda(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    lambda(i) = std::exp(std::log(0.25) + (std::log(4.0) - std::log(0.25)) * rng.uniform());
  }
  Mat s = q * lambda.asDiagonal() * q.transpose();
  return 0.5 * (s + s.transpose());
}

/// U diag(s) V^T with singular values evenly spaced in [1, 2].
inline Mat random_condition2(Eigen::Index d, RngStream& rng) {
  const Mat u = random_orthogonal(d, rng);
  const Mat v = random_orthogonal(d, rng);
  Vec s(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    s(i) = d == 1 ? 2.0 : 2.0 - static_cast<double>(i) / static_cast<double>(d - 1);
  }
  return u * s.asDiagonal() * v.transpose();
}

class InverseProblem {
 public:
  static InverseProblem gaussian(int dim, double sigma, std::uint64_t seed) {
    if (dim < 1) throw ConfigError("gaussian problem: dim must be >= 1");
    RngStream rng = RngStream(seed).split(0x5350445ULL);
    return gaussian_with_cov(random_spd(dim, rng), sigma, seed);
  }

  static InverseProblem gaussian_with_cov(const Mat& prior_cov, double sigma, std::uint64_t seed = 0) {
    InverseProblem p(ProblemKind::Gaussian, static_cast<int>(prior_cov.rows()), sigma, seed);
    if (prior_cov.rows() != prior_cov.cols()) throw StructuralError("prior covariance must be square");
    if ((prior_cov - prior_cov.transpose()).cwiseAbs().maxCoeff() > 1e-12) {
      throw NumericError("prior covariance is not symmetric");
    }
    Eigen::LLT<Mat> llt(prior_cov);
    if (llt.info() != Eigen::Success) throw NumericError("prior covariance is not positive definite");
    p.prior_cov_ = prior_cov;
    p.prior_precision_ = llt.solve(Mat::Identity(prior_cov.rows(), prior_cov.cols()));
    p.prior_precision_ = 0.5 * (p.prior_precision_ + p.prior_precision_.transpose()).eval();
    return p;
  }

  static InverseProblem rosenbrock(RosenbrockParams params, double sigma, std::uint64_t seed) {
    if (!(params.a > 0.0) || !(params.b > 0.0)) throw ConfigError("rosenbrock: a and b must be > 0");
    InverseProblem p(ProblemKind::Rosenbrock, 2, sigma, seed);
    p.rosenbrock_ = params;
    return p;
  }

  static InverseProblem nonlinear(int dim, double sigma, std::uint64_t seed) {
    if (dim < 1) throw ConfigError("nonlinear problem: dim must be >= 1");
    RngStream rng = RngStream(seed).split(0x4E4C41ULL);
    return nonlinear_with_matrix(random_condition2(dim, rng), sigma, seed);
  }

  static InverseProblem nonlinear_with_matrix(const Mat& a, double sigma, std::uint64_t seed = 0) {
    if (a.rows() != a.cols()) throw StructuralError("nonlinear problem: A must be square");
    InverseProblem p(ProblemKind::Nonlinear, static_cast<int>(a.rows()), sigma, seed);
    p.forward_matrix_ = a;
    return p;
  }

  ProblemKind kind() const noexcept { return kind_; }
  int dim() const noexcept { return dim_; }
  int obs_dim() const noexcept { return dim_; }
  double sigma() const noexcept { return sigma_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const Mat& prior_cov() const { return prior_cov_; }
  const Mat& prior_precision() const { return prior_precision_; }
  const RosenbrockParams& rosenbrock_params() const noexcept { return rosenbrock_; }
  const Mat& forward_matrix() const { return forward_matrix_; }

  /// MALA settings for non-Gaussian prior and posterior draws.
  MalaConfig& mala() noexcept { return mala_; }
  const MalaConfig& mala() const noexcept { return mala_; }

  // --- forward model -------------------------------------------------------

  Vec forward(const Vec& x) const {
    check_x(x);
    if (kind_ == ProblemKind::Nonlinear) {
      return forward_matrix_ * x + x.array().sin().matrix();
    }
    return x;
  }

  /// Jacobian of F at x.
  Mat forward_jacobian(const Vec& x) const {
    check_x(x);
    if (kind_ == ProblemKind::Nonlinear) {
      Mat j = forward_matrix_;
      j.diagonal() += x.array().cos().matrix();
      return j;
    }
    return Mat::Identity(dim_, dim_);
  }

  // --- densities and scores ------------------------------------------------

  /// Unnormalised log prior density.
  double prior_log_density(const Vec& x) const {
    check_x(x);
    switch (kind_) {
      case ProblemKind::Gaussian: return -0.5 * x.dot(prior_precision_ * x);
      case ProblemKind::Rosenbrock: {
        const auto& r = rosenbrock_;
        const double u = x(0) - r.mu;
        const double v = x(1) - x(0) * x(0);
        return -r.a * u * u - r.b * v * v;
      }
      case ProblemKind::Nonlinear: return -0.5 * x.squaredNorm();
    }
    return 0.0;
  }

  Vec prior_log_density_grad(const Vec& x) const {
    check_x(x);
    switch (kind_) {
      case ProblemKind::Gaussian: return -(prior_precision_ * x);
      case ProblemKind::Rosenbrock: {
        const auto& r = rosenbrock_;
        const double v = x(1) - x(0) * x(0);
        Vec g(2);
        g(0) = -2.0 * r.a * (x(0) - r.mu) + 4.0 * r.b * x(0) * v;
        g(1) = -2.0 * r.b * v;
        return g;
      }
      case ProblemKind::Nonlinear: return -x;
    }
    return x;
  }

  /// log N(y; F(x), sigma^2 I) up to an x-independent constant.
  double likelihood_log_density(const Vec& x, const Vec& y) const {
    check_y(y);
    return -(y - forward(x)).squaredNorm() / (2.0 * sigma_ * sigma_);
  }

  Vec likelihood_log_density_grad(const Vec& x, const Vec& y) const {
    check_y(y);
    const Vec residual = y - forward(x);
    if (kind_ == ProblemKind::Nonlinear) {
      return forward_jacobian(x).transpose() * residual / (sigma_ * sigma_);
    }
    return residual / (sigma_ * sigma_);
  }

  double posterior_log_density(const Vec& x, const Vec& y) const {
    return prior_log_density(x) + likelihood_log_density(x, y);
  }

  Vec posterior_score(const Vec& x, const Vec& y) const {
    return prior_log_density_grad(x) + likelihood_log_density_grad(x, y);
  }

  /// Column-wise posterior scores for samples X (d x n) under one observation y.
  Mat posterior_scores(const Mat& xs, const Vec& y) const {
    Mat out(xs.rows(), xs.cols());
    for (Eigen::Index j = 0; j < xs.cols(); ++j) out.col(j) = posterior_score(xs.col(j), y);
    return out;
  }

  // --- Gaussian closed form -----------------------------------------------

  struct GaussianPosterior {
    Vec mean;
    Mat cov;
  };

  GaussianPosterior gaussian_posterior_moments(const Vec& y) const {
    if (kind_ != ProblemKind::Gaussian) {
      throw StructuralError("gaussian_posterior_moments: unsupported for " +
                            std::string(to_string(kind_)) + " problems");
    }
    check_y(y);
    const double inv_s2 = 1.0 / (sigma_ * sigma_);
    Mat post_prec = prior_precision_;
    post_prec.diagonal().array() += inv_s2;
    Mat cov = post_prec.llt().solve(Mat::Identity(dim_, dim_));
    cov = 0.5 * (cov + cov.transpose()).eval();
    Vec mean = inv_s2 * cov * y;
    return {std::move(mean), std::move(cov)};
  }

  // --- sampling ------------------------------------------------------------

  /// n prior draws as columns. Rosenbrock uses one thinned MALA chain.
  Mat sample_prior(Eigen::Index n, RngStream& rng) const {
    switch (kind_) {
      case ProblemKind::Gaussian:
        return GaussianSampler(Vec::Zero(dim_), prior_cov_).sample(n, rng);
      case ProblemKind::Nonlinear: {
        Mat out(dim_, n);
        for (Eigen::Index j = 0; j < n; ++j)
          for (Eigen::Index i = 0; i < dim_; ++i) out(i, j) = rng.normal();
        return out;
      }
      case ProblemKind::Rosenbrock: {
        Vec x0(2);
        x0 << rosenbrock_.mu, rosenbrock_.mu * rosenbrock_.mu;
        auto chain = mala_chain([this](const Vec& x) { return prior_log_density_grad(x); },
                                [this](const Vec& x) { return prior_log_density(x); }, x0,
                                static_cast<int>(n), mala_, rng);
        Mat out(2, n);
        for (Eigen::Index j = 0; j < n; ++j) out.col(j) = chain.draws[static_cast<std::size_t>(j)];
        return out;
      }
    }
    return {};
  }

  Vec add_noise(const Vec& fx, RngStream& rng) const {
    Vec y = fx;
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) += sigma_ * rng.normal();
    return y;
  }

  /// One joint draw (x ~ prior, y = F(x) + eps).
  std::pair<Vec, Vec> simulate_pair(RngStream& rng) const {
    Vec x = sample_prior(1, rng).col(0);
    Vec y = add_noise(forward(x), rng);
    return {std::move(x), std::move(y)};
  }

  /// n posterior draws for observation y: exact for Gaussian, MALA otherwise.
  Mat sample_posterior(const Vec& y, Eigen::Index n, RngStream& rng,
                       double* acceptance_rate = nullptr) const {
    check_y(y);
    if (kind_ == ProblemKind::Gaussian) {
      const auto post = gaussian_posterior_moments(y);
      if (acceptance_rate) *acceptance_rate = 1.0;
      return GaussianSampler(post.mean, post.cov).sample(n, rng);
    }
    Vec x0 = kind_ == ProblemKind::Rosenbrock ? y : Vec(Vec::Zero(dim_));
    MalaConfig cfg = mala_;
    cfg.step_size = std::min(cfg.step_size, sigma_);
    auto chain = mala_chain([&](const Vec& x) { return posterior_score(x, y); },
                            [&](const Vec& x) { return posterior_log_density(x, y); }, x0,
                            static_cast<int>(n), cfg, rng);
    if (acceptance_rate) *acceptance_rate = chain.acceptance_rate;
    Mat out(dim_, n);
    for (Eigen::Index j = 0; j < n; ++j) out.col(j) = chain.draws[static_cast<std::size_t>(j)];
    return out;
  }

 private:
  InverseProblem(ProblemKind kind, int dim, double sigma, std::uint64_t seed)
      : kind_(kind), dim_(dim), sigma_(sigma), seed_(seed) {
    if (!(sigma > 0.0)) throw ConfigError("noise sigma must be > 0");
    mala_.step_size = 0.5;
  }

  void check_x(const Vec& x) const {
    require_dims(static_cast<std::size_t>(x.size()), static_cast<std::size_t>(dim_), "x");
  }
  void check_y(const Vec& y) const {
    require_dims(static_cast<std::size_t>(y.size()), static_cast<std::size_t>(dim_), "y");
  }

  ProblemKind kind_;
  int dim_;
  double sigma_;
  std::uint64_t seed_;
  Mat prior_cov_;
  Mat prior_precision_;
  RosenbrockParams rosenbrock_;
  Mat forward_matrix_;
  MalaConfig mala_;
};

// --- quantities of interest ------------------------------------------------

enum class QoiKind { Mean, Variance };

inline std::string_view to_string(QoiKind k) { return k == QoiKind::Mean ? "mean" : "variance"; }

inline QoiKind qoi_kind_from_string(std::string_view s) {
  if (s == "mean") return QoiKind::Mean;
  if (s == "variance") return QoiKind::Variance;
  throw ConfigError("unknown qoi kind '" + std::string(s) + "'");
}

/// h(x) = x (mean) or h(x) = (x - center)^2 elementwise (variance).
struct Qoi {
  QoiKind kind = QoiKind::Mean;
  std::optional<Vec> center;

  static Qoi mean() { return {}; }
  static Qoi variance(Vec c) { return {QoiKind::Variance, std::move(c)}; }

  Vec eval(const Vec& x) const {
    if (kind == QoiKind::Mean) return x;
    if (!center) throw StructuralError("variance qoi requires a center");
    require_dims(static_cast<std::size_t>(center->size()), static_cast<std::size_t>(x.size()), "qoi");
    return (x - *center).array().square().matrix();
  }

  /// Column-wise evaluation on a d x n sample matrix.
  Mat eval_batch(const Mat& xs) const {
    if (kind == QoiKind::Mean) return xs;
    if (!center) throw StructuralError("variance qoi requires a center");
    require_dims(static_cast<std::size_t>(center->size()), static_cast<std::size_t>(xs.rows()), "qoi");
    return (xs.colwise() - *center).array().square().matrix();
  }
};

}  // namespace cncv
