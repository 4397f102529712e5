#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"

using namespace cncv;

namespace {

Vec v2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

void expect_score_matches_fd(const std::function<double(const Vec&)>& logp, const std::function<Vec(const Vec&)>& score,
                             const Vec& x) {
  const Vec g = score(x);
  const Mat fd = fixtures::fd_jacobian([&](const Vec& z) { return Vec::Constant(1, logp(z)); }, x);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double ref = fd(0, i);
    if (std::abs(ref) < 1e-3) {
      EXPECT_NEAR(g(i), ref, 1e-7);
    } else {
      EXPECT_LT(std::abs(g(i) - ref) / std::abs(ref), 1e-6) << "component " << i;
    }
  }
}

}  // namespace

TEST(Forward, Examples) {
  const auto g = InverseProblem::gaussian(2, 0.3, 1);
  EXPECT_EQ(g.forward(v2(1, 2)), v2(1, 2));
  const auto nl = InverseProblem::nonlinear(3, 0.3, 1);
  EXPECT_EQ(nl.forward(Vec::Zero(3)), Vec::Zero(3));
  const auto nli = InverseProblem::nonlinear_with_matrix(Mat::Identity(2, 2), 0.3);
  const double h = std::numbers::pi / 2;
  EXPECT_NEAR((nli.forward(v2(h, h)) - v2(h + 1, h + 1)).norm(), 0.0, 1e-15);
  EXPECT_THROW(g.forward(Vec::Zero(3)), StructuralError);
}

TEST(Forward, NonlinearJacobianMatchesFd) {
  const auto nl = InverseProblem::nonlinear(4, 0.3, 5);
  RngStream r(1);
  const Vec x = fixtures::random_vec(4, r);
  const Mat fd = fixtures::fd_jacobian([&](const Vec& z) { return nl.forward(z); }, x);
  EXPECT_LT((nl.forward_jacobian(x) - fd).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(SimulatePair, SmallSigmaLimit) {
  const auto p = InverseProblem::nonlinear(3, 1e-12, 3);
  RngStream r(2);
  const auto [x, y] = p.simulate_pair(r);
  EXPECT_LT((y - p.forward(x)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SimulatePair, GaussianIdentityPriorMoments) {
  const auto p = InverseProblem::gaussian_with_cov(Mat::Identity(2, 2), 0.3);
  RngStream r(3);
  const int n = 100000;
  Mat xs(2, n);
  for (int i = 0; i < n; ++i) xs.col(i) = p.simulate_pair(r).first;
  const Vec m = xs.rowwise().mean();
  const Mat c = (xs.colwise() - m) * (xs.colwise() - m).transpose() / (n - 1);
  EXPECT_LT((c - Mat::Identity(2, 2)).cwiseAbs().maxCoeff(), 0.02);
}

TEST(SimulatePair, Deterministic) {
  const auto p = InverseProblem::gaussian(3, 0.3, 1);
  RngStream a(9), b(9);
  EXPECT_EQ(p.simulate_pair(a).second, p.simulate_pair(b).second);
}

TEST(SimulatePair, RosenbrockPriorMarginals) {
  // x1 ~ N(mu, 1/(2a)); x2 | x1 ~ N(x1^2, 1/(2b)) so E[x2] = mu^2 + 1/(2a).
  const auto p = InverseProblem::rosenbrock(RosenbrockParams{}, 0.3, 1);
  RngStream r(4);
  const Mat xs = p.sample_prior(100000, r);
  const double m1 = xs.row(0).mean(), m2 = xs.row(1).mean();
  const double sd1 = std::sqrt((xs.row(0).array() - m1).square().mean());
  // thinned MALA draws are mildly correlated: allow a 3-SE band with an
  // effective sample size of n / 10
  const double se1 = sd1 / std::sqrt(100000.0 / 10.0);
  EXPECT_NEAR(m1, 0.0, 3.0 * se1);
  EXPECT_NEAR(sd1 * sd1, 1.0, 0.05);
  EXPECT_NEAR(m2, 1.0, 0.05);
}

TEST(PriorScore, Examples) {
  const auto rb = InverseProblem::rosenbrock(RosenbrockParams{}, 0.3, 1);
  EXPECT_EQ(rb.prior_log_density_grad(v2(0, 0)), v2(0, 0));
  EXPECT_EQ(rb.prior_log_density_grad(v2(1, 1)), v2(-1, 0));
  const auto g = InverseProblem::gaussian_with_cov(Mat::Identity(2, 2), 0.3);
  EXPECT_EQ(g.prior_log_density_grad(v2(2, 0)), v2(-2, 0));
  const auto nl = InverseProblem::nonlinear(2, 0.3, 1);
  EXPECT_EQ(nl.prior_log_density_grad(v2(0.5, -1)), v2(-0.5, 1));
}

TEST(LikelihoodScore, Examples) {
  const auto g = InverseProblem::gaussian_with_cov(Mat::Identity(2, 2), 1.0);
  EXPECT_EQ(g.likelihood_log_density_grad(v2(0, 0), v2(1, 0)), v2(1, 0));
  RngStream r(1);
  for (auto p : {InverseProblem::gaussian(3, 0.3, 1), InverseProblem::nonlinear(3, 0.3, 1)}) {
    const Vec x = fixtures::random_vec(3, r);
    EXPECT_LT(p.likelihood_log_density_grad(x, p.forward(x)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Scores, MatchFiniteDifferences) {
  RngStream r(17);
  std::vector<InverseProblem> problems{InverseProblem::gaussian(4, 0.3, 2),
                                       InverseProblem::rosenbrock(RosenbrockParams{0.3, 0.5, 1.0}, 0.3, 2),
                                       InverseProblem::nonlinear(4, 0.3, 2)};
  for (const auto& p : problems) {
    for (int trial = 0; trial < 20; ++trial) {
      const Vec x = 0.8 * fixtures::random_vec(p.dim(), r);
      const Vec y = fixtures::random_vec(p.dim(), r);
      expect_score_matches_fd([&](const Vec& z) { return p.prior_log_density(z); },
                              [&](const Vec& z) { return p.prior_log_density_grad(z); }, x);
      expect_score_matches_fd([&](const Vec& z) { return p.likelihood_log_density(z, y); },
                              [&](const Vec& z) { return p.likelihood_log_density_grad(z, y); }, x);
      expect_score_matches_fd([&](const Vec& z) { return p.posterior_log_density(z, y); },
                              [&](const Vec& z) { return p.posterior_score(z, y); }, x);
    }
  }
}

TEST(Scores, PosteriorIsSumOfParts) {
  RngStream r(5);
  for (auto p : {InverseProblem::gaussian(3, 0.3, 1), InverseProblem::nonlinear(3, 0.3, 1)}) {
    for (int i = 0; i < 20; ++i) {
      const Vec x = fixtures::random_vec(3, r), y = fixtures::random_vec(3, r);
      EXPECT_EQ(p.posterior_score(x, y), p.prior_log_density_grad(x) + p.likelihood_log_density_grad(x, y));
    }
  }
}

TEST(Scores, GaussianClosedForm) {
  const auto p = InverseProblem::gaussian(5, 0.3, 8);
  RngStream r(6);
  for (int i = 0; i < 100; ++i) {
    const Vec x = fixtures::random_vec(5, r), y = fixtures::random_vec(5, r);
    const auto post = p.gaussian_posterior_moments(y);
    const Vec closed = -post.cov.llt().solve(x - post.mean);
    EXPECT_LT((p.posterior_score(x, y) - closed).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Scores, GaussianPosteriorMeanIsStationary) {
  const auto p = InverseProblem::gaussian_with_cov(Mat::Identity(2, 2), 1.0);
  EXPECT_LT(p.posterior_score(v2(1, 0), v2(2, 0)).norm(), 1e-15);
}

TEST(Scores, BatchedMatchesSingle) {
  const auto p = InverseProblem::nonlinear(3, 0.3, 4);
  RngStream r(7);
  const Mat xs = fixtures::random_mat(3, 5, r);
  const Vec y = fixtures::random_vec(3, r);
  const Mat s = p.posterior_scores(xs, y);
  for (int j = 0; j < 5; ++j) EXPECT_LT((s.col(j) - p.posterior_score(xs.col(j), y)).norm(), 1e-14);
}

TEST(PosteriorMoments, Examples) {
  const auto p = InverseProblem::gaussian_with_cov(Mat::Identity(2, 2), 1.0);
  const auto post = p.gaussian_posterior_moments(v2(2, 0));
  EXPECT_LT((post.mean - v2(1, 0)).norm(), 1e-15);
  EXPECT_LT((post.cov - 0.5 * Mat::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(p.gaussian_posterior_moments(Vec::Zero(2)).mean, Vec::Zero(2));
  EXPECT_THROW(InverseProblem::nonlinear(2, 0.3, 1).gaussian_posterior_moments(Vec::Zero(2)), StructuralError);
}

TEST(PosteriorMoments, MatchExactDraws) {
  const auto p = InverseProblem::gaussian(3, 0.3, 3);
  RngStream ry(2);
  const Vec y = fixtures::random_vec(3, ry);
  const auto post = p.gaussian_posterior_moments(y);
  RngStream r(12);
  const int n = 1000000;
  const Mat xs = p.sample_posterior(y, n, r);
  const Vec m = xs.rowwise().mean();
  const Mat c = (xs.colwise() - m) * (xs.colwise() - m).transpose() / (n - 1);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double se = std::sqrt((post.cov(i, i) * post.cov(j, j) + post.cov(i, j) * post.cov(i, j)) / n);
      EXPECT_NEAR(c(i, j), post.cov(i, j), 3.0 * se);
    }
}

TEST(ProblemConstruction, RandomSpdSpectrum) {
  RngStream r(1);
  const Mat s = random_spd(8, r);
  EXPECT_LT((s - s.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  Eigen::SelfAdjointEigenSolver<Mat> es(s);
  EXPECT_GE(es.eigenvalues().minCoeff(), 0.25 - 1e-12);
  EXPECT_LE(es.eigenvalues().maxCoeff(), 4.0 + 1e-12);
}

TEST(ProblemConstruction, ConditionNumberTwo) {
  for (int d : {1, 2, 4, 9}) {
    const auto p = InverseProblem::nonlinear(d, 0.3, static_cast<std::uint64_t>(d));
    Eigen::JacobiSVD<Mat> svd(p.forward_matrix());
    const Vec sv = svd.singularValues();
    const double cond = sv.maxCoeff() / sv.minCoeff();
    if (d == 1) {
      EXPECT_NEAR(cond, 1.0, 1e-12);
    } else {
      EXPECT_NEAR(cond, 2.0, 1e-6);
    }
  }
}

TEST(ProblemConstruction, Validation) {
  EXPECT_THROW(InverseProblem::gaussian(2, 0.0, 1), ConfigError);
  EXPECT_THROW(InverseProblem::rosenbrock(RosenbrockParams{0, -1, 1}, 0.3, 1), ConfigError);
  Mat asym(2, 2);
  asym << 1, 0.5, 0.4, 1;
  EXPECT_THROW(InverseProblem::gaussian_with_cov(asym, 0.3), NumericError);
  Mat indef(2, 2);
  indef << 1, 2, 2, 1;
  EXPECT_THROW(InverseProblem::gaussian_with_cov(indef, 0.3), NumericError);
}

TEST(ProblemConstruction, SameSeedSameInstance) {
  EXPECT_EQ(InverseProblem::gaussian(4, 0.3, 12).prior_cov(), InverseProblem::gaussian(4, 0.3, 12).prior_cov());
  EXPECT_NE(InverseProblem::gaussian(4, 0.3, 12).prior_cov(), InverseProblem::gaussian(4, 0.3, 13).prior_cov());
}

TEST(Mala, RosenbrockPosteriorAcceptance) {
  const auto p = InverseProblem::rosenbrock(RosenbrockParams{}, 0.3, 1);
  RngStream r(2);
  for (int i = 0; i < 5; ++i) {
    const Vec y = p.simulate_pair(r).second;
    double acc = 0;
    p.sample_posterior(y, 2000, r, &acc);
    EXPECT_GE(acc, 0.4);
    EXPECT_LE(acc, 0.75);
  }
}

TEST(Qoi, Examples) {
  EXPECT_EQ(Qoi::mean().eval(v2(3, -1)), v2(3, -1));
  EXPECT_EQ(Qoi::variance(Vec::Zero(2)).eval(v2(2, 0)), v2(4, 0));
  EXPECT_EQ(Qoi::variance(v2(1, 2)).eval(v2(1, 2)), Vec::Zero(2));
  Qoi missing;
  missing.kind = QoiKind::Variance;
  EXPECT_THROW(missing.eval(v2(1, 1)), StructuralError);
}

TEST(Qoi, BatchMatchesSingle) {
  RngStream r(1);
  const Mat xs = fixtures::random_mat(3, 4, r);
  const Qoi q = Qoi::variance(fixtures::random_vec(3, r));
  const Mat h = q.eval_batch(xs);
  for (int j = 0; j < 4; ++j) EXPECT_EQ(h.col(j), q.eval(xs.col(j)));
}
