#pragma once

#include <functional>

#include "cncv/cncv.hpp"

namespace cncv::fixtures {

/// Parameters with every entry drawn from N(0, sd^2), so no node is the identity.
inline ad::ParamStore random_params(const HintTree& tree, RngStream& rng, double sd = 0.5) {
  ad::ParamStore p = tree.layout();
  std::vector<double> v(p.size());
  for (double& x : v) x = sd * rng.normal();
  p.assign(v);
  return p;
}

inline CvEnsemble random_ensemble(const ModelShape& shape, int l, std::uint64_t seed, double sd = 0.3) {
  RngStream rng(seed);
  CvEnsemble ens = ensemble_init(shape, l, rng);
  for (auto& m : ens.members) m.params = random_params(*ens.tree, rng, sd);
  return ens;
}

inline Vec random_vec(Eigen::Index n, RngStream& rng) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

inline Mat random_mat(Eigen::Index r, Eigen::Index c, RngStream& rng) {
  Mat m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.normal();
  return m;
}

/// Central-difference Jacobian of f at x.
inline Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x, double h = 1e-5) {
  const Vec f0 = f(x);
  Mat j(f0.size(), x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    Vec xp = x, xm = x;
    xp(k) += h;
    xm(k) -= h;
    j.col(k) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return j;
}

/// Central-difference gradient of a scalar function of a flat vector.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double x0 = x[k];
    x[k] = x0 + h;
    const double fp = f(x);
    x[k] = x0 - h;
    const double fm = f(x);
    x[k] = x0;
    g[k] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace cncv::fixtures
