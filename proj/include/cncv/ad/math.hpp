#pragma once

#include <Eigen/Dense>

namespace cncv::ad {

/// Elementwise tanh through the vectorised exp: 1 - 2 / (exp(2x) + 1).
/// Absolute error stays at the 1e-16 level and it is several times faster
/// than the scalar libm tanh that Eigen falls back to for doubles.
template <class Derived>
Eigen::MatrixXd tanh_elementwise(const Eigen::MatrixBase<Derived>& x) {
  return (1.0 - 2.0 / ((2.0 * x.array()).exp() + 1.0)).matrix();
}

}  // namespace cncv::ad
