#pragma once

// Differentiable backends for the generic tree forward pass in model.hpp.

#include <Eigen/Dense>
#include <cstddef>
#include <vector>

#include "cncv/ad/param_store.hpp"
#include "cncv/ad/tape.hpp"
#include "cncv/ad/tensor_tape.hpp"
#include "cncv/model.hpp"

namespace cncv {

/// Column-major matrix of scalar tape variables.
struct VarMatrix {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::vector<ad::Var> data;

  VarMatrix() = default;
  VarMatrix(Eigen::Index r, Eigen::Index c) : rows(r), cols(c), data(static_cast<std::size_t>(r * c)) {}

  ad::Var& operator()(Eigen::Index i, Eigen::Index j) { return data[static_cast<std::size_t>(i + j * rows)]; }
  const ad::Var& operator()(Eigen::Index i, Eigen::Index j) const {
    return data[static_cast<std::size_t>(i + j * rows)];
  }

  Mat values() const {
    Mat m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = (*this)(i, j).value;
    return m;
  }
};

/// Scalar-tape backend: every parameter of one member is a tape leaf.
class ScalarTapeBackend {
 public:
  using Matrix = VarMatrix;
  using Scalar = ad::Var;

  ScalarTapeBackend(ad::Tape& tape, const HintTree& tree, const ad::ParamStore& params)
      : tape_(tape), tree_(tree), params_(params), leaves_(tape.register_params(params)) {
    require_dims(params.size(), tree.num_params(), "ScalarTapeBackend parameters");
  }

  const std::vector<ad::Var>& leaves() const noexcept { return leaves_; }

  Matrix linear(const LinearLayer& layer, const Matrix& x) const {
    const auto& ws = params_.slice(layer.weight_slice);
    const auto& bs = params_.slice(layer.bias_slice);
    Matrix out(layer.out, x.cols);
    std::vector<ad::Var> row(static_cast<std::size_t>(layer.in));
    std::vector<ad::Var> col(static_cast<std::size_t>(layer.in));
    for (int i = 0; i < layer.out; ++i) {
      for (int k = 0; k < layer.in; ++k) {
        row[static_cast<std::size_t>(k)] =
            leaves_[ws.offset + static_cast<std::size_t>(i + k * layer.out)];
      }
      for (Eigen::Index j = 0; j < x.cols; ++j) {
        for (int k = 0; k < layer.in; ++k) col[static_cast<std::size_t>(k)] = x(k, j);
        out(i, j) = ad::dot(row, col) + leaves_[bs.offset + static_cast<std::size_t>(i)];
      }
    }
    return out;
  }

  template <class F>
  static Matrix map(const Matrix& a, F f) {
    Matrix out(a.rows, a.cols);
    for (std::size_t k = 0; k < a.data.size(); ++k) out.data[k] = f(a.data[k]);
    return out;
  }
  template <class F>
  static Matrix zip(const Matrix& a, const Matrix& b, F f) {
    if (a.rows != b.rows || a.cols != b.cols) throw StructuralError("VarMatrix: shape mismatch");
    Matrix out(a.rows, a.cols);
    for (std::size_t k = 0; k < a.data.size(); ++k) out.data[k] = f(a.data[k], b.data[k]);
    return out;
  }

  static Matrix tanh(const Matrix& a) { return map(a, [](const ad::Var& v) { return ad::tanh(v); }); }
  static Matrix add(const Matrix& a, const Matrix& b) {
    return zip(a, b, [](const ad::Var& u, const ad::Var& v) { return u + v; });
  }
  static Matrix sub(const Matrix& a, const Matrix& b) {
    return zip(a, b, [](const ad::Var& u, const ad::Var& v) { return u - v; });
  }
  static Matrix mul(const Matrix& a, const Matrix& b) {
    return zip(a, b, [](const ad::Var& u, const ad::Var& v) { return u * v; });
  }
  static Matrix scale(const Matrix& a, double c) {
    return map(a, [c](const ad::Var& v) { return ad::scale(v, c); });
  }
  static Matrix rows(const Matrix& x, Eigen::Index off, Eigen::Index n) {
    Matrix out(n, x.cols);
    for (Eigen::Index j = 0; j < x.cols; ++j)
      for (Eigen::Index i = 0; i < n; ++i) out(i, j) = x(off + i, j);
    return out;
  }
  static Matrix vcat(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows + b.rows, a.cols);
    for (Eigen::Index j = 0; j < a.cols; ++j) {
      for (Eigen::Index i = 0; i < a.rows; ++i) out(i, j) = a(i, j);
      for (Eigen::Index i = 0; i < b.rows; ++i) out(a.rows + i, j) = b(i, j);
    }
    return out;
  }
  static Matrix permute_rows(const Matrix& x, const std::vector<std::size_t>& perm) {
    Matrix out(x.rows, x.cols);
    for (Eigen::Index j = 0; j < x.cols; ++j)
      for (std::size_t i = 0; i < perm.size(); ++i)
        out(static_cast<Eigen::Index>(i), j) = x(static_cast<Eigen::Index>(perm[i]), j);
    return out;
  }
  static Matrix ones(Eigen::Index r, Eigen::Index c) {
    Matrix out(r, c);
    for (auto& v : out.data) v = ad::Var(1.0);
    return out;
  }
  static Matrix constant(const Mat& m) {
    Matrix out(m.rows(), m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) out(i, j) = ad::Var(m(i, j));
    return out;
  }
  /// c * sum of squares, recorded as square nodes and one sum node.
  static Scalar sum_squares(const Matrix& a, double c) {
    std::vector<ad::Var> sq;
    sq.reserve(a.data.size());
    for (const auto& v : a.data) sq.push_back(ad::square(v));
    return ad::scale(ad::sum(sq), c);
  }
  static Eigen::Index num_rows(const Matrix& m) { return m.rows; }
  static Eigen::Index num_cols(const Matrix& m) { return m.cols; }
  static bool all_finite(const Matrix& m) {
    for (const auto& v : m.data)
      if (!std::isfinite(v.value)) return false;
    return true;
  }

  /// Gradient of `loss` with respect to this member's parameters (flat order).
  std::vector<double> gradient(const ad::Var& loss) const { return tape_.gradient(loss, leaves_); }

 private:
  ad::Tape& tape_;
  const HintTree& tree_;
  const ad::ParamStore& params_;
  std::vector<ad::Var> leaves_;
};

/// Batched-tape backend: one leaf matrix per weight/bias slice.
class TensorTapeBackend {
 public:
  using Matrix = ad::TVar;
  using Scalar = ad::TVar;

  TensorTapeBackend(ad::TensorTape& tape, const HintTree& tree, const ad::ParamStore& params)
      : tape_(&tape), tree_(&tree), params_(&params) {
    require_dims(params.size(), tree.num_params(), "TensorTapeBackend parameters");
    weights_.reserve(tree.layers().size());
    biases_.reserve(tree.layers().size());
    for (const auto& layer : tree.layers()) {
      const auto w = params.view(layer.weight_slice);
      const auto b = params.view(layer.bias_slice);
      weights_.push_back(tape.leaf(Eigen::Map<const Mat>(w.data(), layer.out, layer.in)));
      biases_.push_back(tape.leaf(Eigen::Map<const Mat>(b.data(), layer.out, 1)));
    }
  }

  Matrix linear(const LinearLayer& layer, const Matrix& x) const {
    const auto k = static_cast<std::size_t>(&layer - tree_->layers().data());
    return tape_->affine(weights_[k], x, biases_[k]);
  }
  Matrix tanh(const Matrix& a) const { return tape_->tanh(a); }
  Matrix add(const Matrix& a, const Matrix& b) const { return tape_->add(a, b); }
  Matrix sub(const Matrix& a, const Matrix& b) const { return tape_->sub(a, b); }
  Matrix mul(const Matrix& a, const Matrix& b) const { return tape_->mul(a, b); }
  Matrix scale(const Matrix& a, double c) const { return tape_->scale(a, c); }
  Matrix rows(const Matrix& x, Eigen::Index off, Eigen::Index n) const { return tape_->rows(x, off, n); }
  Matrix vcat(const Matrix& a, const Matrix& b) const { return tape_->vcat(a, b); }
  Matrix permute_rows(const Matrix& x, const std::vector<std::size_t>& perm) const {
    return tape_->permute_rows(x, perm);
  }
  Matrix ones(Eigen::Index r, Eigen::Index c) const { return tape_->constant(Mat::Ones(r, c)); }
  Matrix constant(const Mat& m) const { return tape_->constant(m); }
  Scalar sum_squares(const Matrix& a, double c) const { return tape_->sum_squares(a, c); }
  static Eigen::Index num_rows(const Matrix& m) { return m.rows(); }
  static Eigen::Index num_cols(const Matrix& m) { return m.cols(); }
  static bool all_finite(const Matrix& m) { return m.value().allFinite(); }

  /// Accumulated gradient (after tape.backward) in this member's flat order.
  std::vector<double> gradient() const {
    std::vector<double> g(params_->size(), 0.0);
    for (std::size_t k = 0; k < tree_->layers().size(); ++k) {
      const auto& layer = tree_->layers()[k];
      copy_grad(weights_[k], params_->slice(layer.weight_slice), g);
      copy_grad(biases_[k], params_->slice(layer.bias_slice), g);
    }
    return g;
  }

 private:
  void copy_grad(const ad::TVar& v, const ad::ParamSlice& s, std::vector<double>& g) const {
    const Mat& gm = tape_->grad(v.index);
    if (gm.size() == 0) return;
    for (std::size_t i = 0; i < s.length; ++i) g[s.offset + i] = gm.data()[i];
  }

  ad::TensorTape* tape_;
  const HintTree* tree_;
  const ad::ParamStore* params_;
  std::vector<ad::TVar> weights_;
  std::vector<ad::TVar> biases_;
};

}  // namespace cncv
