#pragma once

// Learnable Stein control variate built from hierarchical affine-coupling trees.
//
// A tree maps x in R^d to phi(x, y) in R^d. At each coupling node the input is
// split into an upper block (first floor(d/2) entries) and a lower block:
//
//   u     = upper_subtree(x_upper)
//   z     = s(u, y) * x_lower + t(u, y)
//   phi   = [u ; lower_subtree(z)]
//   diag  = [diag_upper ; s * diag_lower]
//
// Leaves (depth exhausted or d <= 1) are the identity with diag = 1. The
// Jacobian of phi is lower triangular, so diag is its exact diagonal and
// sum(diag) its exact divergence. For a member with permutation P the control
// variate is g_j = diag_j + phi_j * score_j, evaluated on P x and mapped back.
//
// The forward pass is written once against a Backend concept so the same code
// runs on plain matrices (evaluation), on the scalar tape, and on the batched
// tensor tape (training). Matrices are feature-by-batch.

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cncv/ad/math.hpp"
#include "cncv/ad/param_store.hpp"
#include "cncv/errors.hpp"
#include "cncv/rng.hpp"

namespace cncv {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct ModelShape {
  int dim = 1;            // d
  int cond_dim = 1;       // m
  int depth = 2;          // coupling levels per tree
  int hidden_units = 64;  // width of hidden layers
  int mlp_layers = 3;     // linear layers per network (>= 1)

  void validate() const {
    if (dim < 1) throw ConfigError("model: dim must be >= 1");
    if (cond_dim < 0) throw ConfigError("model: cond_dim must be >= 0");
    if (depth < 1) throw ConfigError("model: depth must be >= 1");
    if (hidden_units < 1) throw ConfigError("model: hidden_units must be >= 1");
    if (mlp_layers < 1) throw ConfigError("model: mlp_layers must be >= 1");
  }

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Dense layer y = W x + b; W is stored column-major (out x in).
struct LinearLayer {
  int in = 0;
  int out = 0;
  std::size_t weight_slice = 0;
  std::size_t bias_slice = 0;
};

/// Indices into HintTree::layers; tanh between layers, linear output.
struct Mlp {
  std::vector<std::size_t> layers;
};

struct CouplingNode {
  int dim = 0;
  int d_upper = 0;
  int d_lower = 0;
  Mlp scale;
  Mlp shift;
  int upper = -1;  // child node index, -1 for an identity leaf
  int lower = -1;
  std::string path;
};

/// Structure of a hierarchical coupling tree plus its parameter layout.
class HintTree {
 public:
  HintTree() = default;

  explicit HintTree(const ModelShape& shape) : shape_(shape) {
    shape.validate();
    root_ = build(shape.dim, shape.depth, "r");
  }

  const ModelShape& shape() const noexcept { return shape_; }
  int dim() const noexcept { return shape_.dim; }
  int root() const noexcept { return root_; }
  const std::vector<CouplingNode>& nodes() const noexcept { return nodes_; }
  const std::vector<LinearLayer>& layers() const noexcept { return layers_; }

  /// Zero-valued parameter store with this tree's named slices.
  const ad::ParamStore& layout() const noexcept { return layout_; }
  std::size_t num_params() const noexcept { return layout_.size(); }

  /// Default initialisation: Glorot-uniform hidden layers, and final layers
  /// set so that every scale net outputs 1 and every shift net outputs 0.
  ad::ParamStore initial_params(RngStream& rng) const {
    ad::ParamStore p = layout_;
    for (const auto& node : nodes_) {
      init_mlp(p, node.scale, 1.0, rng);
      init_mlp(p, node.shift, 0.0, rng);
    }
    return p;
  }

 private:
  int build(int dim, int depth, const std::string& path) {
    if (dim <= 1 || depth <= 0) return -1;
    CouplingNode node;
    node.dim = dim;
    node.d_upper = dim / 2;
    node.d_lower = dim - node.d_upper;
    node.path = path;
    const int in = node.d_upper + shape_.cond_dim;
    node.scale = build_mlp(in, node.d_lower, path + ".scale");
    node.shift = build_mlp(in, node.d_lower, path + ".shift");
    const int index = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
    const int upper = build(nodes_[index].d_upper, depth - 1, path + "u");
    const int lower = build(nodes_[index].d_lower, depth - 1, path + "l");
    nodes_[index].upper = upper;
    nodes_[index].lower = lower;
    return index;
  }

  Mlp build_mlp(int in, int out, const std::string& name) {
    Mlp mlp;
    int width = in;
    for (int k = 0; k < shape_.mlp_layers; ++k) {
      const bool last = k + 1 == shape_.mlp_layers;
      const int next = last ? out : shape_.hidden_units;
      LinearLayer layer;
      layer.in = width;
      layer.out = next;
      const std::string prefix = name + "." + std::to_string(k);
      layer.weight_slice = layout_.add_slice(prefix + ".weight", static_cast<std::size_t>(width * next));
      layer.bias_slice = layout_.add_slice(prefix + ".bias", static_cast<std::size_t>(next));
      mlp.layers.push_back(layers_.size());
      layers_.push_back(layer);
      width = next;
    }
    return mlp;
  }

  void init_mlp(ad::ParamStore& p, const Mlp& mlp, double output_bias, RngStream& rng) const {
    for (std::size_t k = 0; k < mlp.layers.size(); ++k) {
      const LinearLayer& layer = layers_[mlp.layers[k]];
      auto w = p.view(layer.weight_slice);
      auto b = p.view(layer.bias_slice);
      if (k + 1 == mlp.layers.size()) {
        for (double& v : w) v = 0.0;
        for (double& v : b) v = output_bias;
      } else {
        const double limit = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
        for (double& v : w) v = limit * (2.0 * rng.uniform() - 1.0);
        for (double& v : b) v = 0.0;
      }
    }
  }

  ModelShape shape_;
  std::vector<CouplingNode> nodes_;
  std::vector<LinearLayer> layers_;
  ad::ParamStore layout_;
  int root_ = -1;
};

/// One ensemble member: tree parameters plus an input permutation.
struct PermutedTree {
  ad::ParamStore params;
  std::vector<std::size_t> perm;     // (P x)_i = x_{perm[i]}
  std::vector<std::size_t> inverse;  // inverse[perm[i]] = i

  static std::vector<std::size_t> invert(const std::vector<std::size_t>& perm) {
    std::vector<std::size_t> inv(perm.size(), perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
      if (perm[i] >= perm.size() || inv[perm[i]] != perm.size()) {
        throw StructuralError("permutation is not a bijection");
      }
      inv[perm[i]] = i;
    }
    return inv;
  }

  void set_permutation(std::vector<std::size_t> p) {
    inverse = invert(p);
    perm = std::move(p);
  }
};

/// L independently parameterised, independently permuted trees of one shape.
struct CvEnsemble {
  std::shared_ptr<const HintTree> tree;
  std::vector<PermutedTree> members;

  int dim() const { return tree->dim(); }
  int cond_dim() const { return tree->shape().cond_dim; }
  std::size_t size() const noexcept { return members.size(); }
};

inline CvEnsemble ensemble_init(const ModelShape& shape, int ensemble_size, RngStream& rng) {
  if (ensemble_size < 1) throw ConfigError("ensemble size must be >= 1");
  shape.validate();
  CvEnsemble ens;
  ens.tree = std::make_shared<const HintTree>(shape);
  ens.members.reserve(static_cast<std::size_t>(ensemble_size));
  for (int l = 0; l < ensemble_size; ++l) {
    RngStream member_rng = rng.split(static_cast<std::uint64_t>(l));
    PermutedTree m;
    m.set_permutation(random_permutation(static_cast<std::size_t>(shape.dim), member_rng));
    m.params = ens.tree->initial_params(member_rng);
    ens.members.push_back(std::move(m));
  }
  return ens;
}

// --- backend-generic forward pass -------------------------------------------

/// Plain double-precision backend over Eigen matrices.
class EigenBackend {
 public:
  using Matrix = Mat;

  EigenBackend(const HintTree& tree, const ad::ParamStore& params) : tree_(tree), params_(params) {
    require_dims(params.size(), tree.num_params(), "EigenBackend parameters");
  }

  Matrix linear(const LinearLayer& layer, const Matrix& x) const {
    const auto w = params_.view(layer.weight_slice);
    const auto b = params_.view(layer.bias_slice);
    Eigen::Map<const Mat> wm(w.data(), layer.out, layer.in);
    Eigen::Map<const Vec> bv(b.data(), layer.out);
    Matrix out = wm * x;
    out.colwise() += bv;
    return out;
  }
  static Matrix tanh(const Matrix& x) { return ad::tanh_elementwise(x); }
  static Matrix add(const Matrix& a, const Matrix& b) { return a + b; }
  static Matrix sub(const Matrix& a, const Matrix& b) { return a - b; }
  static Matrix mul(const Matrix& a, const Matrix& b) { return a.cwiseProduct(b); }
  static Matrix scale(const Matrix& a, double c) { return c * a; }
  static Matrix rows(const Matrix& x, Eigen::Index off, Eigen::Index n) { return x.middleRows(off, n); }
  static Matrix vcat(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() + b.rows(), a.cols());
    out << a, b;
    return out;
  }
  static Matrix permute_rows(const Matrix& x, const std::vector<std::size_t>& perm) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < perm.size(); ++i) {
      out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(perm[i]));
    }
    return out;
  }
  static Matrix ones(Eigen::Index r, Eigen::Index c) { return Matrix::Ones(r, c); }
  static Matrix constant(const Mat& m) { return m; }
  static Eigen::Index num_rows(const Matrix& m) { return m.rows(); }
  static Eigen::Index num_cols(const Matrix& m) { return m.cols(); }
  static bool all_finite(const Matrix& m) { return m.allFinite(); }

 private:
  const HintTree& tree_;
  const ad::ParamStore& params_;
};

template <class Backend>
struct TreeEval {
  typename Backend::Matrix phi;
  typename Backend::Matrix diag;
};

namespace detail {

template <class Backend>
void check_finite(const typename Backend::Matrix& m, const CouplingNode& node, const char* what) {
  if (!Backend::all_finite(m)) {
    throw NumericError("non-finite " + std::string(what) + " at coupling node '" + node.path + "'");
  }
}

}  // namespace detail

template <class Backend>
typename Backend::Matrix mlp_forward(const HintTree& tree, const Mlp& mlp, Backend& be,
                                     typename Backend::Matrix h) {
  for (std::size_t k = 0; k < mlp.layers.size(); ++k) {
    h = be.linear(tree.layers()[mlp.layers[k]], h);
    if (k + 1 < mlp.layers.size()) h = be.tanh(h);
  }
  return h;
}

/// Recursive evaluation of the subtree rooted at `node` on x (rows = node dim).
template <class Backend>
TreeEval<Backend> eval_node(const HintTree& tree, int node_index, Backend& be,
                            const typename Backend::Matrix& x, const typename Backend::Matrix& y) {
  if (node_index < 0) {
    return {x, be.ones(Backend::num_rows(x), Backend::num_cols(x))};
  }
  const CouplingNode& node = tree.nodes()[static_cast<std::size_t>(node_index)];
  auto x_upper = be.rows(x, 0, node.d_upper);
  auto x_lower = be.rows(x, node.d_upper, node.d_lower);

  TreeEval<Backend> upper = eval_node(tree, node.upper, be, x_upper, y);
  auto cond = Backend::num_rows(y) > 0 ? be.vcat(upper.phi, y) : upper.phi;
  auto s = mlp_forward(tree, node.scale, be, cond);
  auto t = mlp_forward(tree, node.shift, be, cond);
  detail::check_finite<Backend>(s, node, "scale");
  detail::check_finite<Backend>(t, node, "shift");
  auto z = be.add(be.mul(s, x_lower), t);
  TreeEval<Backend> lower = eval_node(tree, node.lower, be, z, y);

  return {be.vcat(upper.phi, lower.phi), be.vcat(upper.diag, be.mul(s, lower.diag))};
}

template <class Backend>
TreeEval<Backend> tree_eval(const HintTree& tree, Backend& be, const typename Backend::Matrix& x,
                            const typename Backend::Matrix& y) {
  return eval_node(tree, tree.root(), be, x, y);
}

/// g = diag + phi * score for one permuted member, in original coordinates.
template <class Backend>
typename Backend::Matrix member_cv(const HintTree& tree, const PermutedTree& member, Backend& be,
                                   const typename Backend::Matrix& x,
                                   const typename Backend::Matrix& y,
                                   const typename Backend::Matrix& score) {
  auto xp = be.permute_rows(x, member.perm);
  TreeEval<Backend> out = tree_eval(tree, be, xp, y);
  auto phi = be.permute_rows(out.phi, member.inverse);
  auto diag = be.permute_rows(out.diag, member.inverse);
  return be.add(diag, be.mul(phi, score));
}

// --- double-precision convenience API ---------------------------------------

struct TreeOutput {
  Vec phi;
  Vec diag;
};

inline Mat replicate_cols(const Vec& v, Eigen::Index n) { return v.replicate(1, n); }

inline TreeOutput tree_forward(const HintTree& tree, const ad::ParamStore& params, const Vec& x,
                               const Vec& y) {
  require_dims(static_cast<std::size_t>(x.size()), static_cast<std::size_t>(tree.dim()), "tree_forward x");
  require_dims(static_cast<std::size_t>(y.size()), static_cast<std::size_t>(tree.shape().cond_dim),
               "tree_forward y");
  EigenBackend be(tree, params);
  auto out = tree_eval(tree, be, Mat(x), Mat(y));
  return {out.phi.col(0), out.diag.col(0)};
}

/// Exact divergence: the sum of the recursive Jacobian diagonal.
inline double tree_divergence(const HintTree& tree, const ad::ParamStore& params, const Vec& x,
                              const Vec& y) {
  return tree_forward(tree, params, x, y).diag.sum();
}

inline Vec permuted_cv(const HintTree& tree, const PermutedTree& member, const Vec& x, const Vec& y,
                       const Vec& score) {
  require_dims(static_cast<std::size_t>(x.size()), static_cast<std::size_t>(tree.dim()), "permuted_cv x");
  require_dims(static_cast<std::size_t>(score.size()), static_cast<std::size_t>(tree.dim()),
               "permuted_cv score");
  require_dims(static_cast<std::size_t>(y.size()), static_cast<std::size_t>(tree.shape().cond_dim),
               "permuted_cv y");
  EigenBackend be(tree, member.params);
  return member_cv(tree, member, be, Mat(x), Mat(y), Mat(score)).col(0);
}

/// Batched ensemble control variate: xs, scores are d x n; ys is m x n.
inline Mat ensemble_cv_batch(const CvEnsemble& ens, const Mat& xs, const Mat& ys, const Mat& scores) {
  require_dims(static_cast<std::size_t>(xs.rows()), static_cast<std::size_t>(ens.dim()), "ensemble_cv x");
  require_dims(static_cast<std::size_t>(scores.rows()), static_cast<std::size_t>(ens.dim()),
               "ensemble_cv score");
  require_dims(static_cast<std::size_t>(ys.rows()), static_cast<std::size_t>(ens.cond_dim()),
               "ensemble_cv y");
  Mat sum = Mat::Zero(xs.rows(), xs.cols());
  for (const auto& member : ens.members) {
    EigenBackend be(*ens.tree, member.params);
    sum += member_cv(*ens.tree, member, be, xs, ys, scores);
  }
  return sum / static_cast<double>(ens.members.size());
}

/// Batched control variate for many samples under a single observation y.
inline Mat ensemble_cv_single_obs(const CvEnsemble& ens, const Mat& xs, const Vec& y, const Mat& scores) {
  return ensemble_cv_batch(ens, xs, replicate_cols(y, xs.cols()), scores);
}

inline Vec ensemble_cv(const CvEnsemble& ens, const Vec& x, const Vec& y, const Vec& score) {
  return ensemble_cv_batch(ens, Mat(x), Mat(y), Mat(score)).col(0);
}

}  // namespace cncv
