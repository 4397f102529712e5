#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "support.hpp"

using namespace cncv;

namespace {

std::size_t slice_named(const ad::ParamStore& p, const std::string& name) {
  for (std::size_t i = 0; i < p.slices().size(); ++i)
    if (p.slices()[i].name == name) return i;
  throw std::out_of_range(name);
}

Vec ones(Eigen::Index n) { return Vec::Ones(n); }

// phi of a member in original coordinates: x -> P^-1 phi(P x)
Vec permuted_phi(const HintTree& tree, const PermutedTree& m, const Vec& x, const Vec& y) {
  Vec px(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) px(i) = x(static_cast<Eigen::Index>(m.perm[static_cast<std::size_t>(i)]));
  const Vec phi = tree_forward(tree, m.params, px, y).phi;
  Vec out(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) out(j) = phi(static_cast<Eigen::Index>(m.inverse[static_cast<std::size_t>(j)]));
  return out;
}

// Indices that sit in the lower block of some coupling node.
void coupled_indices(const HintTree& tree, int node, int offset, std::set<int>& out) {
  if (node < 0) return;
  const auto& n = tree.nodes()[static_cast<std::size_t>(node)];
  for (int i = 0; i < n.d_lower; ++i) out.insert(offset + n.d_upper + i);
  coupled_indices(tree, n.upper, offset, out);
  coupled_indices(tree, n.lower, offset + n.d_upper, out);
}

}  // namespace

TEST(Mlp, ZeroWeightsGiveBias) {
  HintTree tree(ModelShape{4, 2, 1, 8, 3});
  ad::ParamStore p = tree.layout();
  auto b = p.view(slice_named(p, "r.shift.2.bias"));
  b[0] = 0.25;
  b[1] = -4.0;
  EigenBackend be(tree, p);
  RngStream r(1);
  const Mat in = fixtures::random_mat(4, 3, r);
  const Mat out = mlp_forward(tree, tree.nodes()[0].shift, be, in);
  for (int j = 0; j < 3; ++j) {
    EXPECT_EQ(out(0, j), 0.25);
    EXPECT_EQ(out(1, j), -4.0);
  }
}

TEST(TreeForward, IdentityInitialisation) {
  RngStream r(3);
  HintTree tree(ModelShape{5, 2, 2, 16, 3});
  const auto p = tree.initial_params(r);
  for (int k = 0; k < 10; ++k) {
    const Vec x = fixtures::random_vec(5, r), y = fixtures::random_vec(2, r);
    const auto out = tree_forward(tree, p, x, y);
    EXPECT_EQ(out.phi, x);
    EXPECT_EQ(out.diag, ones(5));
    EXPECT_EQ(tree_divergence(tree, p, x, y), 5.0);
  }
}

TEST(TreeForward, SingleNodeExample) {
  HintTree tree(ModelShape{4, 1, 1, 8, 3});
  ad::ParamStore p = tree.layout();
  auto s = p.view(slice_named(p, "r.scale.2.bias"));
  s[0] = 2.0;
  s[1] = 3.0;
  Vec y(1);
  y << 0.7;
  const auto out = tree_forward(tree, p, ones(4), y);
  Vec expect(4);
  expect << 1, 1, 2, 3;
  EXPECT_EQ(out.phi, expect);
  EXPECT_EQ(out.diag, expect);
  EXPECT_EQ(tree_divergence(tree, p, ones(4), y), 7.0);
}

TEST(TreeForward, DiagMatchesFiniteDifferences) {
  RngStream r(5);
  HintTree tree(ModelShape{4, 3, 2, 16, 3});
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = fixtures::random_params(tree, r);
    const Vec x = fixtures::random_vec(4, r), y = fixtures::random_vec(3, r);
    const Mat j = fixtures::fd_jacobian([&](const Vec& z) { return tree_forward(tree, p, z, y).phi; }, x);
    const Vec diag = tree_forward(tree, p, x, y).diag;
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(diag(i), j(i, i), 1e-6);
    EXPECT_NEAR(tree_divergence(tree, p, x, y), j.trace(), 1e-5);
  }
}

TEST(TreeForward, UpperOutputConditionsLower) {
  // Jacobian is block lower-triangular: upper outputs never depend on lower inputs.
  RngStream r(6);
  HintTree tree(ModelShape{6, 1, 2, 8, 3});
  const auto p = fixtures::random_params(tree, r);
  const Vec x = fixtures::random_vec(6, r), y = fixtures::random_vec(1, r);
  const Mat j = fixtures::fd_jacobian([&](const Vec& z) { return tree_forward(tree, p, z, y).phi; }, x);
  EXPECT_LT(j.topRightCorner(3, 3).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(TreeForward, NonFiniteNamesNode) {
  HintTree tree(ModelShape{4, 1, 2, 8, 3});
  RngStream r(1);
  ad::ParamStore p = tree.initial_params(r);
  p.view(slice_named(p, "rl.scale.2.bias"))[0] = NAN;
  try {
    tree_forward(tree, p, ones(4), Vec::Zero(1));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("'rl'"), std::string::npos) << e.what();
  }
}

TEST(TreeForward, DimensionMismatch) {
  HintTree tree(ModelShape{4, 1, 2, 8, 3});
  const auto p = tree.layout();
  EXPECT_THROW(tree_forward(tree, p, ones(3), Vec::Zero(1)), StructuralError);
  EXPECT_THROW(tree_forward(tree, p, ones(4), Vec::Zero(2)), StructuralError);
}

TEST(HintTreeStructure, NodeCounts) {
  EXPECT_EQ(HintTree(ModelShape{4, 4, 2, 64, 3}).nodes().size(), 3u);
  EXPECT_EQ(HintTree(ModelShape{16, 16, 2, 64, 3}).nodes().size(), 3u);
  EXPECT_EQ(HintTree(ModelShape{2, 2, 5, 8, 3}).nodes().size(), 1u);
  EXPECT_EQ(HintTree(ModelShape{3, 1, 3, 8, 3}).nodes().size(), 2u);
  const HintTree t(ModelShape{7, 1, 1, 8, 2});
  EXPECT_EQ(t.nodes()[0].d_upper, 3);
  EXPECT_EQ(t.nodes()[0].d_lower, 4);
}

TEST(HintTreeStructure, EveryCoupledIndexIsLearnable) {
  RngStream r(9);
  for (int d = 2; d <= 16; ++d) {
    const int depth = static_cast<int>(std::ceil(std::log2(d)));
    HintTree tree(ModelShape{d, 1, depth, 8, 3});
    std::set<int> coupled;
    coupled_indices(tree, tree.root(), 0, coupled);
    EXPECT_GE(static_cast<int>(coupled.size()), d - 1) << "d=" << d;
    const auto p = fixtures::random_params(tree, r);
    const Vec x = fixtures::random_vec(d, r), y = fixtures::random_vec(1, r);
    const Mat j = fixtures::fd_jacobian([&](const Vec& z) { return tree_forward(tree, p, z, y).phi; }, x);
    for (int i = 0; i < d; ++i) {
      if (coupled.count(i)) {
        EXPECT_GT(std::abs(j(i, i) - 1.0), 1e-4) << "d=" << d << " i=" << i;
      } else {
        EXPECT_NEAR(j(i, i), 1.0, 1e-8);
      }
    }
  }
}

TEST(HintTreeStructure, DepthTwoAtSixteenLeavesFourIdentityCoordinates) {
  HintTree tree(ModelShape{16, 16, 2, 8, 3});
  std::set<int> coupled;
  coupled_indices(tree, tree.root(), 0, coupled);
  EXPECT_EQ(coupled.size(), 12u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(coupled.count(i), 0u);
}

TEST(PermutedCv, IdentityGivesSteinClosedForm) {
  RngStream r(2);
  CvEnsemble ens = ensemble_init(ModelShape{3, 1, 2, 8, 3}, 1, r);
  const Vec x = fixtures::random_vec(3, r);
  const Vec g = permuted_cv(*ens.tree, ens.members[0], x, Vec::Zero(1), -x);
  EXPECT_LT((g - (ones(3) - x.cwiseProduct(x))).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(PermutedCv, ConstantShiftHandCheck) {
  const double c = 0.8;
  HintTree tree(ModelShape{2, 1, 1, 4, 2});
  ad::ParamStore p = tree.layout();
  p.view(slice_named(p, "r.scale.1.bias"))[0] = 1.0;
  p.view(slice_named(p, "r.shift.1.bias"))[0] = c;
  PermutedTree m;
  m.params = p;
  m.set_permutation({0, 1});
  Vec x(2), s(2);
  x << 0.3, -1.1;
  s << 2.0, 0.5;
  const Vec g = permuted_cv(tree, m, x, Vec::Zero(1), s);
  EXPECT_DOUBLE_EQ(g(0), 1.0 + x(0) * s(0));
  EXPECT_DOUBLE_EQ(g(1), 1.0 + (x(1) + c) * s(1));
}

TEST(PermutedCv, ComponentFormWithPermutation) {
  RngStream r(4);
  const CvEnsemble ens = fixtures::random_ensemble(ModelShape{5, 2, 2, 8, 3}, 1, 77);
  const auto& m = ens.members[0];
  const Vec x = fixtures::random_vec(5, r), y = fixtures::random_vec(2, r), s = fixtures::random_vec(5, r);
  const Mat j = fixtures::fd_jacobian([&](const Vec& z) { return permuted_phi(*ens.tree, m, z, y); }, x);
  const Vec g = permuted_cv(*ens.tree, m, x, y, s);
  const Vec phi = permuted_phi(*ens.tree, m, x, y);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(g(i), j(i, i) + phi(i) * s(i), 1e-6);
}

TEST(PermutedCv, ConjugationInvariance) {
  RngStream r(8);
  const CvEnsemble ens = fixtures::random_ensemble(ModelShape{6, 1, 2, 8, 3}, 3, 11);
  const Vec y = fixtures::random_vec(1, r);
  for (const auto& m : ens.members) {
    const Vec x = fixtures::random_vec(6, r);
    Vec px(6);
    for (int i = 0; i < 6; ++i) px(i) = x(static_cast<Eigen::Index>(m.perm[static_cast<std::size_t>(i)]));
    const Mat jc = fixtures::fd_jacobian([&](const Vec& z) { return permuted_phi(*ens.tree, m, z, y); }, x);
    const Mat jt = fixtures::fd_jacobian([&](const Vec& z) { return tree_forward(*ens.tree, m.params, z, y).phi; }, px);
    EXPECT_NEAR(jc.trace(), jt.trace(), 1e-5);
    const Vec g0 = permuted_cv(*ens.tree, m, x, y, Vec::Zero(6));
    EXPECT_NEAR(g0.sum(), jc.trace(), 1e-5);
  }
}

TEST(PermutedCv, DimensionMismatch) {
  const CvEnsemble ens = fixtures::random_ensemble(ModelShape{3, 1, 1, 4, 2}, 1, 1);
  EXPECT_THROW(permuted_cv(*ens.tree, ens.members[0], ones(3), Vec::Zero(1), ones(2)), StructuralError);
}

TEST(PermutationInvariant, InverseComposes) {
  RngStream r(3);
  const auto p = random_permutation(9, r);
  const auto inv = PermutedTree::invert(p);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(inv[p[i]], i);
  EXPECT_THROW(PermutedTree::invert({0, 0, 1}), StructuralError);
}

TEST(EnsembleCv, SingleMemberAndIdenticalMembers) {
  RngStream r(5);
  const CvEnsemble one = fixtures::random_ensemble(ModelShape{4, 2, 2, 8, 3}, 1, 3);
  const Vec x = fixtures::random_vec(4, r), y = fixtures::random_vec(2, r), s = fixtures::random_vec(4, r);
  EXPECT_EQ(ensemble_cv(one, x, y, s), permuted_cv(*one.tree, one.members[0], x, y, s));

  CvEnsemble many = one;
  many.members.front().set_permutation({0, 1, 2, 3});
  many.members.resize(4, many.members.front());
  const Vec single = permuted_cv(*many.tree, many.members[0], x, y, s);
  EXPECT_LT((ensemble_cv(many, x, y, s) - single).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(EnsembleCv, BatchMatchesSingle) {
  RngStream r(6);
  const CvEnsemble ens = fixtures::random_ensemble(ModelShape{4, 2, 2, 8, 3}, 3, 9);
  const Mat xs = fixtures::random_mat(4, 5, r), ys = fixtures::random_mat(2, 5, r), ss = fixtures::random_mat(4, 5, r);
  const Mat g = ensemble_cv_batch(ens, xs, ys, ss);
  for (int j = 0; j < 5; ++j)
    EXPECT_LT((g.col(j) - ensemble_cv(ens, xs.col(j), ys.col(j), ss.col(j))).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(EnsembleCv, SteinZeroMeanAtRandomParameters) {
  const auto problem = InverseProblem::gaussian(4, 0.3, 21);
  const CvEnsemble ens = fixtures::random_ensemble(ModelShape{4, 4, 2, 16, 3}, 4, 5, 0.5);
  RngStream r(31);
  const Vec y = problem.simulate_pair(r).second;
  const int n = 50000;
  const Mat xs = problem.sample_posterior(y, n, r);
  const Mat g = ensemble_cv_single_obs(ens, xs, y, problem.posterior_scores(xs, y));
  for (int j = 0; j < 4; ++j) {
    const double m = g.row(j).mean();
    const double sd = std::sqrt((g.row(j).array() - m).square().sum() / (n - 1));
    EXPECT_LE(std::abs(m), 4.0 * sd / std::sqrt(n)) << "component " << j;
  }
}

TEST(EnsembleInit, ShapeAndDeterminism) {
  RngStream a(12), b(12);
  const ModelShape shape{4, 4, 2, 64, 3};
  const CvEnsemble e1 = ensemble_init(shape, 16, a), e2 = ensemble_init(shape, 16, b);
  EXPECT_EQ(e1.size(), 16u);
  EXPECT_EQ(e1.tree->nodes().size(), 3u);
  std::set<std::vector<std::size_t>> perms;
  for (std::size_t l = 0; l < 16; ++l) {
    EXPECT_EQ(e1.members[l].perm, e2.members[l].perm);
    EXPECT_TRUE(std::equal(e1.members[l].params.values().begin(), e1.members[l].params.values().end(),
                           e2.members[l].params.values().begin()));
    perms.insert(e1.members[l].perm);
  }
  EXPECT_GT(perms.size(), 1u);
  RngStream c(1);
  EXPECT_THROW(ensemble_init(shape, 0, c), ConfigError);
  EXPECT_THROW(ensemble_init(ModelShape{0, 1, 2, 8, 3}, 1, c), ConfigError);
}

TEST(EnsembleInit, DimensionOneIsDegenerate) {
  RngStream r(1);
  const CvEnsemble ens = ensemble_init(ModelShape{1, 1, 2, 8, 3}, 2, r);
  EXPECT_TRUE(ens.tree->nodes().empty());
  EXPECT_EQ(ens.tree->num_params(), 0u);
  Vec x(1), s(1);
  x << 0.4;
  s << -2.0;
  EXPECT_DOUBLE_EQ(ensemble_cv(ens, x, Vec::Zero(1), s)(0), 1.0 + 0.4 * -2.0);
}
