// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "absvit/abs_hierarchy.hpp"
#include "absvit/sparse_coding.hpp"

namespace ab = absvit::abs;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

ab::Decoder linear_decoder(const MatrixXd& A) { return ab::Decoder{A, VectorXd::Zero(A.rows()), ab::DecoderKind::linear}; }

ab::Hierarchy identity_hierarchy(Eigen::Index d, Eigen::Index layers, double lambda) {
  ab::Hierarchy h;
  for (Eigen::Index l = 0; l < layers; ++l) {
    h.dictionaries.push_back(MatrixXd::Identity(d, d));
    h.decoders.push_back(linear_decoder(MatrixXd::Identity(d, d)));
  }
  h.lambda = lambda;
  return h;
}

VectorXd randv(Eigen::Index n, absvit::Rng& rng) {
  VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

// Term-by-term evaluation written independently of log_joint.
double log_joint_by_terms(const ab::Hierarchy& hier, const ab::Codes& codes, const VectorXd& h) {
  double total = 0.0;
  VectorXd below = h;
  for (Eigen::Index l = 1; l <= hier.layers(); ++l) {
    const VectorXd z = hier.P(l) * codes[l - 1];
    VectorXd pred = hier.g(l - 1).A * z + hier.g(l - 1).b;
    if (hier.g(l - 1).kind == ab::DecoderKind::tanh)
      for (Eigen::Index i = 0; i < pred.size(); ++i) pred[i] = std::tanh(pred[i]);
    for (Eigen::Index i = 0; i < pred.size(); ++i) total -= 0.5 * (below[i] - pred[i]) * (below[i] - pred[i]);
    for (Eigen::Index i = 0; i < codes[l - 1].size(); ++i) total -= hier.lambda * std::abs(codes[l - 1][i]);
    below = z;
  }
  const VectorXd& top = codes.back();
  for (Eigen::Index i = 0; i < top.size(); ++i) total -= 0.5 * hier.prior_precision * top[i] * top[i];
  return total;
}

}  // namespace

TEST(Generate, IdentityChainCopiesTopCode) {
  const auto hier = identity_hierarchy(4, 3, 0.0);
  VectorXd top(4);
  top << 0.5, -1.0, 2.0, 0.25;
  absvit::sparse::SolveOptions opts;
  opts.tol = 1e-12;
  const auto out = ab::generate(hier, top, opts);
  for (const auto& z : out.z) EXPECT_LE((z - top).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Generate, LargeLambdaSilencesLayersBelow) {
  absvit::Rng rng(3);
  auto hier = ab::random_hierarchy({4, 5, 6, 3}, {6, 5, 4}, ab::DecoderKind::tanh, 0.0, rng);
  for (auto& d : hier.decoders) d.b.setZero();
  const VectorXd top = randv(4, rng);
  const VectorXd z3 = hier.P(3) * top;
  hier.lambda = (hier.P(2).transpose() * hier.g(2).apply(z3)).cwiseAbs().maxCoeff() + 1e-9;
  const auto out = ab::generate(hier, top);
  EXPECT_EQ(out.z[2].cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(out.z[1].cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(out.z[0].cwiseAbs().maxCoeff(), 0.0);
}

TEST(Generate, EveryLayerCodeSatisfiesKkt) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    absvit::Rng rng(seed);
    const auto hier = ab::random_hierarchy({6, 8, 7, 5}, {8, 6, 5}, ab::DecoderKind::tanh, 0.05, rng);
    const auto out = ab::generate(hier, randv(5, rng));
    for (Eigen::Index l = 1; l < hier.layers(); ++l) {
      absvit::sparse::SRProblem p{hier.P(l), hier.g(l).apply(out.z[l + 1]), hier.lambda};
      EXPECT_LE(absvit::sparse::kkt_residual(p, out.codes[l - 1]), 1e-4) << "seed " << seed << " layer " << l;
    }
  }
}

TEST(LogJoint, PerfectReconstructionLeavesOnlyPrior) {
  const auto hier = identity_hierarchy(3, 2, 0.0);
  VectorXd u(3);
  u << 1.0, -2.0, 0.5;
  EXPECT_NEAR(ab::log_joint(hier, {u, u}, u), -0.5 * u.squaredNorm(), 1e-15);
}

TEST(LogJoint, DoublingACodeAtTheOptimumLowersIt) {
  absvit::Rng rng(4);
  const auto hier = identity_hierarchy(3, 1, 0.0);
  ab::Hierarchy no_prior = hier;
  no_prior.prior_precision = 0.0;
  const VectorXd h = randv(3, rng);
  EXPECT_LT(ab::log_joint(no_prior, {VectorXd(2 * h)}, h), ab::log_joint(no_prior, {h}, h));
}

TEST(LogJoint, MatchesTermByTermEvaluation) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    absvit::Rng rng(seed + 100);
    for (auto kind : {ab::DecoderKind::tanh, ab::DecoderKind::linear}) {
      const auto hier = ab::random_hierarchy({5, 4, 6, 3}, {7, 5, 4}, kind, 0.2, rng);
      const auto codes = ab::random_codes(hier, rng);
      const VectorXd h = randv(5, rng);
      const double ref = log_joint_by_terms(hier, codes, h);
      EXPECT_NEAR(ab::log_joint(hier, codes, h), ref, 1e-12 * std::max(1.0, std::abs(ref)));
    }
  }
}

TEST(LogJoint, RejectsShapeMismatch) {
  const auto hier = identity_hierarchy(3, 2, 0.1);
  EXPECT_THROW(ab::log_joint(hier, {VectorXd::Zero(3)}, VectorXd::Zero(3)), std::invalid_argument);
  EXPECT_THROW(ab::log_joint(hier, {VectorXd::Zero(3), VectorXd::Zero(2)}, VectorXd::Zero(3)), std::invalid_argument);
  EXPECT_THROW(ab::log_joint(hier, {VectorXd::Zero(3), VectorXd::Zero(3)}, VectorXd::Zero(4)), std::invalid_argument);
}

TEST(DecomposeGradient, LinearDecoderClosedForm) {
  absvit::Rng rng(5);
  auto hier = ab::random_hierarchy({4, 5, 3}, {6, 4}, ab::DecoderKind::linear, 0.1, rng);
  const auto codes = ab::random_codes(hier, rng);
  const VectorXd h = randv(4, rng);
  const auto parts = ab::decompose_gradient(hier, codes, h, 2);
  const MatrixXd& A = hier.g(1).A;
  const VectorXd z1 = hier.P(1) * codes[0];
  const VectorXd z2 = hier.P(2) * codes[1];
  EXPECT_LE((parts.x_bu - A.transpose() * z1).cwiseAbs().maxCoeff(), 1e-14);
  const VectorXd reg = hier.P(2).transpose() * A.transpose() * (A * z2 + hier.g(1).b);
  EXPECT_LE((parts.reg_grad - reg).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_TRUE(parts.top);
}

TEST(DecomposeGradient, NoSignalFromAboveWhenItIsZero) {
  absvit::Rng rng(6);
  auto hier = ab::random_hierarchy({4, 5, 3}, {6, 4}, ab::DecoderKind::tanh, 0.1, rng);
  for (auto& d : hier.decoders) d.b.setZero();
  auto codes = ab::random_codes(hier, rng);
  codes[1].setZero();
  const auto parts = ab::decompose_gradient(hier, codes, randv(4, rng), 1);
  EXPECT_EQ(parts.x_td.cwiseAbs().maxCoeff(), 0.0);
}

TEST(DecomposeGradient, RejectsLayerOutOfRange) {
  const auto hier = identity_hierarchy(2, 2, 0.0);
  const ab::Codes codes{VectorXd::Zero(2), VectorXd::Zero(2)};
  EXPECT_THROW(ab::decompose_gradient(hier, codes, VectorXd::Zero(2), 0), std::out_of_range);
  EXPECT_THROW(ab::decompose_gradient(hier, codes, VectorXd::Zero(2), 3), std::out_of_range);
}

TEST(DecomposeGradient, MatchesCentralDifferences) {
  // Second oracle besides autodiff: finite differences of log_joint at
  // coordinates away from the l1 kink.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    absvit::Rng rng(seed + 300);
    const auto hier = ab::random_hierarchy({4, 5, 6, 3}, {6, 5, 4}, ab::DecoderKind::tanh, 0.1, rng);
    const auto codes = ab::random_codes(hier, rng);
    const VectorXd h = randv(4, rng);
    for (Eigen::Index l = 1; l <= 3; ++l) {
      const VectorXd ours = ab::decompose_gradient(hier, codes, h, l).smooth_gradient();
      for (Eigen::Index i = 0; i < codes[l - 1].size(); ++i) {
        const double u = codes[l - 1][i];
        if (std::abs(u) < 1e-2) continue;
        const double step = 1e-6;
        auto plus = codes, minus = codes;
        plus[l - 1][i] += step;
        minus[l - 1][i] -= step;
        const double fd = (ab::log_joint(hier, plus, h) - ab::log_joint(hier, minus, h)) / (2 * step);
        EXPECT_NEAR(ours[i] - hier.lambda * (u > 0 ? 1.0 : -1.0), fd, 1e-6) << "seed " << seed << " layer " << l;
      }
    }
  }
}

TEST(VerifyIdentity, TanhDecodersWithinTolerance) {
  const auto report = ab::verify_identity(ab::DecoderKind::tanh, 100, 42);
  EXPECT_LE(report.max_error, 1e-8) << report.text();
  EXPECT_GT(report.coordinates_checked, 500u);
}

TEST(VerifyIdentity, LinearDecodersWithinTolerance) {
  EXPECT_LE(ab::verify_identity(ab::DecoderKind::linear, 100, 43).max_error, 1e-12);
}

TEST(VerifyIdentity, HoldsAtEveryCoordinateWithoutSparsity) {
  const auto report = ab::verify_identity(ab::DecoderKind::tanh, 50, 44, 0.0);
  EXPECT_LE(report.max_error, 1e-8);
  const auto text = report.text();
  EXPECT_NE(text.find("trials=50"), std::string::npos);
}

TEST(MapAscent, StepIsNoOpAtKktPoint) {
  absvit::Rng rng(7);
  auto hier = identity_hierarchy(3, 1, 0.3);
  hier.prior_precision = 0.0;
  const VectorXd h = randv(3, rng);
  const ab::Codes opt{absvit::sparse::soft_threshold(h, 0.3)};
  const auto next = ab::map_ascent_step(hier, opt, h, 0.5);
  EXPECT_LE((next[0] - opt[0]).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(MapAscent, SingleLayerReproducesSparseCodeIterates) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    absvit::Rng rng(seed + 50);
    MatrixXd P(5, 7);
    for (Eigen::Index i = 0; i < P.size(); ++i) P.data()[i] = rng.normal();
    P /= std::sqrt(absvit::sparse::lipschitz_constant(P)) * 1.01;
    ab::Hierarchy hier;
    hier.dictionaries = {P};
    hier.decoders = {linear_decoder(MatrixXd::Identity(5, 5))};
    hier.lambda = 0.05;
    hier.prior_precision = 0.0;
    const VectorXd x = randv(5, rng);
    absvit::sparse::SRProblem problem{P, x, 0.05};
    auto state = absvit::sparse::SparseCodeState::zeros(7);
    ab::Codes codes{VectorXd::Zero(7)};
    for (int t = 0; t < 50; ++t) {
      state = absvit::sparse::lca_step(problem, state, 1.0);
      codes = ab::map_ascent_step(hier, codes, x, 1.0);
      ASSERT_LE((state.code - codes[0]).cwiseAbs().maxCoeff(), 1e-12) << "seed " << seed << " step " << t;
    }
  }
}

TEST(MapAscent, EnergyRisesAndReachesKkt) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    absvit::Rng rng(seed + 70);
    const auto hier = ab::random_hierarchy({6, 5, 7, 4}, {8, 6, 5}, ab::DecoderKind::tanh, 0.1, rng);
    const VectorXd h = randv(6, rng);
    ab::Codes init;
    for (Eigen::Index l = 1; l <= 3; ++l) init.push_back(VectorXd::Zero(hier.P(l).cols()));
    const auto res = ab::map_ascent(hier, h, init);
    for (std::size_t i = 1; i < res.energy.size(); ++i)
      ASSERT_GE(res.energy[i], res.energy[i - 1] - 1e-12) << "seed " << seed << " step " << i;
    for (Eigen::Index l = 1; l <= 3; ++l)
      EXPECT_LE(ab::layer_kkt_residual(hier, res.codes, h, l), 1e-3) << "seed " << seed << " layer " << l;
  }
}

TEST(MapAscent, FrozenLayerStaysPut) {
  absvit::Rng rng(8);
  const auto hier = ab::random_hierarchy({4, 5, 3}, {6, 4}, ab::DecoderKind::tanh, 0.1, rng);
  const auto codes = ab::random_codes(hier, rng);
  const auto next = ab::map_ascent_step(hier, codes, randv(4, rng), 0.05, {false, true});
  EXPECT_TRUE(next[1] == codes[1]);
  EXPECT_FALSE(next[0] == codes[0]);
}

TEST(MapAscent, TopDownSignalFavoursCuedTemplate) {
  // Layer 1 holds two orthogonal template blocks; the observation contains
  // both. A top-level state aligned with block A should pull code mass to A.
  const Eigen::Index d = 8;
  ab::Hierarchy hier;
  hier.dictionaries = {MatrixXd::Identity(d, d), MatrixXd::Identity(4, 4)};
  MatrixXd up = MatrixXd::Zero(d, 4);
  up.topRows(4) = MatrixXd::Identity(4, 4);
  hier.decoders = {linear_decoder(MatrixXd::Identity(d, d)), linear_decoder(up)};
  hier.lambda = 0.2;
  hier.prior_precision = 0.0;
  VectorXd h(d);
  h << 1.0, 0.8, 0.9, 1.1, 1.0, 0.9, 1.2, 0.8;

  auto mass_ratio = [&](const VectorXd& top) {
    ab::MapAscentOptions opts;
    opts.frozen = {false, true};
    opts.max_steps = 20000;
    const auto res = ab::map_ascent(hier, h, {VectorXd::Zero(d), top}, opts);
    return res.codes[0].head(4).lpNorm<1>() / res.codes[0].tail(4).lpNorm<1>();
  };
  VectorXd cue(4);
  cue << 1.0, 0.8, 0.9, 1.1;
  EXPECT_GT(mass_ratio(cue), mass_ratio(VectorXd::Zero(4)));
}

TEST(MapAscent, RejectsNonPositiveStep) {
  const auto hier = identity_hierarchy(2, 1, 0.0);
  EXPECT_THROW(ab::map_ascent_step(hier, {VectorXd::Zero(2)}, VectorXd::Zero(2), 0.0), std::invalid_argument);
}
