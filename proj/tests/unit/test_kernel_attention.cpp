// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "absvit/kernel_attention.hpp"
#include "absvit/rng.hpp"

namespace at = absvit::attn;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd randn(Eigen::Index r, Eigen::Index c, absvit::Rng& rng, double scale = 1.0) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

VectorXd random_in_ball(Eigen::Index c, absvit::Rng& rng) {
  VectorXd v(c);
  for (Eigen::Index i = 0; i < c; ++i) v[i] = rng.normal();
  return v / v.norm() * rng.uniform(0.1, 1.0);
}

at::AttentionProjections random_projections(Eigen::Index c, Eigen::Index heads, absvit::Rng& rng) {
  at::AttentionProjections p;
  const double s = 1.0 / std::sqrt(double(c));
  p.W_Q = randn(c, c, rng, s);
  p.W_K = randn(c, c, rng, s);
  p.W_V = randn(c, c, rng, s);
  p.W_O = randn(c, c, rng, s);
  p.b_O = randn(c, 1, rng, 0.1);
  p.heads = heads;
  return p;
}

// Straightforward re-derivation of softmax(QK^T)V with explicit loops.
MatrixXd brute_force_attention(const MatrixXd& Q, const MatrixXd& K, const MatrixXd& V) {
  MatrixXd out = MatrixXd::Zero(Q.rows(), V.cols());
  for (Eigen::Index i = 0; i < Q.rows(); ++i) {
    std::vector<double> w(K.rows());
    double total = 0.0;
    for (Eigen::Index j = 0; j < K.rows(); ++j) {
      double dot = 0.0;
      for (Eigen::Index k = 0; k < Q.cols(); ++k) dot += Q(i, k) * K(j, k);
      w[j] = std::exp(dot);
      total += w[j];
    }
    for (Eigen::Index j = 0; j < K.rows(); ++j)
      for (Eigen::Index k = 0; k < V.cols(); ++k) out(i, k) += w[j] / total * V(j, k);
  }
  return out;
}

double kernel_estimate(const VectorXd& q, const VectorXd& k, Eigen::Index features, std::uint64_t seed) {
  MatrixXd qm = q.transpose();
  MatrixXd km = k.transpose();
  return (at::positive_random_features(qm, features, seed) * at::positive_random_features(km, features, seed).transpose())(0, 0);
}

}  // namespace

TEST(RandomFeatures, ZeroInputsGiveExactlyOne) {
  MatrixXd z = MatrixXd::Zero(1, 5);
  auto phi = at::positive_random_features(z, 64, 3);
  EXPECT_NEAR((phi * phi.transpose())(0, 0), 1.0, 1e-14);
}

TEST(RandomFeatures, DeterministicAndPositive) {
  absvit::Rng rng(1);
  MatrixXd x = randn(6, 4, rng);
  auto a = at::positive_random_features(x, 32, 99);
  auto b = at::positive_random_features(x, 32, 99);
  EXPECT_TRUE(a == b);
  EXPECT_GT(a.minCoeff(), 0.0);
  auto c = at::positive_random_features(x, 32, 100);
  EXPECT_FALSE(a == c);
  EXPECT_THROW(at::positive_random_features(x, 0, 1), std::invalid_argument);
}

TEST(RandomFeatures, KernelEstimateIsUnbiased) {
  absvit::Rng rng(2024);
  for (int pair = 0; pair < 5; ++pair) {
    const VectorXd q = random_in_ball(8, rng);
    const VectorXd k = random_in_ball(8, rng);
    const double truth = std::exp(q.dot(k));
    double sum = 0.0, sum_sq = 0.0;
    const int draws = 1000;
    for (int s = 0; s < draws; ++s) {
      const double e = kernel_estimate(q, k, 256, absvit::mix_seed(pair, s));
      sum += e;
      sum_sq += e * e;
    }
    const double mean = sum / draws;
    const double sd = std::sqrt((sum_sq - draws * mean * mean) / (draws - 1));
    EXPECT_LE(std::abs(mean - truth), 3.0 * sd / std::sqrt(double(draws))) << "pair " << pair;
  }
}

TEST(RandomFeatures, RelativeErrorThresholdHoldsOutOfSample) {
  // Calibrate the 99th percentile of the relative error on one block of seeds,
  // then require it to hold for nearly all of a disjoint block.
  absvit::Rng rng(77);
  VectorXd q = VectorXd::Random(8);
  VectorXd k = VectorXd::Random(8);
  q.normalize();
  k.normalize();
  const double truth = std::exp(q.dot(k));
  auto rel = [&](std::uint64_t seed) { return std::abs(kernel_estimate(q, k, 256, seed) - truth) / truth; };
  std::vector<double> calib;
  for (std::uint64_t s = 0; s < 1000; ++s) calib.push_back(rel(s));
  std::sort(calib.begin(), calib.end());
  const double eps = calib[989];
  EXPECT_LT(eps, 0.5);
  int within = 0;
  for (std::uint64_t s = 1000; s < 2000; ++s) within += rel(s) <= eps;
  EXPECT_GE(within, 970);
}

TEST(SoftmaxAttention, SingleTokenReturnsValue) {
  at::AttentionInputs in{MatrixXd::Constant(1, 3, 0.3), MatrixXd::Constant(1, 3, -2.0), MatrixXd(1, 2)};
  in.V << 4.0, -1.0;
  EXPECT_TRUE(at::softmax_attention(in) == in.V);
}

TEST(SoftmaxAttention, IdenticalKeysAverageValues) {
  absvit::Rng rng(5);
  at::AttentionInputs in{randn(2, 3, rng), MatrixXd(2, 3), randn(2, 4, rng)};
  in.K.row(0) = randn(1, 3, rng);
  in.K.row(1) = in.K.row(0);
  MatrixXd expected(2, 4);
  expected.row(0) = expected.row(1) = 0.5 * (in.V.row(0) + in.V.row(1));
  EXPECT_LE((at::softmax_attention(in) - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(SoftmaxAttention, MatchesBruteForce) {
  absvit::Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    at::AttentionInputs in{randn(3, 4, rng), randn(3, 4, rng), randn(3, 4, rng)};
    EXPECT_LE((at::softmax_attention(in) - brute_force_attention(in.Q, in.K, in.V)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(SoftmaxAttention, RejectsMismatchedShapes) {
  at::AttentionInputs in{MatrixXd::Zero(3, 2), MatrixXd::Zero(2, 2), MatrixXd::Zero(3, 2)};
  EXPECT_THROW(at::softmax_attention(in), std::invalid_argument);
}

TEST(SrAttention, ZeroValuesGiveZeroOutput) {
  absvit::Rng rng(11);
  at::AttentionInputs in{randn(5, 3, rng, 0.3), randn(5, 3, rng, 0.3), MatrixXd::Zero(5, 2), 4, 16};
  EXPECT_EQ(at::sr_attention(in, 0.1).output.cwiseAbs().maxCoeff(), 0.0);
}

TEST(SrAttention, SquareDictionaryWithoutSparsityIsExactSolve) {
  absvit::Rng rng(12);
  at::AttentionInputs in{randn(4, 2, rng, 0.3), randn(4, 2, rng), randn(4, 3, rng), 21, 4};
  const MatrixXd phi_k = at::positive_random_features(in.K, 4, 21);
  const MatrixXd phi_q = at::positive_random_features(in.Q, 4, 21);
  const MatrixXd expected = phi_q * phi_k.fullPivLu().solve(in.V);
  absvit::sparse::SolveOptions opts;
  opts.tol = 1e-12;
  opts.max_iters = 50'000'000;
  const MatrixXd got = at::sr_attention(in, 0.0, opts).output;
  EXPECT_LE((got - expected).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(SrAttention, LeastSquaresOnWellConditionedCases) {
  absvit::Rng rng(13);
  int checked = 0;
  for (int t = 0; t < 10; ++t) {
    at::AttentionInputs in{randn(12, 3, rng, 0.3), randn(12, 3, rng, 0.3), randn(12, 2, rng), 100u + t, 4};
    const MatrixXd phi_k = at::positive_random_features(in.K, 4, in.phi_seed);
    const MatrixXd phi_q = at::positive_random_features(in.Q, 4, in.phi_seed);
    Eigen::JacobiSVD<MatrixXd> svd(phi_k);
    const double cond = svd.singularValues()(0) / svd.singularValues().tail(1)(0);
    if (cond > 100) continue;
    ++checked;
    const MatrixXd normal = phi_k.transpose() * phi_k;
    const MatrixXd expected = phi_q * normal.ldlt().solve(phi_k.transpose() * in.V);
    absvit::sparse::SolveOptions opts;
    opts.tol = 1e-11;
    EXPECT_LE((at::sr_attention(in, 0.0, opts).output - expected).cwiseAbs().maxCoeff(), 1e-5) << "trial " << t;
  }
  EXPECT_GE(checked, 5);
}

TEST(SrAttention, ChannelObjectivesMatchOracle) {
  absvit::Rng rng(14);
  at::AttentionInputs in{randn(8, 4, rng, 0.4), randn(8, 4, rng, 0.4), randn(8, 4, rng), 8, 16};
  const auto res = at::sr_attention(in, 0.05);
  const MatrixXd phi_k = at::positive_random_features(in.K, 16, 8);
  for (Eigen::Index j = 0; j < 4; ++j) {
    absvit::sparse::SRProblem p{phi_k, in.V.col(j), 0.05};
    const double ours = absvit::sparse::objective(p, res.codes.col(j));
    EXPECT_LE(std::abs(ours - absvit::sparse::lasso_oracle(p).objective), 1e-5) << "channel " << j;
  }
}

TEST(SrAttention, PropagatesNonConvergence) {
  absvit::Rng rng(15);
  at::AttentionInputs in{randn(6, 3, rng), randn(6, 3, rng), randn(6, 2, rng), 1, 12};
  absvit::sparse::SolveOptions opts;
  opts.max_iters = 3;
  EXPECT_THROW(at::sr_attention(in, 0.01, opts), absvit::sparse::ConvergenceError);
}

class TopDownAttentionTest : public ::testing::TestWithParam<at::TdMode> {};

TEST_P(TopDownAttentionTest, ZeroSignalMatchesPlainAttention) {
  absvit::Rng rng(21);
  const auto proj = random_projections(8, 2, rng);
  const MatrixXd x = randn(6, 8, rng);
  const auto td = at::topdown_attention(x, MatrixXd::Zero(6, 8), GetParam(), proj);
  // Plain multi-head attention assembled from softmax_attention per head.
  MatrixXd mixed(6, 8);
  for (int h = 0; h < 2; ++h) {
    const auto cols = Eigen::seqN(4 * h, 4);
    at::AttentionInputs in{(x * proj.W_Q)(Eigen::all, cols) / 2.0, (x * proj.W_K)(Eigen::all, cols),
                           (x * proj.W_V)(Eigen::all, cols)};
    mixed(Eigen::all, cols) = at::softmax_attention(in);
  }
  MatrixXd expected = mixed * proj.W_O;
  expected.rowwise() += proj.b_O.transpose();
  EXPECT_LE((td.output - expected).cwiseAbs().maxCoeff(), 1e-12);
}

INSTANTIATE_TEST_SUITE_P(Modes, TopDownAttentionTest, ::testing::Values(at::TdMode::value_only, at::TdMode::qkv),
                         [](const auto& info) { return std::string(at::td_mode_name(info.param)); });

TEST(TopDownAttention, ValueOnlyLeavesWeightsBitIdentical) {
  absvit::Rng rng(22);
  for (int t = 0; t < 20; ++t) {
    const auto proj = random_projections(8, 4, rng);
    const MatrixXd x = randn(7, 8, rng);
    const MatrixXd td = randn(7, 8, rng, 3.0);
    const auto off = at::topdown_attention(x, MatrixXd::Zero(7, 8), at::TdMode::value_only, proj);
    const auto on = at::topdown_attention(x, td, at::TdMode::value_only, proj);
    for (std::size_t h = 0; h < off.weights.size(); ++h) {
      EXPECT_TRUE(off.weights[h] == on.weights[h]) << "trial " << t << " head " << h;
      for (Eigen::Index i = 0; i < 7; ++i) {
        Eigen::Index a, b;
        off.weights[h].row(i).maxCoeff(&a);
        on.weights[h].row(i).maxCoeff(&b);
        EXPECT_EQ(a, b);
      }
    }
    EXPECT_GT((on.output - off.output).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(TopDownAttention, QkvModeChangesWeights) {
  absvit::Rng rng(23);
  const auto proj = random_projections(8, 2, rng);
  const MatrixXd x = randn(5, 8, rng);
  const auto off = at::topdown_attention(x, MatrixXd::Zero(5, 8), at::TdMode::qkv, proj);
  const auto on = at::topdown_attention(x, randn(5, 8, rng), at::TdMode::qkv, proj);
  EXPECT_FALSE(off.weights[0] == on.weights[0]);
}

TEST(TopDownAttention, ValueOnlyOutputIsLinearInSignal) {
  absvit::Rng rng(24);
  for (int t = 0; t < 20; ++t) {
    const auto proj = random_projections(8, 2, rng);
    const MatrixXd x = randn(6, 8, rng);
    const MatrixXd a = randn(6, 8, rng);
    const MatrixXd b = randn(6, 8, rng);
    auto run = [&](const MatrixXd& td) { return at::topdown_attention(x, td, at::TdMode::value_only, proj).output; };
    const MatrixXd base = run(MatrixXd::Zero(6, 8));
    const MatrixXd lhs = run(a + b) - base;
    const MatrixXd rhs = (run(a) - base) + (run(b) - base);
    EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(TopDownAttention, PostProjectionAddsSignalToValues) {
  absvit::Rng rng(25);
  auto proj = random_projections(4, 1, rng);
  proj.b_O.resize(0);
  const MatrixXd x = randn(3, 4, rng);
  const MatrixXd td = randn(3, 4, rng);
  const auto out = at::topdown_attention(x, td, at::TdMode::value_only, proj, at::TdInjection::post_projection);
  const MatrixXd expected = out.weights[0] * (x * proj.W_V + td) * proj.W_O;
  EXPECT_LE((out.output - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TopDownAttention, RejectsBadShapes) {
  absvit::Rng rng(26);
  const auto proj = random_projections(8, 3, rng);
  const MatrixXd x = randn(4, 8, rng);
  EXPECT_THROW(at::topdown_attention(x, MatrixXd::Zero(4, 8), at::TdMode::qkv, proj), std::invalid_argument);
  auto ok = random_projections(8, 2, rng);
  EXPECT_THROW(at::topdown_attention(x, MatrixXd::Zero(3, 8), at::TdMode::qkv, ok), std::invalid_argument);
  EXPECT_THROW(at::parse_td_mode("bogus"), std::invalid_argument);
}
