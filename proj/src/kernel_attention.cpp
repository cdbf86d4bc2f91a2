// SPDX-License-Identifier: Apache-2.0

#include "absvit/kernel_attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "absvit/rng.hpp"

namespace absvit::attn {

namespace {

std::string dims(const MatrixXd& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

void AttentionInputs::validate() const {
  require(Q.rows() == K.rows() && K.rows() == V.rows(),
          "attention inputs disagree on token count: Q " + dims(Q) + ", K " + dims(K) + ", V " + dims(V));
  require(Q.cols() == K.cols(), "query and key widths differ: Q " + dims(Q) + ", K " + dims(K));
  require(Q.rows() >= 1, "attention needs at least one token");
}

const char* td_mode_name(TdMode mode) { return mode == TdMode::value_only ? "value_only" : "qkv"; }

TdMode parse_td_mode(const std::string& name) {
  if (name == "value_only") return TdMode::value_only;
  if (name == "qkv") return TdMode::qkv;
  throw std::invalid_argument("unknown td mode '" + name + "' (expected value_only or qkv)");
}

MatrixXd random_feature_directions(Index features, Index channels, std::uint64_t seed) {
  require(features >= 1, "random feature count must be >= 1");
  Rng rng(seed);
  MatrixXd w(features, channels);
  for (Index r = 0; r < features; ++r)
    for (Index c = 0; c < channels; ++c) w(r, c) = rng.normal();
  return w;
}

MatrixXd positive_random_features(const MatrixXd& X, Index features, std::uint64_t seed) {
  const MatrixXd w = random_feature_directions(features, X.cols(), seed);
  MatrixXd proj = X * w.transpose();
  const double scale = 1.0 / std::sqrt(static_cast<double>(features));
  for (Index i = 0; i < X.rows(); ++i) {
    const double half_sq = 0.5 * X.row(i).squaredNorm();
    for (Index r = 0; r < features; ++r) proj(i, r) = scale * std::exp(proj(i, r) - half_sq);
  }
  return proj;
}

MatrixXd softmax_rows(const MatrixXd& logits) {
  MatrixXd out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    double total = 0.0;
    for (Index j = 0; j < logits.cols(); ++j) total += (out(i, j) = std::exp(logits(i, j) - m));
    out.row(i) /= total;
  }
  return out;
}

MatrixXd softmax_attention(const AttentionInputs& inputs) {
  inputs.validate();
  return softmax_rows(inputs.Q * inputs.K.transpose()) * inputs.V;
}

SRAttentionResult sr_attention(const AttentionInputs& inputs, double lambda, const sparse::SolveOptions& options) {
  inputs.validate();
  require(lambda >= 0, "sparsity lambda must be >= 0");
  const MatrixXd phi_k = positive_random_features(inputs.K, inputs.features, inputs.phi_seed);
  const MatrixXd phi_q = positive_random_features(inputs.Q, inputs.features, inputs.phi_seed);
  SRAttentionResult result;
  result.codes.resize(inputs.features, inputs.V.cols());
  for (Index j = 0; j < inputs.V.cols(); ++j) {
    sparse::SRProblem problem{phi_k, inputs.V.col(j), lambda};
    auto solved = sparse::solve_sparse_code(problem, options);
    if (!solved.converged) {
      throw sparse::ConvergenceError("sparse reconstruction of value channel " + std::to_string(j) +
                                     " did not converge in " + std::to_string(solved.iterations) + " iterations");
    }
    result.codes.col(j) = solved.code;
  }
  result.output = phi_q * result.codes;
  return result;
}

TopDownAttentionResult topdown_attention(const MatrixXd& tokens, const MatrixXd& td, TdMode mode,
                                         const AttentionProjections& proj, TdInjection injection) {
  const Index n = tokens.rows();
  const Index c = tokens.cols();
  require(td.rows() == n && td.cols() == c, "top-down signal " + dims(td) + " does not match tokens " + dims(tokens));
  for (const MatrixXd* w : {&proj.W_Q, &proj.W_K, &proj.W_V, &proj.W_O})
    require(w->rows() == c && w->cols() == c, "projection " + dims(*w) + " must be " + std::to_string(c) + "x" +
                                                  std::to_string(c));
  require(proj.heads >= 1 && c % proj.heads == 0, "heads must divide the channel count");
  require(proj.b_O.size() == 0 || proj.b_O.size() == c, "output bias has the wrong length");

  const bool pre = injection == TdInjection::pre_projection;
  const MatrixXd with_td = tokens + td;
  auto project = [&](const MatrixXd& w, bool inject) -> MatrixXd {
    if (!inject) return tokens * w;
    return pre ? MatrixXd(with_td * w) : MatrixXd(tokens * w + td);
  };
  const bool all = mode == TdMode::qkv;
  const MatrixXd Q = project(proj.W_Q, all);
  const MatrixXd K = project(proj.W_K, all);
  const MatrixXd V = project(proj.W_V, true);

  const Index dh = c / proj.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  TopDownAttentionResult result;
  MatrixXd mixed(n, c);
  for (Index h = 0; h < proj.heads; ++h) {
    const auto cols = Eigen::seqN(h * dh, dh);
    MatrixXd weights = softmax_rows((Q(Eigen::all, cols) * scale) * K(Eigen::all, cols).transpose());
    mixed(Eigen::all, cols) = weights * V(Eigen::all, cols);
    result.weights.push_back(std::move(weights));
  }
  result.output = mixed * proj.W_O;
  if (proj.b_O.size() > 0) result.output.rowwise() += proj.b_O.transpose();
  return result;
}

}  // namespace absvit::attn
