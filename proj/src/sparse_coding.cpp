// SPDX-License-Identifier: Apache-2.0

#include "absvit/sparse_coding.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "absvit/numerics/tensor.hpp"
#include "absvit/rng.hpp"

namespace absvit::sparse {

void SRProblem::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("sparsity lambda must be >= 0");
  if (dictionary.rows() < 1 || dictionary.cols() < 1) throw std::invalid_argument("empty dictionary");
  if (dictionary.rows() != input.size()) {
    throw std::invalid_argument("dictionary has " + std::to_string(dictionary.rows()) +
                                " rows but input has length " + std::to_string(input.size()));
  }
  if (!dictionary.allFinite() || !input.allFinite()) throw std::invalid_argument("non-finite problem data");
}

SparseCodeState SparseCodeState::zeros(Eigen::Index atoms) {
  return SparseCodeState{VectorXd::Zero(atoms), VectorXd::Zero(atoms), 0};
}

double soft_threshold(double u, double lambda) {
  if (lambda < 0) throw std::invalid_argument("soft threshold requires lambda >= 0");
  const double m = std::abs(u) - lambda;
  if (m <= 0) return 0.0;
  return u > 0 ? m : -m;
}

VectorXd soft_threshold(const VectorXd& u, double lambda) {
  if (lambda < 0) throw std::invalid_argument("soft threshold requires lambda >= 0");
  VectorXd out(u.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) out[i] = soft_threshold(u[i], lambda);
  return out;
}

double objective(const SRProblem& problem, const VectorXd& code) {
  return 0.5 * (problem.dictionary * code - problem.input).squaredNorm() + problem.lambda * code.lpNorm<1>();
}

double lipschitz_constant(const MatrixXd& dictionary) {
  const MatrixXd gram = dictionary.transpose() * dictionary;
  Rng rng(0x5eed);
  VectorXd v(gram.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = 1.0 + rng.uniform();
  v.normalize();
  double eig = 0.0;
  for (int it = 0; it < 100000; ++it) {
    VectorXd w = gram * v;
    const double next = w.norm();
    if (next == 0.0) return 0.0;
    v = w / next;
    if (std::abs(next - eig) <= 1e-14 * next) return next;
    eig = next;
  }
  return eig;
}

double max_step_size(const MatrixXd& dictionary) {
  return 1.0 / std::max(1.0, lipschitz_constant(dictionary));
}

double default_step_size(const MatrixXd& dictionary) { return 0.9 * max_step_size(dictionary); }

namespace {

// Shared by the step and the solver so the Gram matrix is built once.
struct LcaOperator {
  MatrixXd inhibition;  // P^T P - I
  VectorXd drive;       // P^T x
  explicit LcaOperator(const SRProblem& p)
      : inhibition(p.dictionary.transpose() * p.dictionary -
                   MatrixXd::Identity(p.dictionary.cols(), p.dictionary.cols())),
        drive(p.dictionary.transpose() * p.input) {}

  void step(const SRProblem& p, SparseCodeState& s, double eta) const {
    s.u += eta * (-s.u - inhibition * s.code + drive);
    if (!s.u.allFinite()) throw num::NumericError("sparse code dynamics diverged; step size too large");
    s.code = soft_threshold(s.u, p.lambda);
    ++s.step;
  }
};

}  // namespace

SparseCodeState lca_step(const SRProblem& problem, const SparseCodeState& state, double eta) {
  problem.validate();
  if (!(eta > 0)) throw std::invalid_argument("step size must be > 0");
  if (state.u.size() != problem.dictionary.cols() || state.code.size() != state.u.size()) {
    throw std::invalid_argument("sparse code state does not match dictionary width");
  }
  SparseCodeState next = state;
  LcaOperator(problem).step(problem, next, eta);
  return next;
}

SolveResult solve_sparse_code(const SRProblem& problem, const SolveOptions& options) {
  problem.validate();
  if (!(options.tol > 0)) throw std::invalid_argument("tolerance must be > 0");
  const double limit = max_step_size(problem.dictionary);
  const double eta = options.eta > 0 ? options.eta : 0.9 * limit;
  if (eta > limit * (1.0 + 1e-12)) throw std::invalid_argument("step size exceeds min(1, 1/L) for this dictionary");

  const LcaOperator op(problem);
  SparseCodeState state = SparseCodeState::zeros(problem.dictionary.cols());
  double energy = objective(problem, state.code);
  SolveResult result;
  for (std::size_t it = 0; it < options.max_iters; ++it) {
    const VectorXd prev_u = state.u;
    const VectorXd prev_code = state.code;
    op.step(problem, state, eta);
    if (options.check_energy) {
      const double e = objective(problem, state.code);
      if (e > energy + 1e-12 * std::max(1.0, std::abs(energy))) {
        throw num::NumericError("sparse code energy increased at iteration " + std::to_string(it));
      }
      energy = e;
    }
    const double change = std::max((state.u - prev_u).lpNorm<Eigen::Infinity>(),
                                    (state.code - prev_code).lpNorm<Eigen::Infinity>());
    if (change < options.tol) {
      result.converged = true;
      result.iterations = it + 1;
      break;
    }
  }
  if (!result.converged) result.iterations = options.max_iters;
  result.code = state.code;
  result.objective = objective(problem, result.code);
  return result;
}

SolveResult lasso_oracle(const SRProblem& problem, std::size_t max_iters, double tol) {
  problem.validate();
  const double lip = lipschitz_constant(problem.dictionary);
  SolveResult result;
  VectorXd code = VectorXd::Zero(problem.dictionary.cols());
  if (lip == 0.0) {
    result.code = code;
    result.converged = true;
    result.objective = objective(problem, code);
    return result;
  }
  const MatrixXd& P = problem.dictionary;
  double f = objective(problem, code);
  for (std::size_t it = 0; it < max_iters; ++it) {
    const VectorXd grad = P.transpose() * (P * code - problem.input);
    code = soft_threshold(code - grad / lip, problem.lambda / lip);
    const double next = objective(problem, code);
    if (!std::isfinite(next)) throw num::NumericError("proximal gradient diverged");
    const bool stalled = std::abs(f - next) < tol;
    f = next;
    if (stalled) {
      result.converged = true;
      result.iterations = it + 1;
      break;
    }
  }
  if (!result.converged) result.iterations = max_iters;
  result.code = code;
  result.objective = f;
  return result;
}

double kkt_residual(const SRProblem& problem, const VectorXd& code) {
  problem.validate();
  const VectorXd grad = problem.dictionary.transpose() * (problem.dictionary * code - problem.input);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < code.size(); ++i) {
    const double v = code[i] == 0.0 ? std::max(0.0, std::abs(grad[i]) - problem.lambda)
                                    : std::abs(grad[i] + problem.lambda * (code[i] > 0 ? 1.0 : -1.0));
    worst = std::max(worst, v);
  }
  return worst;
}

}  // namespace absvit::sparse
