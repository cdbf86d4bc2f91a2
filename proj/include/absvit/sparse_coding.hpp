// SPDX-License-Identifier: Apache-2.0
//
// Sparse reconstruction: min_c 1/2 ||P c - x||^2 + lambda ||c||_1, solved with
// locally competitive (lateral inhibition) dynamics and checked against an
// independent iterative soft-thresholding oracle and the KKT conditions.

#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <stdexcept>

namespace absvit::sparse {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct SRProblem {
  MatrixXd dictionary;  // d x d', one template per column
  VectorXd input;       // length d
  double lambda = 0.0;

  /// Throws std::invalid_argument on negative lambda, empty or
  /// non-finite dictionary, or a length mismatch.
  void validate() const;
};

/// Pre-threshold variable u and its thresholded code g_lambda(u).
struct SparseCodeState {
  VectorXd u;
  VectorXd code;
  std::size_t step = 0;

  static SparseCodeState zeros(Eigen::Index atoms);
};

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double soft_threshold(double u, double lambda);
VectorXd soft_threshold(const VectorXd& u, double lambda);

/// 1/2 ||P c - x||^2 + lambda ||c||_1
double objective(const SRProblem& problem, const VectorXd& code);

/// Largest eigenvalue of P^T P by power iteration.
double lipschitz_constant(const MatrixXd& dictionary);

/// One explicit Euler step of du/dt = -u - (P^T P - I) c + P^T x.
SparseCodeState lca_step(const SRProblem& problem, const SparseCodeState& state, double eta);

/// Largest step the solver accepts: min(1, 1/L). Above 1 the leak term
/// overshoots and the objective can rise even when L < 1.
double max_step_size(const MatrixXd& dictionary);
/// 0.9 * max_step_size.
double default_step_size(const MatrixXd& dictionary);

struct SolveOptions {
  double eta = 0.0;  // <= 0 selects default_step_size
  std::size_t max_iters = 1'000'000;
  double tol = 1e-7;
#ifdef NDEBUG
  bool check_energy = false;
#else
  bool check_energy = true;
#endif
};

struct SolveResult {
  VectorXd code;
  std::size_t iterations = 0;
  bool converged = false;
  double objective = 0.0;
};

/// Iterates lca_step from u = 0 until the infinity-norm change of both u and
/// the code falls below tol, or max_iters is reached (converged = false).
/// Throws std::invalid_argument when eta exceeds max_step_size.
SolveResult solve_sparse_code(const SRProblem& problem, const SolveOptions& options = {});

/// Proximal gradient with step 1/L from c = 0; stops when the objective
/// changes by less than tol between iterations.
SolveResult lasso_oracle(const SRProblem& problem, std::size_t max_iters = 1'000'000, double tol = 1e-15);

/// Largest violation of the optimality conditions: |grad_i| <= lambda where
/// c_i = 0 and grad_i = -lambda sgn(c_i) elsewhere, grad = P^T (P c - x).
double kkt_residual(const SRProblem& problem, const VectorXd& code);

}  // namespace absvit::sparse
