// SPDX-License-Identifier: Apache-2.0
//
// Hierarchical analysis-by-synthesis model. Layer l holds a dictionary P_l and
// a sparse code u_l with z_l = P_l u_l; the observation h plays the role of
// z_0. Decoders g_l map z_{l+1} to a prediction of z_l.
//
// Indexing: dictionaries()[l - 1] is P_l for l = 1..L, decoders()[l] is g_l
// for l = 0..L-1, and codes[l - 1] is u_l.

#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "absvit/rng.hpp"
#include "absvit/sparse_coding.hpp"

namespace absvit::abs {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using Codes = std::vector<VectorXd>;

enum class DecoderKind { tanh, linear };

/// v -> tanh(A v + b) or A v + b.
struct Decoder {
  MatrixXd A;
  VectorXd b;
  DecoderKind kind = DecoderKind::tanh;

  VectorXd apply(const VectorXd& v) const;
  MatrixXd jacobian(const VectorXd& v) const;
};

struct Hierarchy {
  std::vector<MatrixXd> dictionaries;  // P_1..P_L
  std::vector<Decoder> decoders;       // g_0..g_{L-1}
  double lambda = 0.0;
  double prior_precision = 1.0;  // Gaussian prior on u_L; 0 disables it

  Index layers() const { return static_cast<Index>(dictionaries.size()); }
  const MatrixXd& P(Index l) const { return dictionaries.at(l - 1); }
  const Decoder& g(Index l) const { return decoders.at(l); }
  Index observation_size() const { return decoders.empty() ? 0 : decoders.front().A.rows(); }

  /// Throws std::invalid_argument if the dimension chain is inconsistent.
  void validate() const;
  void validate(const Codes& codes, const VectorXd& h) const;
};

/// dims = {d_0, d_1, ..., d_L}, atoms = {d'_1, ..., d'_L}. Dictionary columns
/// are unit norm; decoder weights are scaled by 1/sqrt(fan-in).
Hierarchy random_hierarchy(const std::vector<Index>& dims, const std::vector<Index>& atoms, DecoderKind kind,
                           double lambda, Rng& rng);
Codes random_codes(const Hierarchy& hier, Rng& rng, double sparsity = 0.3);

/// z_1..z_L with z_l = P_l u_l (index 0 holds h).
std::vector<VectorXd> layer_states(const Hierarchy& hier, const Codes& codes, const VectorXd& h);

double log_joint(const Hierarchy& hier, const Codes& codes, const VectorXd& h);

struct GenerateResult {
  std::vector<VectorXd> z;  // z_0..z_L
  Codes codes;              // u_1..u_L
};

/// Mode generation from the top code. Intermediate codes are sparse
/// reconstructions of the decoder prediction; z_0 = g_0(z_1).
/// Throws sparse::ConvergenceError when a layer's solve does not converge.
GenerateResult generate(const Hierarchy& hier, const VectorXd& top_code, const sparse::SolveOptions& options = {});

struct LayerGradientParts {
  VectorXd x_bu;              // J^T z_{l-1}, J = Jacobian of g_{l-1} at P_l u_l
  VectorXd x_td;              // g_l(z_{l+1}); zero at the top layer
  VectorXd reg_grad;          // P_l^T J^T g_{l-1}(P_l u_l)
  VectorXd sparsity_subgrad;  // -lambda sign(u_l), zero where u_l is zero
  VectorXd prior_grad;        // -precision u_L at the top layer, zero elsewhere
  MatrixXd P;
  VectorXd code;
  bool top = false;

  /// P^T (x_td + x_bu) - P^T P u - reg_grad + prior_grad, without the
  /// quadratic self term at the top layer (no layer above predicts z_L).
  VectorXd smooth_gradient() const;
};

/// Throws std::out_of_range unless 1 <= layer <= L.
LayerGradientParts decompose_gradient(const Hierarchy& hier, const Codes& codes, const VectorXd& h, Index layer);

/// Largest violation of the optimality conditions of the log joint at layer l.
double layer_kkt_residual(const Hierarchy& hier, const Codes& codes, const VectorXd& h, Index layer);

/// One simultaneous proximal ascent step on every layer not marked frozen.
Codes map_ascent_step(const Hierarchy& hier, const Codes& codes, const VectorXd& h, double eta,
                      const std::vector<bool>& frozen = {});

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MapAscentOptions {
  double eta0 = 0.1;
  int max_halvings = 40;
  std::size_t max_steps = 5000;
  double tol = 1e-10;  // stop when the largest code change falls below this
  std::vector<bool> frozen;
};

struct MapAscentResult {
  Codes codes;
  std::vector<double> energy;  // log joint after each accepted step, index 0 initial
  std::size_t steps = 0;
  bool converged = false;
  double final_eta = 0.0;
};

/// Backtracking proximal ascent: eta halves whenever a step would lower the
/// log joint. Throws DivergenceError after 10 consecutive steps that lower it
/// even at the smallest step size.
MapAscentResult map_ascent(const Hierarchy& hier, const VectorXd& h, Codes codes, const MapAscentOptions& options = {});

/// Gradient of the log joint w.r.t. every code by reverse-mode autodiff over
/// the numerics graph. Independent of decompose_gradient.
Codes autodiff_gradient(const Hierarchy& hier, const Codes& codes, const VectorXd& h);

struct IdentityReport {
  std::vector<double> trial_errors;
  double max_error = 0.0;
  std::size_t coordinates_checked = 0;

  std::string text() const;
};

/// Compares the decomposed gradient against autodiff on random hierarchies,
/// using coordinates with |u_i| > 1e-3 (all coordinates when lambda = 0).
/// Error is |a - b| / max(1, |b|).
IdentityReport verify_identity(DecoderKind kind, std::size_t trials, std::uint64_t seed, double lambda = 0.1,
                               Index layers = 3, Index max_dim = 8);

}  // namespace absvit::abs
