// SPDX-License-Identifier: Apache-2.0
//
// Self-attention in three forms: plain softmax attention, its random-feature
// sparse-reconstruction counterpart, and top-down attention where a token-space
// signal is injected into the values (or into queries, keys and values).
// Token matrices are n tokens by c channels throughout, with projections
// applied on the right (Q = X W_Q).

#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "absvit/sparse_coding.hpp"

namespace absvit::attn {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct AttentionInputs {
  MatrixXd Q, K, V;
  std::uint64_t phi_seed = 0;
  Index features = 0;  // d', used by sr_attention

  void validate() const;
};

enum class TdMode { value_only, qkv };
enum class TdInjection { pre_projection, post_projection };

const char* td_mode_name(TdMode mode);
/// Accepts "value_only" or "qkv"; throws std::invalid_argument otherwise.
TdMode parse_td_mode(const std::string& name);

struct AttentionProjections {
  MatrixXd W_Q, W_K, W_V, W_O;  // c x c
  VectorXd b_O;                 // empty means no output bias
  Index heads = 1;
};

/// Gaussian feature directions w_r ~ N(0, I), one per row, fixed by seed.
MatrixXd random_feature_directions(Index features, Index channels, std::uint64_t seed);

/// Phi(x)_r = exp(w_r^T x - ||x||^2 / 2) / sqrt(d'), so that
/// E[Phi(q) Phi(k)^T] = exp(q^T k).
MatrixXd positive_random_features(const MatrixXd& X, Index features, std::uint64_t seed);

MatrixXd softmax_rows(const MatrixXd& logits);

/// softmax(Q K^T) V without any temperature.
MatrixXd softmax_attention(const AttentionInputs& inputs);

struct SRAttentionResult {
  MatrixXd output;  // Phi(Q) U
  MatrixXd codes;   // U, d' x c
};

/// Channel-wise sparse reconstruction of V over the dictionary Phi(K).
/// Throws sparse::ConvergenceError if any channel fails to converge.
SRAttentionResult sr_attention(const AttentionInputs& inputs, double lambda,
                               const sparse::SolveOptions& options = {});

struct TopDownAttentionResult {
  MatrixXd output;                // n x c
  std::vector<MatrixXd> weights;  // per head, n x n
};

/// Multi-head attention with a top-down token signal. Heads split channels
/// evenly and each head scales queries by 1/sqrt(c / heads).
TopDownAttentionResult topdown_attention(const MatrixXd& tokens, const MatrixXd& td, TdMode mode,
                                         const AttentionProjections& proj,
                                         TdInjection injection = TdInjection::pre_projection);

}  // namespace absvit::attn
