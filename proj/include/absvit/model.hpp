// SPDX-License-Identifier: Apache-2.0
//
// A ViT encoder with per-layer linear feedback decoders and a prior
// vector that reweights output tokens before they are fed back.
//
// One AbsVit instance owns a computation graph for a fixed batch size. The
// graph runs the whole inference cycle:
//   1. feedforward pass without top-down input,
//   2. token modulation w_i = alpha * clamp(cos(xi, z_L^i), 0, 1),
//   3. cascaded feedback decoding t_L = w * z_L, t_l = t_{l+1} D_l,
//   4. a second feedforward pass with t_l added to block l's attention input.
// alpha, the prior selector and an external prior are graph inputs, so one
// graph serves every steering condition.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "absvit/kernel_attention.hpp"
#include "absvit/numerics/graph.hpp"
#include "absvit/numerics/tensor.hpp"

namespace absvit::model {

using num::NodeId;
using num::Shape;
using num::Tensor;

template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

struct ModelConfig {
  int image_size = 32;
  int patch = 4;
  int layers = 4;
  int dim = 64;
  int heads = 4;
  int mlp_ratio = 4;
  int classes = 4;
  double alpha = 1.0;
  attn::TdMode td_mode = attn::TdMode::value_only;
  attn::TdInjection td_injection = attn::TdInjection::pre_projection;

  /// Throws std::invalid_argument on any violated invariant.
  void validate() const;
  int grid() const { return image_size / patch; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch * patch; }
  int head_dim() const { return dim / heads; }
};

enum class ReconMetric { squared_l2, cosine };
enum class PriorKind { uninformative, clip };

const char* recon_metric_name(ReconMetric m);
const char* prior_kind_name(PriorKind p);
ReconMetric parse_recon_metric(const std::string& s);
PriorKind parse_prior_kind(const std::string& s);

struct LossWeights {
  double w_sup = 1.0;
  double w_var = 0.1;
  ReconMetric recon_metric = ReconMetric::squared_l2;
  PriorKind prior = PriorKind::uninformative;

  void validate() const;
};

/// Deterministic initialization: Xavier-normal matrices, zero biases, unit
/// layer-norm gains, N(0, 0.02^2) positional embeddings, unit-norm prior.
ParamMap<float> init_params(const ModelConfig& config, std::uint64_t seed);

/// Expected name -> shape for every parameter.
std::map<std::string, Shape> param_shapes(const ModelConfig& config);

/// Whether decoupled weight decay applies (matrices yes; biases, gains,
/// positional embeddings and the prior no).
bool decays(const std::string& param_name);

template <typename T>
ParamMap<T> cast_params(const ParamMap<float>& params) {
  ParamMap<T> out;
  for (const auto& [k, v] : params) out.emplace(k, v.template cast<T>());
  return out;
}

enum class Cycle {
  full,         // the four-step inference cycle
  feedforward,  // a single plain ViT pass, no feedback path
};

enum class TraceLevel {
  minimal,  // logits and loss terms
  full,     // every per-layer state, signal and attention matrix
};

struct BuildOptions {
  std::size_t batch = 1;
  Cycle cycle = Cycle::full;
  TraceLevel trace = TraceLevel::minimal;
  bool with_loss = false;
  LossWeights loss;
  /// Negative control only: adds this constant to every decoder output, which
  /// breaks the alpha = 0 reduction. Zero in any real model.
  double fault_decoder_bias = 0.0;
};

/// Which prior vector drives the modulation.
struct PriorSpec {
  enum class Kind { learned, external } kind = Kind::learned;
  std::vector<double> vector;  // used when external, length dim

  static PriorSpec learned() { return {}; }
  static PriorSpec external(std::vector<double> v) { return {Kind::external, std::move(v)}; }
};

/// Output names produced at TraceLevel::full (per layer l = 1..L):
///   z1.l / z4.l      block outputs of passes 1 and 4, [B*N, c]
///   attn1.l / attn4.l attention probabilities, [B*heads, N, N]
///   td.l             top-down signal delivered to block l, [B*N, c]
///   z0               patch pixels, [B*N, p*p]
///   x0_bu            attention input of block 1 (bottom-up), [B*N, c]
///   x0_td            t_1, the top-down signal into block 1, [B*N, c]
///   x0_td_pixels     D_0 applied to t_1, [B*N, p*p]
///   zL               final layer-normed tokens of the last pass, [B*N, c]
///   zL1              final layer-normed tokens of the first pass
///   token_weights    modulation weights, [B*N]
///   norm_map         per-token L2 norm of block L's output, [B*N]
///   pooled, logits   [B, c], [B, K]
/// and at every level: logits, plus loss, ce, recon, prior_loss when
/// with_loss is set.
template <typename T>
class AbsVit {
 public:
  AbsVit(const ModelConfig& config, const BuildOptions& options, const ParamMap<T>& params);

  const ModelConfig& config() const { return config_; }
  const BuildOptions& options() const { return options_; }
  num::Graph<T>& graph() { return graph_; }
  NodeId loss_node() const { return loss_; }

  /// images: [B, H, W]; labels required when built with a loss.
  std::map<std::string, Tensor<T>> bind(const Tensor<T>& images, double alpha, const PriorSpec& prior = {},
                                        const std::vector<int>& labels = {}) const;

  std::map<std::string, Tensor<T>> run(const Tensor<T>& images, double alpha, const PriorSpec& prior = {},
                                       const std::vector<int>& labels = {});

  void set_params(const ParamMap<T>& params);
  ParamMap<T> params() const;

 private:
  struct BlockNodes {
    NodeId ln1_g, ln1_b, wq, wk, wv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  NodeId linear(NodeId x, NodeId w, NodeId b);
  NodeId affine_norm(NodeId x, NodeId gain, NodeId bias);
  NodeId embed(NodeId patches);
  NodeId attention(NodeId a, std::optional<NodeId> td, const BlockNodes& blk, NodeId* probs_out);
  NodeId block(NodeId x, std::optional<NodeId> td, const BlockNodes& blk, NodeId* probs_out, NodeId* attn_in_out);
  NodeId modulate(NodeId z_final, NodeId prior, NodeId* weights_out);
  std::vector<NodeId> feedback_decode(NodeId modulated);
  NodeId pool(NodeId z_final);
  void build_loss(const std::vector<NodeId>& z, NodeId pooled, NodeId logits, NodeId prior);
  void output(const std::string& name, NodeId id, bool always = false);

  ModelConfig config_;
  BuildOptions options_;
  num::Graph<T> graph_;
  std::size_t rows_ = 0;  // B * N
  NodeId loss_ = 0;

  NodeId embed_w_, embed_b_, pos_, norm_g_, norm_b_, head_w_, head_b_, prior_;
  std::vector<BlockNodes> blocks_;
  std::vector<NodeId> decoders_;  // D_0..D_{L-1}
};

extern template class AbsVit<float>;
extern template class AbsVit<double>;

/// [B, H, W] images to [B*N, p*p] patch rows (row-major patches, raster order).
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, int patch);

}  // namespace absvit::model
