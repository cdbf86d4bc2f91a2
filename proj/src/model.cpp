// SPDX-License-Identifier: Apache-2.0

#include "absvit/model.hpp"

#include <cmath>
#include <stdexcept>

#include "absvit/rng.hpp"

namespace absvit::model {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

std::string layer_key(const char* prefix, int l, const char* suffix) {
  return std::string(prefix) + "." + std::to_string(l) + "." + suffix;
}

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

}  // namespace

void ModelConfig::validate() const {
  require(image_size > 0 && patch > 0 && image_size % patch == 0, "image size must be a positive multiple of patch");
  require(layers >= 1, "layer count must be >= 1");
  require(dim >= 1 && heads >= 1 && dim % heads == 0, "token dim must be divisible by head count");
  require(mlp_ratio >= 1, "mlp ratio must be >= 1");
  require(classes >= 2, "need at least two classes");
  require(std::isfinite(alpha) && alpha >= 0, "alpha must be finite and >= 0");
}

const char* recon_metric_name(ReconMetric m) { return m == ReconMetric::squared_l2 ? "squared_l2" : "cosine"; }
const char* prior_kind_name(PriorKind p) { return p == PriorKind::uninformative ? "uninformative" : "clip"; }

ReconMetric parse_recon_metric(const std::string& s) {
  if (s == "squared_l2") return ReconMetric::squared_l2;
  if (s == "cosine") return ReconMetric::cosine;
  throw std::invalid_argument("unknown reconstruction metric '" + s + "' (expected squared_l2 or cosine)");
}

PriorKind parse_prior_kind(const std::string& s) {
  if (s == "uninformative") return PriorKind::uninformative;
  if (s == "clip") return PriorKind::clip;
  throw std::invalid_argument("unknown prior kind '" + s + "' (expected uninformative or clip)");
}

void LossWeights::validate() const {
  require(std::isfinite(w_sup) && w_sup >= 0, "w_sup must be finite and >= 0");
  require(std::isfinite(w_var) && w_var >= 0, "w_var must be finite and >= 0");
}

std::map<std::string, Shape> param_shapes(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t c = sz(cfg.dim), hid = sz(cfg.dim * cfg.mlp_ratio), pd = sz(cfg.patch_dim());
  std::map<std::string, Shape> s;
  s["embed.weight"] = {pd, c};
  s["embed.bias"] = {1, c};
  s["pos"] = {sz(cfg.tokens()), c};
  for (int l = 1; l <= cfg.layers; ++l) {
    s[layer_key("blocks", l, "ln1.gain")] = {1, c};
    s[layer_key("blocks", l, "ln1.bias")] = {1, c};
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) s[layer_key("blocks", l, w)] = {c, c};
    s[layer_key("blocks", l, "attn.bo")] = {1, c};
    s[layer_key("blocks", l, "ln2.gain")] = {1, c};
    s[layer_key("blocks", l, "ln2.bias")] = {1, c};
    s[layer_key("blocks", l, "mlp.w1")] = {c, hid};
    s[layer_key("blocks", l, "mlp.b1")] = {1, hid};
    s[layer_key("blocks", l, "mlp.w2")] = {hid, c};
    s[layer_key("blocks", l, "mlp.b2")] = {1, c};
  }
  s["norm.gain"] = {1, c};
  s["norm.bias"] = {1, c};
  s["head.weight"] = {sz(cfg.classes), c};
  s["head.bias"] = {1, sz(cfg.classes)};
  s["decoders.0.weight"] = {c, pd};
  for (int l = 1; l < cfg.layers; ++l) s[layer_key("decoders", l, "weight")] = {c, c};
  s["prior"] = {1, c};
  return s;
}

bool decays(const std::string& name) {
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  if (name == "pos" || name == "prior") return false;
  if (ends_with("gain") || ends_with("bias") || ends_with(".bo") || ends_with(".b1") || ends_with(".b2")) return false;
  return true;
}

ParamMap<float> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  const auto shapes = param_shapes(cfg);
  ParamMap<float> out;
  for (const auto& [name, shape] : shapes) {
    // Each tensor has its own stream so adding a parameter never shifts others.
    std::uint64_t h = 1469598103934665603ULL;
    for (char ch : name) h = (h ^ static_cast<unsigned char>(ch)) * 1099511628211ULL;
    Rng rng(mix_seed(seed, h));
    Tensor<float> t(shape, 0.0f);
    auto d = t.data();
    const auto ends_with = [&](const char* s) {
      const std::string suffix(s);
      return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with("gain")) {
      t.fill(1.0f);
    } else if (name == "pos") {
      for (auto& v : d) v = static_cast<float>(0.02 * rng.normal());
    } else if (name == "prior") {
      double norm = 0.0;
      std::vector<double> v(d.size());
      for (auto& x : v) {
        x = rng.normal();
        norm += x * x;
      }
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < v.size(); ++i) d[i] = static_cast<float>(v[i] / norm);
    } else if (decays(name)) {
      const double fan_in = static_cast<double>(shape[0]), fan_out = static_cast<double>(shape[1]);
      const double std = std::sqrt(2.0 / (fan_in + fan_out));
      for (auto& v : d) v = static_cast<float>(std * rng.normal());
    }
    out.emplace(name, std::move(t));
  }
  return out;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, int patch) {
  if (images.rank() != 3 || images.dim(1) % patch != 0 || images.dim(2) % patch != 0) {
    throw num::ShapeError("patchify expects [B, H, W] divisible by the patch size, got " + num::shape_str(images.shape()));
  }
  const std::size_t B = images.dim(0), H = images.dim(1), W = images.dim(2), p = sz(patch);
  const std::size_t gh = H / p, gw = W / p;
  Tensor<T> out({B * gh * gw, p * p}, T(0));
  auto o = out.data();
  const auto in = images.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t gy = 0; gy < gh; ++gy)
      for (std::size_t gx = 0; gx < gw; ++gx)
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            o[((b * gh + gy) * gw + gx) * p * p + py * p + px] = in[(b * H + gy * p + py) * W + gx * p + px];
  return out;
}

template <typename T>
AbsVit<T>::AbsVit(const ModelConfig& config, const BuildOptions& options, const ParamMap<T>& params)
    : config_(config), options_(options) {
  config_.validate();
  options_.loss.validate();
  require(options_.batch >= 1, "batch size must be >= 1");
  const auto shapes = param_shapes(config_);
  for (const auto& [name, shape] : shapes) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw num::ShapeError("parameter '" + name + "' has shape " + num::shape_str(it->second.shape()) + ", expected " +
                            num::shape_str(shape));
    }
  }
  for (const auto& [name, _] : params) {
    if (!shapes.count(name)) throw std::invalid_argument("unexpected parameter '" + name + "'");
  }

  auto& g = graph_;
  auto P = [&](const std::string& name) { return g.parameter(name, params.at(name)); };
  const std::size_t B = options_.batch, N = sz(config_.tokens()), c = sz(config_.dim);
  const int L = config_.layers;
  rows_ = B * N;

  embed_w_ = P("embed.weight");
  embed_b_ = P("embed.bias");
  pos_ = P("pos");
  for (int l = 1; l <= L; ++l) {
    auto k = [&](const char* s) { return P(layer_key("blocks", l, s)); };
    blocks_.push_back(BlockNodes{k("ln1.gain"), k("ln1.bias"), k("attn.wq"), k("attn.wk"), k("attn.wv"), k("attn.wo"),
                                 k("attn.bo"), k("ln2.gain"), k("ln2.bias"), k("mlp.w1"), k("mlp.b1"), k("mlp.w2"),
                                 k("mlp.b2")});
  }
  norm_g_ = P("norm.gain");
  norm_b_ = P("norm.bias");
  head_w_ = P("head.weight");
  head_b_ = P("head.bias");
  for (int l = 0; l < L; ++l) decoders_.push_back(P(layer_key("decoders", l, "weight")));
  prior_ = P("prior");

  const NodeId images = g.input("images", {B, sz(config_.image_size), sz(config_.image_size)});
  const NodeId alpha = g.input("alpha", {});
  const NodeId select = g.input("prior_select", {});
  const NodeId external = g.input("prior_external", {1, c});

  // Patchify as a graph op: [B, g, p, g, p] -> [B, g, g, p, p] -> [B*N, p*p].
  const std::size_t gr = sz(config_.grid()), p = sz(config_.patch);
  NodeId patches = g.reshape(images, {B, gr, p, gr, p});
  patches = g.permute(patches, {0, 1, 3, 2, 4});
  patches = g.reshape(patches, {rows_, p * p});
  output("z0", patches);

  const NodeId x_embed = embed(patches);

  // Pass 1.
  NodeId x = x_embed;
  std::vector<NodeId> pass1;
  for (int l = 1; l <= L; ++l) {
    NodeId probs = 0, attn_in = 0;
    x = block(x, std::nullopt, blocks_[l - 1], &probs, &attn_in);
    pass1.push_back(x);
    output("z1." + std::to_string(l), x);
    output("attn1." + std::to_string(l), probs);
    if (l == 1) output("x0_bu", attn_in);
  }
  const NodeId z_final1 = affine_norm(x, norm_g_, norm_b_);
  output("zL1", z_final1);

  NodeId z_final = z_final1;
  std::vector<NodeId> z_states{patches};  // z_0..z_{L-1}, then z_L appended below
  NodeId prior_vec = prior_;
  if (options_.cycle == Cycle::full) {
    // Pass 2: modulation. xi = (1 - s) * learned + s * external.
    const NodeId keep = g.add_scalar(g.scale(select, -1.0), 1.0);
    prior_vec = g.add(g.mul(keep, prior_), g.mul(select, external));
    NodeId weights = 0;
    const NodeId modulated = g.mul(alpha, modulate(z_final1, prior_vec, &weights));
    output("token_weights", g.mul(alpha, weights));

    // Pass 3: feedback.
    const std::vector<NodeId> td = feedback_decode(modulated);  // td[l] for l = 1..L, td[0] = D_0(t_1)
    output("x0_td_pixels", td[0]);
    output("x0_td", td[1]);

    // Pass 4.
    x = x_embed;
    for (int l = 1; l <= L; ++l) {
      NodeId probs = 0, attn_in = 0;
      x = block(x, td[l], blocks_[l - 1], &probs, &attn_in);
      output("z4." + std::to_string(l), x);
      output("attn4." + std::to_string(l), probs);
      output("td." + std::to_string(l), td[l]);
      if (l < L) z_states.push_back(x);
    }
    z_final = affine_norm(x, norm_g_, norm_b_);
  } else {
    z_states.insert(z_states.end(), pass1.begin(), pass1.end() - 1);
  }
  output("norm_map", g.l2_norm(x));
  output("zL", z_final);
  const NodeId pooled = pool(z_final);
  output("pooled", pooled);
  const NodeId logits =
      g.add(g.matmul(pooled, g.transpose(head_w_)), g.expand(head_b_, {B, sz(config_.classes)}));
  output("logits", logits, true);
  z_states.push_back(z_final);

  if (options_.with_loss) build_loss(z_states, pooled, logits, prior_vec);
}

template <typename T>
void AbsVit<T>::output(const std::string& name, NodeId id, bool always) {
  if (always || options_.trace == TraceLevel::full) graph_.mark_output(name, id);
}

template <typename T>
NodeId AbsVit<T>::linear(NodeId x, NodeId w, NodeId b) {
  const NodeId y = graph_.matmul(x, w);
  return graph_.add(y, graph_.expand(b, graph_.shape(y)));
}

template <typename T>
NodeId AbsVit<T>::affine_norm(NodeId x, NodeId gain, NodeId bias) {
  const NodeId y = graph_.layer_norm(x, 1e-6);
  const Shape s = graph_.shape(y);
  return graph_.add(graph_.mul(y, graph_.expand(gain, s)), graph_.expand(bias, s));
}

template <typename T>
NodeId AbsVit<T>::embed(NodeId patches) {
  auto& g = graph_;
  const std::size_t B = options_.batch, N = sz(config_.tokens()), c = sz(config_.dim);
  NodeId x = linear(patches, embed_w_, embed_b_);
  x = g.reshape(x, {B, N, c});
  x = g.add(x, g.expand(g.reshape(pos_, {1, N, c}), {B, N, c}));
  return g.reshape(x, {rows_, c});
}

template <typename T>
NodeId AbsVit<T>::attention(NodeId a, std::optional<NodeId> td, const BlockNodes& blk, NodeId* probs_out) {
  auto& g = graph_;
  const std::size_t B = options_.batch, N = sz(config_.tokens()), c = sz(config_.dim);
  const std::size_t H = sz(config_.heads), dh = sz(config_.head_dim());
  const bool pre = config_.td_injection == attn::TdInjection::pre_projection;
  const bool all = config_.td_mode == attn::TdMode::qkv;
  const NodeId injected = td && pre ? g.add(a, *td) : a;
  auto project = [&](NodeId w, bool inject) {
    if (!td || !inject) return g.matmul(a, w);
    return pre ? g.matmul(injected, w) : g.add(g.matmul(a, w), *td);
  };
  const NodeId q = project(blk.wq, all);
  const NodeId k = project(blk.wk, all);
  const NodeId v = project(blk.wv, true);
  auto split = [&](NodeId t) {
    t = g.reshape(t, {B, N, H, dh});
    t = g.permute(t, {0, 2, 1, 3});
    return g.reshape(t, {B * H, N, dh});
  };
  const NodeId qh = g.scale(split(q), 1.0 / std::sqrt(static_cast<double>(dh)));
  const NodeId probs = g.softmax(g.matmul(qh, g.transpose(split(k))));
  *probs_out = probs;
  NodeId mixed = g.matmul(probs, split(v));
  mixed = g.reshape(mixed, {B, H, N, dh});
  mixed = g.permute(mixed, {0, 2, 1, 3});
  mixed = g.reshape(mixed, {rows_, c});
  return linear(mixed, blk.wo, blk.bo);
}

template <typename T>
NodeId AbsVit<T>::block(NodeId x, std::optional<NodeId> td, const BlockNodes& blk, NodeId* probs_out,
                        NodeId* attn_in_out) {
  auto& g = graph_;
  const NodeId a = affine_norm(x, blk.ln1_g, blk.ln1_b);
  *attn_in_out = a;
  x = g.add(x, attention(a, td, blk, probs_out));
  const NodeId m = affine_norm(x, blk.ln2_g, blk.ln2_b);
  return g.add(x, linear(g.gelu(linear(m, blk.w1, blk.b1)), blk.w2, blk.b2));
}

template <typename T>
NodeId AbsVit<T>::modulate(NodeId z_final, NodeId prior, NodeId* weights_out) {
  auto& g = graph_;
  const std::size_t c = sz(config_.dim);
  const NodeId sim = g.clamp(g.cosine(z_final, g.expand(prior, {rows_, c})), 0.0, 1.0);
  *weights_out = sim;
  return g.mul(g.expand(g.reshape(sim, {rows_, 1}), {rows_, c}), z_final);
}

template <typename T>
std::vector<NodeId> AbsVit<T>::feedback_decode(NodeId modulated) {
  const int L = config_.layers;
  std::vector<NodeId> t(L + 1);
  t[L] = modulated;
  const double fault = options_.fault_decoder_bias;
  auto decode = [&](NodeId x, int l) {
    const NodeId y = graph_.matmul(x, decoders_[l]);
    return fault != 0.0 ? graph_.add_scalar(y, fault) : y;
  };
  for (int l = L - 1; l >= 1; --l) t[l] = decode(t[l + 1], l);
  t[0] = decode(t[1], 0);
  return t;
}

template <typename T>
NodeId AbsVit<T>::pool(NodeId z_final) {
  const std::size_t B = options_.batch, N = sz(config_.tokens()), c = sz(config_.dim);
  return graph_.mean(graph_.reshape(z_final, {B, N, c}), 1);
}

template <typename T>
void AbsVit<T>::build_loss(const std::vector<NodeId>& z, NodeId pooled, NodeId logits, NodeId prior) {
  auto& g = graph_;
  const std::size_t B = options_.batch, K = sz(config_.classes);
  const auto& w = options_.loss;
  const NodeId labels = g.input("labels", {B, K});

  const NodeId ce = g.scale(g.sum(g.mul(labels, g.log_softmax(logits))), -1.0 / static_cast<double>(B));

  // Layer-wise reconstruction l = 0..L-1 with both sides detached.
  NodeId recon = g.constant(Tensor<T>::scalar(T(0)));
  for (int l = 0; l < config_.layers; ++l) {
    const NodeId target = g.stop_gradient(z[l]);
    const NodeId pred = g.matmul(g.stop_gradient(z[l + 1]), decoders_[l]);
    NodeId term;
    if (w.recon_metric == ReconMetric::squared_l2) {
      const NodeId d = g.sub(target, pred);
      term = g.sum(g.mul(d, d));
    } else {
      term = g.add_scalar(g.scale(g.sum(g.cosine(target, pred)), -1.0), static_cast<double>(rows_));
    }
    recon = g.add(recon, term);
  }
  recon = g.scale(recon, 0.5 / static_cast<double>(B));

  NodeId prior_loss = g.constant(Tensor<T>::scalar(T(0)));
  if (w.prior == PriorKind::clip) {
    if (B < 2) throw std::invalid_argument("clip prior needs at least one negative (batch >= 2)");
    const NodeId scores = g.reshape(g.matmul(pooled, g.transpose(prior)), {1, B});
    prior_loss = g.scale(g.mean(g.log_softmax(scores)), -1.0);
  }

  NodeId total = g.scale(ce, w.w_sup);
  total = g.add(total, g.scale(recon, w.w_var));
  total = g.add(total, prior_loss);
  loss_ = total;
  g.mark_output("loss", total);
  g.mark_output("ce", ce);
  g.mark_output("recon", recon);
  g.mark_output("prior_loss", prior_loss);
}

template <typename T>
std::map<std::string, Tensor<T>> AbsVit<T>::bind(const Tensor<T>& images, double alpha, const PriorSpec& prior,
                                                 const std::vector<int>& labels) const {
  require(std::isfinite(alpha) && alpha >= 0, "alpha must be finite and >= 0");
  const std::size_t B = options_.batch, c = sz(config_.dim), K = sz(config_.classes);
  std::map<std::string, Tensor<T>> in;
  in.emplace("images", images);
  in.emplace("alpha", Tensor<T>::scalar(static_cast<T>(alpha)));
  Tensor<T> ext({1, c}, T(0));
  T sel = T(0);
  if (prior.kind == PriorSpec::Kind::external) {
    require(prior.vector.size() == c, "external prior must have length " + std::to_string(c));
    for (std::size_t i = 0; i < c; ++i) ext.data()[i] = static_cast<T>(prior.vector[i]);
    sel = T(1);
  }
  in.emplace("prior_select", Tensor<T>::scalar(sel));
  in.emplace("prior_external", std::move(ext));
  if (options_.with_loss) {
    require(labels.size() == B, "expected " + std::to_string(B) + " labels");
    Tensor<T> onehot({B, K}, T(0));
    for (std::size_t b = 0; b < B; ++b) {
      if (labels[b] < 0 || sz(labels[b]) >= K) {
        throw std::invalid_argument("label " + std::to_string(labels[b]) + " outside 0.." + std::to_string(K - 1));
      }
      onehot.data()[b * K + sz(labels[b])] = T(1);
    }
    in.emplace("labels", std::move(onehot));
  }
  return in;
}

template <typename T>
std::map<std::string, Tensor<T>> AbsVit<T>::run(const Tensor<T>& images, double alpha, const PriorSpec& prior,
                                                const std::vector<int>& labels) {
  return graph_.eval(bind(images, alpha, prior, labels));
}

template <typename T>
void AbsVit<T>::set_params(const ParamMap<T>& params) {
  for (const auto& [name, value] : params) graph_.set_parameter(name, value);
}

template <typename T>
ParamMap<T> AbsVit<T>::params() const {
  ParamMap<T> out;
  for (const auto& name : graph_.parameter_names()) out.emplace(name, graph_.parameter_value(name));
  return out;
}

template class AbsVit<float>;
template class AbsVit<double>;
template Tensor<float> patchify(const Tensor<float>&, int);
template Tensor<double> patchify(const Tensor<double>&, int);

}  // namespace absvit::model
