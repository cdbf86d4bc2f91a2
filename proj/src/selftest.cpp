// SPDX-License-Identifier: Apache-2.0

#include "absvit/selftest.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "absvit/abs_hierarchy.hpp"
#include "absvit/datagen.hpp"
#include "absvit/kernel_attention.hpp"
#include "absvit/model.hpp"
#include "absvit/numerics/graph.hpp"
#include "absvit/objectives.hpp"
#include "absvit/rng.hpp"
#include "absvit/sparse_coding.hpp"

namespace absvit::selftest {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using num::Graph;
using num::NodeId;
using T64 = num::Tensor<double>;

std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

Outcome within(const std::string& what, double value, double limit) {
  return {value <= limit, what + "=" + fmt("%.3g", value) + " limit=" + fmt("%.3g", limit)};
}

T64 random_tensor(Rng& rng, const num::Shape& shape, double lo = -1.0, double hi = 1.0) {
  T64 t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Values at least 1e-2 away from every kink so central differences stay smooth.
T64 smooth_sample(Rng& rng, const num::Shape& shape, const std::vector<double>& kinks) {
  T64 t(shape);
  for (auto& v : t.data()) {
    do {
      v = rng.uniform(-2.0, 2.0);
    } while (std::any_of(kinks.begin(), kinks.end(), [&](double k) { return std::abs(v - k) < 1e-2; }));
  }
  return t;
}

// ---------------------------------------------------------------- numerics

// Builds sum(op(x, w) * R) for one op kind; returns false for leaf kinds.
bool build_op_case(num::OpKind op, Graph<double>& g, Rng& rng, std::map<std::string, T64>& in, NodeId& loss) {
  using K = num::OpKind;
  auto leaf = [&](const std::string& name, T64 v) {
    const NodeId id = g.input(name, v.shape());
    in[name] = std::move(v);
    return id;
  };
  auto x = [&](std::vector<double> kinks = {}) { return leaf("x", smooth_sample(rng, {3, 4}, kinks)); };
  auto w = [&](num::Shape s = {3, 4}) { return leaf("w", random_tensor(rng, s)); };
  NodeId y = 0;
  switch (op) {
    case K::Input:
    case K::Parameter:
    case K::Constant: return false;
    case K::MatMul: y = g.matmul(leaf("x", random_tensor(rng, {2, 3, 4})), w({2, 4, 5})); break;
    case K::Add: y = g.add(x(), w()); break;
    case K::Sub: y = g.sub(x(), w()); break;
    case K::Mul: y = g.mul(g.mul(x(), w()), leaf("s", random_tensor(rng, {}))); break;
    case K::Scale: y = g.scale(x(), -1.7); break;
    case K::AddScalar: y = g.add_scalar(x(), 0.3); break;
    case K::Relu: y = g.relu(x({0.0})); break;
    case K::Tanh: y = g.tanh(x()); break;
    case K::Exp: y = g.exp(x()); break;
    case K::Log: y = g.log(leaf("x", random_tensor(rng, {3, 4}, 0.2, 3.0))); break;
    case K::Abs: y = g.abs(x({0.0})); break;
    case K::Gelu: y = g.gelu(x()); break;
    case K::Softmax: y = g.softmax(x()); break;
    case K::LogSoftmax: y = g.log_softmax(x()); break;
    case K::LayerNorm: y = g.layer_norm(x()); break;
    case K::L2Norm: y = g.l2_norm(x()); break;
    case K::Cosine: y = g.cosine(x(), w()); break;
    case K::Clamp: y = g.clamp(x({-0.5, 0.8}), -0.5, 0.8); break;
    case K::Sum: y = g.sum(x(), 0); break;
    case K::Mean: y = g.mean(x(), 1); break;
    case K::Concat: y = g.concat({x(), w({3, 2})}, 1); break;
    case K::Permute: y = g.permute(leaf("x", random_tensor(rng, {2, 3, 4})), {2, 0, 1}); break;
    case K::Reshape: y = g.reshape(x(), {2, 6}); break;
    case K::Expand: y = g.expand(g.reshape(x(), {3, 1, 4}), {3, 5, 4}); break;
    case K::SoftThreshold: y = g.soft_threshold(x({-0.4, 0.4}), 0.4); break;
    case K::StopGradient: y = g.add(g.stop_gradient(g.tanh(x())), g.tanh(w())); break;
  }
  loss = g.sum(g.mul(y, g.constant(random_tensor(rng, g.shape(y)))));
  return true;
}

Outcome fd_every_op(const Options&) {
  double worst = 0.0;
  std::string worst_op = "none";
  int ops = 0;
  for (int k = 0; k <= static_cast<int>(num::OpKind::StopGradient); ++k) {
    const auto op = static_cast<num::OpKind>(k);
    bool counted = false;
    for (int seed = 0; seed < 20; ++seed) {
      Rng rng(mix_seed(0x5e1f, static_cast<std::uint64_t>(k * 100 + seed)));
      Graph<double> g;
      std::map<std::string, T64> in;
      NodeId loss = 0;
      if (!build_op_case(op, g, rng, in, loss)) break;
      counted = true;
      g.eval(in);
      for (const auto& name : g.input_names()) {
        const double err = num::fd_check(g, in, name, loss);
        if (!(err <= worst)) {
          worst = err;
          worst_op = num::op_name(op);
        }
      }
    }
    ops += counted;
  }
  auto o = within("max_rel_err", worst, 1e-4);
  o.detail += " ops=" + std::to_string(ops) + " seeds=20 worst_op=" + worst_op;
  return o;
}

Outcome eval_pure(const Options&) {
  Rng rng(5);
  Graph<double> g;
  const NodeId x = g.input("x", {6, 8});
  const NodeId w = g.parameter("w", random_tensor(rng, {8, 8}));
  g.mark_output("y", g.softmax(g.gelu(g.layer_norm(g.matmul(x, w)))));
  const std::map<std::string, T64> in{{"x", random_tensor(rng, {6, 8})}};
  const auto a = g.eval(in).at("y");
  g.eval({{"x", random_tensor(rng, {6, 8})}});
  const auto b = g.eval(in).at("y");
  return {a.storage() == b.storage(), "repeated evaluations bit-identical"};
}

Outcome stop_gradient_exact(const Options&) {
  Rng rng(6);
  Graph<double> g;
  const NodeId x = g.parameter("x", random_tensor(rng, {4, 3}));
  const NodeId y = g.sum(g.mul(g.stop_gradient(g.exp(x)), g.tanh(g.stop_gradient(x))));
  g.eval({});
  double mag = 0.0;
  const auto grads = g.grad(y);
  for (double v : grads.at("x").data()) mag = std::max(mag, std::abs(v));
  return {mag == 0.0, "max_abs_adjoint=" + fmt("%.3g", mag)};
}

// ---------------------------------------------------------- sparse coding

sparse::SRProblem random_problem(std::uint64_t seed, double lambda) {
  Rng rng(seed);
  const auto d = static_cast<Eigen::Index>(2 + rng.below(19));
  const auto k = static_cast<Eigen::Index>(2 + rng.below(19));
  sparse::SRProblem p;
  p.dictionary.resize(d, k);
  p.input.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) p.dictionary(i, j) = rng.normal() / std::sqrt(double(d));
    p.input[i] = rng.normal();
  }
  p.lambda = lambda;
  return p;
}

Outcome energy_descent(const Options&) {
  double worst_rise = 0.0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto p = random_problem(mix_seed(0xe7e, seed), 0.2);
    const double eta = sparse::default_step_size(p.dictionary);
    auto s = sparse::SparseCodeState::zeros(p.dictionary.cols());
    double e = sparse::objective(p, s.code);
    for (int t = 0; t < 300; ++t) {
      s = sparse::lca_step(p, s, eta);
      const double next = sparse::objective(p, s.code);
      worst_rise = std::max(worst_rise, next - e);
      e = next;
    }
  }
  return within("max_objective_rise", worst_rise, 1e-12);
}

Outcome oracle_equivalence(const Options&) {
  double gap = 0.0, kkt = 0.0;
  int unconverged = 0;
  const double lambdas[] = {0.0, 0.05, 0.1, 0.5};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto p = random_problem(mix_seed(0x0ac1e, seed), lambdas[seed % 4]);
    sparse::SolveOptions opts;
    opts.max_iters = 20'000'000;
    const auto r = sparse::solve_sparse_code(p, opts);
    const auto o = sparse::lasso_oracle(p, 20'000'000);
    unconverged += !r.converged;
    gap = std::max(gap, std::abs(r.objective - o.objective));
    kkt = std::max({kkt, sparse::kkt_residual(p, r.code), sparse::kkt_residual(p, o.code)});
  }
  // Closed form: with an identity dictionary and a unit step the code is the
  // soft-thresholded input after one step.
  double closed = 0.0;
  Rng rng(0x1d);
  for (int t = 0; t < 10; ++t) {
    sparse::SRProblem p;
    p.dictionary = MatrixXd::Identity(6, 6);
    p.input = VectorXd::NullaryExpr(6, [&] { return rng.normal(); });
    p.lambda = 0.3;
    sparse::SolveOptions unit;
    unit.eta = sparse::max_step_size(p.dictionary);
    closed = std::max(closed, (sparse::solve_sparse_code(p, unit).code - sparse::soft_threshold(p.input, 0.3))
                                  .cwiseAbs()
                                  .maxCoeff());
  }
  const bool pass = gap <= 1e-5 && kkt <= 1e-4 && unconverged == 0 && closed == 0.0;
  return {pass, "problems=100 objective_gap=" + fmt("%.3g", gap) + " kkt=" + fmt("%.3g", kkt) +
                    " unconverged=" + std::to_string(unconverged) + " identity_err=" + fmt("%.3g", closed)};
}

Outcome sparsity_monotone(const Options&) {
  int violations = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    // Orthogonal dictionaries keep the active sets nested in lambda.
    Rng rng(mix_seed(0x5a, seed));
    MatrixXd a = MatrixXd::NullaryExpr(8, 8, [&] { return rng.normal(); });
    sparse::SRProblem p;
    p.dictionary = Eigen::HouseholderQR<MatrixXd>(a).householderQ() * MatrixXd::Identity(8, 8);
    p.input = VectorXd::NullaryExpr(8, [&] { return rng.normal(); });
    long prev = 1L << 30;
    for (double lambda : {0.0, 0.1, 0.5, 1.0, 2.0}) {
      p.lambda = lambda;
      const long nnz = (sparse::solve_sparse_code(p).code.array() != 0.0).count();
      violations += nnz > prev;
      prev = nnz;
    }
  }
  return {violations == 0, "problems=50 violations=" + std::to_string(violations)};
}

// ------------------------------------------------------- kernel attention

VectorXd random_unit(Eigen::Index c, Rng& rng) {
  VectorXd v = VectorXd::NullaryExpr(c, [&] { return rng.normal(); });
  return v / v.norm();
}

Outcome kernel_unbiased(const Options&) {
  Rng rng(2024);
  double worst_z = 0.0;
  for (int pair = 0; pair < 5; ++pair) {
    const MatrixXd q = random_unit(8, rng).transpose(), k = random_unit(8, rng).transpose();
    const double truth = std::exp((q * k.transpose())(0, 0));
    double sum = 0.0, sum_sq = 0.0;
    const int draws = 1000;
    for (int s = 0; s < draws; ++s) {
      const std::uint64_t seed = mix_seed(static_cast<std::uint64_t>(pair), static_cast<std::uint64_t>(s));
      const double e = (attn::positive_random_features(q, 256, seed) *
                        attn::positive_random_features(k, 256, seed).transpose())(0, 0);
      sum += e;
      sum_sq += e * e;
    }
    const double mean = sum / draws;
    const double se = std::sqrt((sum_sq - draws * mean * mean) / (draws - 1) / draws);
    worst_z = std::max(worst_z, std::abs(mean - truth) / se);
  }
  return within("max_standard_errors", worst_z, 3.0);
}

Outcome sr_least_squares(const Options&) {
  Rng rng(13);
  double worst = 0.0;
  int checked = 0;
  for (int t = 0; t < 20 && checked < 5; ++t) {
    auto randn = [&](Eigen::Index r, Eigen::Index c, double s) {
      return MatrixXd(MatrixXd::NullaryExpr(r, c, [&] { return s * rng.normal(); }));
    };
    attn::AttentionInputs in{randn(12, 3, 0.3), randn(12, 3, 0.3), randn(12, 2, 1.0), 100u + t, 4};
    const MatrixXd pk = attn::positive_random_features(in.K, 4, in.phi_seed);
    const MatrixXd pq = attn::positive_random_features(in.Q, 4, in.phi_seed);
    const auto sv = Eigen::JacobiSVD<MatrixXd>(pk).singularValues();
    if (sv(0) / sv(sv.size() - 1) > 100) continue;
    ++checked;
    const MatrixXd expected = pq * (pk.transpose() * pk).ldlt().solve(pk.transpose() * in.V);
    sparse::SolveOptions opts;
    opts.tol = 1e-11;
    worst = std::max(worst, (attn::sr_attention(in, 0.0, opts).output - expected).cwiseAbs().maxCoeff());
  }
  auto o = within("max_abs_err", worst, 1e-5);
  o.pass = o.pass && checked >= 5;
  o.detail += " cases=" + std::to_string(checked);
  return o;
}

Outcome value_only_argmax(const Options&) {
  Rng rng(22);
  int changed = 0, rows = 0;
  for (int t = 0; t < 20; ++t) {
    auto randn = [&](Eigen::Index r, Eigen::Index c, double s) {
      return MatrixXd(MatrixXd::NullaryExpr(r, c, [&] { return s * rng.normal(); }));
    };
    const double s = 1.0 / std::sqrt(8.0);
    attn::AttentionProjections proj{randn(8, 8, s), randn(8, 8, s), randn(8, 8, s), randn(8, 8, s), randn(8, 1, 0.1), 4};
    const MatrixXd x = randn(7, 8, 1.0);
    const auto off = attn::topdown_attention(x, MatrixXd::Zero(7, 8), attn::TdMode::value_only, proj);
    const auto on = attn::topdown_attention(x, randn(7, 8, 3.0), attn::TdMode::value_only, proj);
    for (std::size_t h = 0; h < off.weights.size(); ++h) {
      for (Eigen::Index i = 0; i < 7; ++i, ++rows) {
        Eigen::Index a = 0, b = 0;
        off.weights[h].row(i).maxCoeff(&a);
        on.weights[h].row(i).maxCoeff(&b);
        changed += a != b;
      }
    }
  }
  return {changed == 0, "rows=" + std::to_string(rows) + " argmax_changes=" + std::to_string(changed)};
}

// --------------------------------------------------------- abs hierarchy

Outcome identity(abs::DecoderKind kind, double limit) {
  const auto r = abs::verify_identity(kind, 100, kind == abs::DecoderKind::tanh ? 11 : 12);
  auto o = within("max_rel_err", r.max_error, limit);
  o.detail += " hierarchies=100 coordinates=" + std::to_string(r.coordinates_checked);
  return o;
}

Outcome map_ascent_monotone(const Options&) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 70);
    const auto hier = abs::random_hierarchy({6, 5, 7, 4}, {8, 6, 5}, abs::DecoderKind::tanh, 0.1, rng);
    const VectorXd h = VectorXd::NullaryExpr(6, [&] { return rng.normal(); });
    abs::Codes init;
    for (Eigen::Index l = 1; l <= 3; ++l) init.push_back(VectorXd::Zero(hier.P(l).cols()));
    const auto res = abs::map_ascent(hier, h, init);
    for (std::size_t i = 1; i < res.energy.size(); ++i) worst = std::max(worst, res.energy[i - 1] - res.energy[i]);
  }
  return within("max_log_joint_drop", worst, 1e-12);
}

Outcome topdown_steering(const Options&) {
  const Eigen::Index d = 8;
  auto linear = [](const MatrixXd& A) { return abs::Decoder{A, VectorXd::Zero(A.rows()), abs::DecoderKind::linear}; };
  abs::Hierarchy hier;
  hier.dictionaries = {MatrixXd::Identity(d, d), MatrixXd::Identity(4, 4)};
  MatrixXd up = MatrixXd::Zero(d, 4);
  up.topRows(4) = MatrixXd::Identity(4, 4);
  hier.decoders = {linear(MatrixXd::Identity(d, d)), linear(up)};
  hier.lambda = 0.2;
  hier.prior_precision = 0.0;
  VectorXd h(d);
  h << 1.0, 0.8, 0.9, 1.1, 1.0, 0.9, 1.2, 0.8;
  auto ratio = [&](const VectorXd& top) {
    abs::MapAscentOptions opts;
    opts.frozen = {false, true};
    opts.max_steps = 20000;
    const auto res = abs::map_ascent(hier, h, {VectorXd::Zero(d), top}, opts);
    return res.codes[0].head(4).lpNorm<1>() / res.codes[0].tail(4).lpNorm<1>();
  };
  VectorXd cue(4);
  cue << 1.0, 0.8, 0.9, 1.1;
  const double cued = ratio(cue), base = ratio(VectorXd::Zero(4));
  return {cued > base, "mass_ratio_cued=" + fmt("%.6g", cued) + " mass_ratio_uncued=" + fmt("%.6g", base)};
}

// ------------------------------------------------------------------ model

model::ModelConfig tiny_model(int layers, attn::TdMode mode = attn::TdMode::value_only) {
  model::ModelConfig c;
  c.image_size = 8;
  c.patch = 4;
  c.layers = layers;
  c.dim = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.classes = 3;
  c.td_mode = mode;
  return c;
}

model::ParamMap<double> noisy_params(const model::ModelConfig& c, std::uint64_t seed) {
  auto p = model::cast_params<double>(model::init_params(c, seed));
  Rng rng(seed + 99);
  for (auto& [_, t] : p)
    for (auto& v : t.data()) v += 0.2 * rng.normal();
  return p;
}

T64 random_images(const model::ModelConfig& c, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  T64 t({n, std::size_t(c.image_size), std::size_t(c.image_size)});
  for (auto& v : t.data()) v = rng.uniform();
  return t;
}

double max_abs_diff(const T64& a, const T64& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

model::BuildOptions build_options(const Options& o, std::size_t batch, model::TraceLevel trace) {
  model::BuildOptions b;
  b.batch = batch;
  b.trace = trace;
  b.fault_decoder_bias = o.fault_decoder_bias;
  return b;
}

Outcome alpha_zero_reduction(const Options& o) {
  double worst = 0.0;
  int images = 0;
  for (auto mode : {attn::TdMode::value_only, attn::TdMode::qkv}) {
    const auto c = tiny_model(3, mode);
    const auto params = noisy_params(c, 21);
    auto ff = build_options({}, 5, model::TraceLevel::minimal);
    ff.cycle = model::Cycle::feedforward;
    model::AbsVit<double> full(c, build_options(o, 5, model::TraceLevel::minimal), params), plain(c, ff, params);
    for (std::uint64_t t = 0; t < 10; ++t, images += 5) {
      const auto x = random_images(c, 5, 100 + t);
      worst = std::max(worst, max_abs_diff(full.run(x, 0.0).at("logits"), plain.run(x, 0.0).at("logits")));
    }
  }
  auto out = within("max_abs_logit_diff", worst, 1e-12);
  out.detail += " images=" + std::to_string(images);
  return out;
}

Outcome layer1_attention_invariance(const Options& o) {
  const auto c = tiny_model(3);
  model::AbsVit<double> net(c, build_options(o, 2, model::TraceLevel::full), noisy_params(c, 13));
  const auto out = net.run(random_images(c, 2, 6), 2.0);
  const auto& a1 = out.at("attn1.1").storage();
  const auto& a4 = out.at("attn4.1").storage();
  return {a1 == a4, std::string("layer1_bit_identical=") + (a1 == a4 ? "true" : "false") +
                        " layer2_diff=" + fmt("%.3g", max_abs_diff(out.at("attn1.2"), out.at("attn4.2")))};
}

Outcome homogeneity(const Options& o) {
  const auto c = tiny_model(3);
  model::AbsVit<double> net(c, build_options(o, 1, model::TraceLevel::full), noisy_params(c, 17));
  const auto x = random_images(c, 1, 2);
  // Cue token 0 so the feedback path is active.
  const auto z = net.run(x, 1.0).at("zL1");
  const auto prior = model::PriorSpec::external(std::vector<double>(z.data().begin(), z.data().begin() + c.dim));
  const auto base = net.run(x, 1.5, prior), twice = net.run(x, 3.0, prior), seven = net.run(x, 10.5, prior);
  double exact = 0.0, rel = 0.0, mag = 0.0;
  for (int l = 1; l <= c.layers; ++l) {
    const std::string k = "td." + std::to_string(l);
    const auto& b = base.at(k).data();
    for (std::size_t i = 0; i < b.size(); ++i) {
      exact = std::max(exact, std::abs(twice.at(k).data()[i] - 2.0 * b[i]));
      rel = std::max(rel, std::abs(seven.at(k).data()[i] - 7.0 * b[i]) / (1.0 + std::abs(7.0 * b[i])));
      mag = std::max(mag, std::abs(b[i]));
    }
  }
  return {exact == 0.0 && rel <= 1e-12 && mag > 0.0,
          "scale2_err=" + fmt("%.3g", exact) + " scale7_rel_err=" + fmt("%.3g", rel) + " td_max=" + fmt("%.3g", mag)};
}

Outcome determinism(const Options& o) {
  const auto c = tiny_model(2);
  const auto params = noisy_params(c, 1);
  model::AbsVit<double> a(c, build_options(o, 2, model::TraceLevel::full), params);
  model::AbsVit<double> b(c, build_options(o, 2, model::TraceLevel::full), params);
  const auto x = random_images(c, 2, 3);
  const auto oa = a.run(x, 1.0), ob = b.run(x, 1.0);
  std::size_t differing = 0;
  for (const auto& [k, v] : oa) differing += !(v.storage() == ob.at(k).storage());
  return {differing == 0, "traces=" + std::to_string(oa.size()) + " differing=" + std::to_string(differing)};
}

// ------------------------------------------------------------- objectives

struct LossCase {
  model::ModelConfig cfg = tiny_model(2);
  model::ParamMap<double> params = noisy_params(cfg, 5);
  T64 images = random_images(cfg, 4, 8);
  std::vector<int> labels{0, 2, 1, 2};

  model::AbsVit<double> build(const Options& o, model::LossWeights w) const {
    auto b = build_options(o, 4, model::TraceLevel::minimal);
    b.with_loss = true;
    b.loss = w;
    return model::AbsVit<double>(cfg, b, params);
  }
};

Outcome stop_gradient_isolation(const Options& o) {
  LossCase f;
  auto net = f.build(o, {1.0, 0.1});
  const auto in = net.bind(f.images, 1.0, {}, f.labels);
  net.graph().eval(in);
  const NodeId recon = net.graph().output_node("recon");
  double encoder = 0.0, fd = 0.0;
  for (const auto& [name, g] : net.graph().grad(recon)) {
    if (name.rfind("decoders.", 0) == 0) {
      fd = std::max(fd, num::fd_check(net.graph(), in, name, recon));
    } else {
      for (double v : g.data()) encoder = std::max(encoder, std::abs(v));
    }
  }
  return {encoder == 0.0 && fd <= 1e-4, "encoder_max_abs_grad=" + fmt("%.3g", encoder) +
                                            " decoder_fd_rel_err=" + fmt("%.3g", fd)};
}

Outcome clip_log_k(const Options&) {
  double worst = 0.0;
  bool positive = true;
  Rng rng(41);
  for (int k = 1; k <= 8; ++k) {
    // xi orthogonal to every sample: all dot products equal zero.
    VectorXd xi = VectorXd::Zero(6);
    xi[0] = rng.uniform(0.5, 2.0);
    auto sample = [&] {
      VectorXd v = VectorXd::NullaryExpr(6, [&] { return rng.normal(); });
      v[0] = 0.0;
      return v;
    };
    std::vector<VectorXd> neg;
    for (int i = 0; i < k; ++i) neg.push_back(sample());
    const double loss = obj::clip_prior_loss(xi, sample(), neg);
    worst = std::max(worst, std::abs(loss - std::log1p(double(k))));
    VectorXd other = VectorXd::NullaryExpr(6, [&] { return rng.normal(); });
    const double generic = obj::clip_prior_loss(other, other, neg);
    positive = positive && generic > 0.0 && std::isfinite(generic);
  }
  auto out = within("max_abs_err_vs_log1pK", worst, 1e-12);
  out.pass = out.pass && positive;
  out.detail += std::string(" positive_finite=") + (positive ? "true" : "false");
  return out;
}

Outcome loss_fd(const Options& o) {
  LossCase f;
  double worst = 0.0;
  for (auto metric : {model::ReconMetric::squared_l2, model::ReconMetric::cosine}) {
    auto net = f.build(o, {1.0, 0.1, metric, model::PriorKind::clip});
    const auto in = net.bind(f.images, 1.0, {}, f.labels);
    net.graph().eval(in);
    for (const auto& name : net.graph().parameter_names())
      worst = std::max(worst, num::fd_check(net.graph(), in, name, net.loss_node()));
  }
  return within("max_rel_err", worst, 1e-4);
}

// ---------------------------------------------------------------- datagen

Outcome datagen_determinism(const Options&) {
  const auto a = data::make_dataset(data::Split::train, 16, {});
  const auto b = data::make_dataset(data::Split::train, 16, {});
  const auto c = data::gen_two_object(1, 3, 9, {}), d = data::gen_two_object(1, 3, 9, {});
  const bool same = a.batch(0, 16).storage() == b.batch(0, 16).storage() && a.labels == b.labels &&
                    c.image.pixels == d.image.pixels && c.left_mask == d.left_mask;
  // Datasets hold fewer than 1e6 samples, so each split owns [base, base + 1e6).
  const std::uint64_t span = 1'000'000;
  const bool disjoint = data::split_base(data::Split::train) + span <= data::split_base(data::Split::test) &&
                        data::split_base(data::Split::test) + span <= data::split_base(data::Split::steer);
  return {same && disjoint, std::string("regenerated_identical=") + (same ? "true" : "false") +
                                " splits_disjoint=" + (disjoint ? "true" : "false")};
}

std::vector<Check> make_registry() {
  auto fixed = [](Outcome (*fn)(const Options&)) { return std::function<Outcome(const Options&)>(fn); };
  return {
      {"numerics.fd_every_op", "every op kind passes central finite differences on 20 seeds", fixed(fd_every_op)},
      {"numerics.eval_pure", "re-evaluating a graph is bit-identical", fixed(eval_pure)},
      {"numerics.stop_gradient_exact", "adjoint through stop_gradient is exactly zero", fixed(stop_gradient_exact)},
      {"sparse.energy_descent", "objective never rises along LCA steps at the default step size", fixed(energy_descent)},
      {"sparse.oracle_equivalence", "LCA matches the ISTA oracle; identity dictionary is closed form",
       fixed(oracle_equivalence)},
      {"sparse.sparsity_monotone", "nonzero count never grows with lambda", fixed(sparsity_monotone)},
      {"attn.kernel_unbiased", "random-feature kernel mean within 3 standard errors on unit-norm inputs", fixed(kernel_unbiased)},
      {"attn.sr_least_squares", "lambda=0 sparse attention equals the normal-equations solution",
       fixed(sr_least_squares)},
      {"attn.value_only_argmax", "value_only top-down signal leaves every attention argmax", fixed(value_only_argmax)},
      {"abs.identity_tanh", "decomposed gradient equals autodiff, tanh decoders",
       [](const Options&) { return identity(abs::DecoderKind::tanh, 1e-8); }},
      {"abs.identity_linear", "decomposed gradient equals autodiff, linear decoders",
       [](const Options&) { return identity(abs::DecoderKind::linear, 1e-12); }},
      {"abs.map_ascent_monotone", "log joint never drops along backtracking ascent", fixed(map_ascent_monotone)},
      {"abs.topdown_steering", "a cued top code shifts layer-1 mass toward its template block",
       fixed(topdown_steering)},
      {"absvit.alpha_zero_reduction", "alpha=0 equals the feedforward pass", fixed(alpha_zero_reduction)},
      {"absvit.layer1_attention_invariance", "value_only layer-1 attention identical in both passes",
       fixed(layer1_attention_invariance)},
      {"absvit.homogeneity", "top-down signals scale linearly with alpha", fixed(homogeneity)},
      {"absvit.determinism", "identical inputs give bit-identical traces", fixed(determinism)},
      {"obj.stop_gradient_isolation", "reconstruction loss leaves encoder gradients exactly zero",
       fixed(stop_gradient_isolation)},
      {"obj.clip_log_k", "clip prior equals log(1+K) for equal scores and is positive", fixed(clip_log_k)},
      {"obj.loss_fd", "total loss gradients pass finite differences", fixed(loss_fd)},
      {"datagen.determinism", "regeneration is bit-stable and splits are disjoint", fixed(datagen_determinism)},
  };
}

}  // namespace

const std::vector<Check>& registry() {
  static const std::vector<Check> checks = make_registry();
  return checks;
}

const std::vector<std::string>& covered_modules() {
  static const std::vector<std::string> modules{"numerics", "sparse", "attn", "abs", "absvit", "obj"};
  return modules;
}

std::string format_line(const Check& check, const Outcome& outcome, double seconds) {
  std::string detail = outcome.detail;
  std::replace(detail.begin(), detail.end(), '"', '\'');
  std::replace(detail.begin(), detail.end(), '\n', ' ');
  return "check=" + check.id + " status=" + (outcome.pass ? "PASS" : "FAIL") + " seconds=" + fmt("%.3f", seconds) +
         " detail=\"" + detail + "\"";
}

Report run_all(const Options& options, const std::function<void(const std::string&)>& sink) {
  Report report;
  for (const auto& check : registry()) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = check.run(options);
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.lines.push_back(format_line(check, outcome, s));
    report.failures += !outcome.pass;
    if (sink) sink(report.lines.back());
  }
  return report;
}

}  // namespace absvit::selftest
