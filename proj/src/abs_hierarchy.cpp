// SPDX-License-Identifier: Apache-2.0

#include "absvit/abs_hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "absvit/numerics/graph.hpp"

namespace absvit::abs {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

MatrixXd randn(Index r, Index c, Rng& rng, double scale) {
  MatrixXd m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

}  // namespace

VectorXd Decoder::apply(const VectorXd& v) const {
  VectorXd out = A * v + b;
  if (kind == DecoderKind::tanh) out = out.array().tanh().matrix();
  return out;
}

MatrixXd Decoder::jacobian(const VectorXd& v) const {
  if (kind == DecoderKind::linear) return A;
  const VectorXd t = (A * v + b).array().tanh().matrix();
  return (1.0 - t.array().square()).matrix().asDiagonal() * A;
}

void Hierarchy::validate() const {
  const Index L = layers();
  require(L >= 1, "hierarchy needs at least one layer");
  require(static_cast<Index>(decoders.size()) == L, "hierarchy needs one decoder per layer");
  require(lambda >= 0, "sparsity lambda must be >= 0");
  require(prior_precision >= 0, "prior precision must be >= 0");
  for (Index l = 0; l < L; ++l) {
    const Decoder& dec = g(l);
    require(dec.A.rows() == dec.b.size(), "decoder " + std::to_string(l) + " bias length mismatch");
    require(dec.A.cols() == P(l + 1).rows(),
            "decoder " + std::to_string(l) + " input width differs from layer " + std::to_string(l + 1) + " state");
    if (l >= 1) {
      require(dec.A.rows() == P(l).rows(),
              "decoder " + std::to_string(l) + " output width differs from layer " + std::to_string(l) + " state");
    }
  }
}

void Hierarchy::validate(const Codes& codes, const VectorXd& h) const {
  validate();
  require(static_cast<Index>(codes.size()) == layers(), "expected one code per layer");
  for (Index l = 1; l <= layers(); ++l) {
    require(codes[l - 1].size() == P(l).cols(), "code " + std::to_string(l) + " has length " +
                                                    std::to_string(codes[l - 1].size()) + ", expected " +
                                                    std::to_string(P(l).cols()));
  }
  require(h.size() == observation_size(), "observation length mismatch");
}

Hierarchy random_hierarchy(const std::vector<Index>& dims, const std::vector<Index>& atoms, DecoderKind kind,
                           double lambda, Rng& rng) {
  require(dims.size() == atoms.size() + 1 && !atoms.empty(), "dims must list d_0..d_L and atoms d'_1..d'_L");
  Hierarchy hier;
  hier.lambda = lambda;
  const Index L = static_cast<Index>(atoms.size());
  for (Index l = 1; l <= L; ++l) {
    MatrixXd P = randn(dims[l], atoms[l - 1], rng, 1.0);
    for (Index j = 0; j < P.cols(); ++j) P.col(j).normalize();
    hier.dictionaries.push_back(std::move(P));
  }
  for (Index l = 0; l < L; ++l) {
    Decoder dec;
    dec.kind = kind;
    dec.A = randn(dims[l], dims[l + 1], rng, 1.0 / std::sqrt(static_cast<double>(dims[l + 1])));
    dec.b = randn(dims[l], 1, rng, 0.1);
    hier.decoders.push_back(std::move(dec));
  }
  hier.validate();
  return hier;
}

Codes random_codes(const Hierarchy& hier, Rng& rng, double sparsity) {
  Codes codes;
  for (Index l = 1; l <= hier.layers(); ++l) {
    VectorXd u(hier.P(l).cols());
    for (Index i = 0; i < u.size(); ++i) u[i] = rng.uniform() < sparsity ? 0.0 : rng.normal();
    codes.push_back(std::move(u));
  }
  return codes;
}

std::vector<VectorXd> layer_states(const Hierarchy& hier, const Codes& codes, const VectorXd& h) {
  std::vector<VectorXd> z{h};
  for (Index l = 1; l <= hier.layers(); ++l) z.push_back(hier.P(l) * codes[l - 1]);
  return z;
}

double log_joint(const Hierarchy& hier, const Codes& codes, const VectorXd& h) {
  hier.validate(codes, h);
  const auto z = layer_states(hier, codes, h);
  const Index L = hier.layers();
  double total = 0.0;
  for (Index l = 0; l < L; ++l) total -= 0.5 * (z[l] - hier.g(l).apply(z[l + 1])).squaredNorm();
  for (const auto& u : codes) total -= hier.lambda * u.lpNorm<1>();
  total -= 0.5 * hier.prior_precision * codes.back().squaredNorm();
  return total;
}

GenerateResult generate(const Hierarchy& hier, const VectorXd& top_code, const sparse::SolveOptions& options) {
  hier.validate();
  const Index L = hier.layers();
  require(top_code.size() == hier.P(L).cols(), "top code length mismatch");
  GenerateResult out;
  out.z.assign(L + 1, VectorXd());
  out.codes.assign(L, VectorXd());
  out.codes[L - 1] = top_code;
  out.z[L] = hier.P(L) * top_code;
  for (Index l = L - 1; l >= 1; --l) {
    sparse::SRProblem problem{hier.P(l), hier.g(l).apply(out.z[l + 1]), hier.lambda};
    auto solved = sparse::solve_sparse_code(problem, options);
    if (!solved.converged) {
      throw sparse::ConvergenceError("sparse code for layer " + std::to_string(l) + " did not converge");
    }
    out.codes[l - 1] = solved.code;
    out.z[l] = hier.P(l) * solved.code;
  }
  out.z[0] = hier.g(0).apply(out.z[1]);
  return out;
}

VectorXd LayerGradientParts::smooth_gradient() const {
  VectorXd grad = P.transpose() * x_bu - reg_grad + prior_grad;
  if (!top) grad += P.transpose() * x_td - P.transpose() * (P * code);
  return grad;
}

LayerGradientParts decompose_gradient(const Hierarchy& hier, const Codes& codes, const VectorXd& h, Index layer) {
  hier.validate(codes, h);
  const Index L = hier.layers();
  if (layer < 1 || layer > L) {
    throw std::out_of_range("layer " + std::to_string(layer) + " outside 1.." + std::to_string(L));
  }
  const auto z = layer_states(hier, codes, h);
  const Decoder& below = hier.g(layer - 1);
  const MatrixXd J = below.jacobian(z[layer]);

  LayerGradientParts parts;
  parts.P = hier.P(layer);
  parts.code = codes[layer - 1];
  parts.top = layer == L;
  parts.x_bu = J.transpose() * z[layer - 1];
  parts.reg_grad = parts.P.transpose() * (J.transpose() * below.apply(z[layer]));
  parts.x_td = parts.top ? VectorXd::Zero(z[layer].size()) : hier.g(layer).apply(z[layer + 1]);
  parts.sparsity_subgrad = parts.code.unaryExpr([&](double v) { return -hier.lambda * sign(v); });
  parts.prior_grad = parts.top ? VectorXd(-hier.prior_precision * parts.code) : VectorXd::Zero(parts.code.size());
  return parts;
}

double layer_kkt_residual(const Hierarchy& hier, const Codes& codes, const VectorXd& h, Index layer) {
  const auto parts = decompose_gradient(hier, codes, h, layer);
  const VectorXd grad = parts.smooth_gradient();
  double worst = 0.0;
  for (Index i = 0; i < grad.size(); ++i) {
    const double u = parts.code[i];
    const double v = u == 0.0 ? std::max(0.0, std::abs(grad[i]) - hier.lambda) : std::abs(grad[i] - hier.lambda * sign(u));
    worst = std::max(worst, v);
  }
  return worst;
}

Codes map_ascent_step(const Hierarchy& hier, const Codes& codes, const VectorXd& h, double eta,
                      const std::vector<bool>& frozen) {
  require(eta > 0, "ascent step size must be > 0");
  const Index L = hier.layers();
  require(frozen.empty() || static_cast<Index>(frozen.size()) == L, "frozen mask needs one entry per layer");
  Codes next = codes;
  for (Index l = 1; l <= L; ++l) {
    if (!frozen.empty() && frozen[l - 1]) continue;
    const VectorXd grad = decompose_gradient(hier, codes, h, l).smooth_gradient();
    next[l - 1] = sparse::soft_threshold(VectorXd(codes[l - 1] + eta * grad), eta * hier.lambda);
  }
  return next;
}

MapAscentResult map_ascent(const Hierarchy& hier, const VectorXd& h, Codes codes, const MapAscentOptions& options) {
  require(options.eta0 > 0, "initial step size must be > 0");
  MapAscentResult result;
  double eta = options.eta0;
  const double eta_min = options.eta0 * std::ldexp(1.0, -options.max_halvings);
  double energy = log_joint(hier, codes, h);
  result.energy.push_back(energy);
  int consecutive_drops = 0;
  for (std::size_t step = 0; step < options.max_steps; ++step) {
    Codes candidate;
    double next_energy = 0.0;
    bool dropped = false;
    for (;;) {
      candidate = map_ascent_step(hier, codes, h, eta, options.frozen);
      next_energy = log_joint(hier, candidate, h);
      if (!std::isfinite(next_energy)) throw DivergenceError("log joint became non-finite");
      if (next_energy >= energy - 1e-12 * std::max(1.0, std::abs(energy))) break;
      if (eta / 2 < eta_min) {
        dropped = true;
        break;
      }
      eta /= 2;
    }
    consecutive_drops = dropped ? consecutive_drops + 1 : 0;
    if (consecutive_drops >= 10) {
      throw DivergenceError("log joint decreased for 10 consecutive steps at the smallest step size");
    }
    double change = 0.0;
    for (std::size_t l = 0; l < codes.size(); ++l)
      change = std::max(change, (candidate[l] - codes[l]).lpNorm<Eigen::Infinity>());
    codes = std::move(candidate);
    energy = next_energy;
    result.energy.push_back(energy);
    result.steps = step + 1;
    if (change < options.tol) {
      result.converged = true;
      break;
    }
  }
  result.codes = std::move(codes);
  result.final_eta = eta;
  return result;
}

Codes autodiff_gradient(const Hierarchy& hier, const Codes& codes, const VectorXd& h) {
  hier.validate(codes, h);
  using num::Tensor;
  auto column = [](const VectorXd& v) {
    return Tensor<double>({static_cast<std::size_t>(v.size()), 1}, std::vector<double>(v.data(), v.data() + v.size()));
  };
  auto matrix = [](const MatrixXd& m) {
    std::vector<double> data(m.size());
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) data[i * m.cols() + j] = m(i, j);
    return Tensor<double>({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(data));
  };

  num::Graph<double> g;
  const Index L = hier.layers();
  std::vector<num::NodeId> u(L + 1), z(L + 1);
  z[0] = g.constant(column(h));
  for (Index l = 1; l <= L; ++l) {
    u[l] = g.parameter("u" + std::to_string(l), column(codes[l - 1]));
    z[l] = g.matmul(g.constant(matrix(hier.P(l))), u[l]);
  }
  num::NodeId total = g.constant(Tensor<double>::scalar(0.0));
  for (Index l = 0; l < L; ++l) {
    const Decoder& dec = hier.g(l);
    num::NodeId pred = g.add(g.matmul(g.constant(matrix(dec.A)), z[l + 1]), g.constant(column(dec.b)));
    if (dec.kind == DecoderKind::tanh) pred = g.tanh(pred);
    const num::NodeId r = g.sub(z[l], pred);
    total = g.add(total, g.scale(g.sum(g.mul(r, r)), -0.5));
  }
  for (Index l = 1; l <= L && hier.lambda > 0; ++l) total = g.add(total, g.scale(g.sum(g.abs(u[l])), -hier.lambda));
  if (hier.prior_precision > 0) {
    total = g.add(total, g.scale(g.sum(g.mul(u[L], u[L])), -0.5 * hier.prior_precision));
  }
  g.eval({});
  const auto grads = g.grad(total);
  Codes out;
  for (Index l = 1; l <= L; ++l) {
    const auto& t = grads.at("u" + std::to_string(l));
    out.emplace_back(Eigen::Map<const VectorXd>(t.data().data(), static_cast<Index>(t.size())));
  }
  return out;
}

std::string IdentityReport::text() const {
  std::ostringstream os;
  os.precision(3);
  for (std::size_t i = 0; i < trial_errors.size(); ++i) os << "trial=" << i << " max_error=" << std::scientific << trial_errors[i] << "\n";
  os << "trials=" << trial_errors.size() << " coordinates=" << coordinates_checked << " max_error=" << std::scientific
     << max_error << "\n";
  return os.str();
}

IdentityReport verify_identity(DecoderKind kind, std::size_t trials, std::uint64_t seed, double lambda, Index layers,
                               Index max_dim) {
  require(layers >= 1 && max_dim >= 2, "identity check needs layers >= 1 and max_dim >= 2");
  IdentityReport report;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(mix_seed(seed, t));
    std::vector<Index> dims, atoms;
    for (Index l = 0; l <= layers; ++l) dims.push_back(2 + static_cast<Index>(rng.below(max_dim - 1)));
    for (Index l = 0; l < layers; ++l) atoms.push_back(2 + static_cast<Index>(rng.below(max_dim - 1)));
    const Hierarchy hier = random_hierarchy(dims, atoms, kind, lambda, rng);
    const Codes codes = random_codes(hier, rng);
    VectorXd h(dims[0]);
    for (Index i = 0; i < h.size(); ++i) h[i] = rng.normal();

    const Codes reference = autodiff_gradient(hier, codes, h);
    double worst = 0.0;
    for (Index l = 1; l <= layers; ++l) {
      const auto parts = decompose_gradient(hier, codes, h, l);
      const VectorXd ours = parts.smooth_gradient();
      const VectorXd& u = codes[l - 1];
      for (Index i = 0; i < u.size(); ++i) {
        if (lambda > 0 && std::abs(u[i]) <= 1e-3) continue;
        const double smooth_ref = reference[l - 1][i] + lambda * sign(u[i]);
        worst = std::max(worst, std::abs(ours[i] - smooth_ref) / std::max(1.0, std::abs(smooth_ref)));
        ++report.coordinates_checked;
      }
    }
    report.trial_errors.push_back(worst);
    report.max_error = std::max(report.max_error, worst);
  }
  return report;
}

}  // namespace absvit::abs
