// SPDX-License-Identifier: Apache-2.0

#include "absvit/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace absvit::obj {

namespace {

double log_sum_exp(const std::vector<double>& xs) {
  const double mx = *std::max_element(xs.begin(), xs.end());
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace

double cross_entropy(const Eigen::VectorXd& logits, int label) {
  if (label < 0 || label >= logits.size()) {
    throw std::invalid_argument("label " + std::to_string(label) + " outside 0.." + std::to_string(logits.size() - 1));
  }
  return log_sum_exp(std::vector<double>(logits.data(), logits.data() + logits.size())) - logits(label);
}

double clip_prior_loss(const Eigen::VectorXd& xi, const Eigen::VectorXd& positive,
                       const std::vector<Eigen::VectorXd>& negatives) {
  if (negatives.empty()) throw std::invalid_argument("clip prior needs at least one negative");
  std::vector<double> scores{xi.dot(positive)};
  for (const auto& n : negatives) {
    if (n.size() != xi.size()) throw std::invalid_argument("negative has the wrong length");
    scores.push_back(xi.dot(n));
  }
  // When the positive dominates, log1p keeps the tiny loss from rounding to 0.
  const double top = *std::max_element(scores.begin(), scores.end());
  if (scores[0] < top) return log_sum_exp(scores) - scores[0];
  double rest = 0.0;
  for (std::size_t k = 1; k < scores.size(); ++k) rest += std::exp(scores[k] - scores[0]);
  return std::log1p(rest);
}

void AdamWHyper::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be > 0");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) throw std::invalid_argument("betas must lie in (0, 1)");
  if (!(eps > 0)) throw std::invalid_argument("eps must be > 0");
  if (!(weight_decay >= 0) || !std::isfinite(weight_decay)) throw std::invalid_argument("weight decay must be >= 0");
}

template <typename T>
AdamW<T>::AdamW(AdamWHyper hyper, Decays decays) : hyper_(hyper), decays_(std::move(decays)) {
  hyper_.validate();
}

template <typename T>
void AdamW<T>::step(std::map<std::string, num::Tensor<T>*>& params, const std::map<std::string, num::Tensor<T>>& grads,
                    double lr) {
  if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("step learning rate must be finite and >= 0");
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("gradient for unknown parameter " + name);
    if (g.shape() != it->second->shape()) throw num::ShapeError("gradient shape mismatch for " + name);
    if (!g.all_finite()) throw num::NumericError("non-finite gradient for " + name);
  }
  ++t_;
  const double b1 = hyper_.beta1, b2 = hyper_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    num::Tensor<T>& p = *params.at(name);
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    const double shrink = (!decays_ || decays_(name)) ? 1.0 - lr * hyper_.weight_decay : 1.0;
    auto pd = p.data();
    const auto gd = g.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(gd[i]);
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + hyper_.eps);
      pd[i] = static_cast<T>(static_cast<double>(pd[i]) * shrink - lr * update);
    }
  }
}

template <typename T>
void AdamW<T>::step(num::Graph<T>& graph, const std::map<std::string, num::Tensor<T>>& grads, double lr) {
  std::map<std::string, num::Tensor<T>*> refs;
  for (const auto& [name, _] : grads) refs.emplace(name, &graph.parameter_ref(name));
  step(refs, grads, lr);
}

template class AdamW<float>;
template class AdamW<double>;

double learning_rate(double base, std::uint64_t step, std::uint64_t warmup, std::uint64_t total) {
  if (total == 0) return base;
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace absvit::obj
