// SPDX-License-Identifier: Apache-2.0
//
// Loss terms in closed form and the AdamW optimizer. The trainable losses
// live inside the model graph; the functions here are their direct
// arithmetic counterparts, used by tests and experiment reports.

#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "absvit/numerics/graph.hpp"
#include "absvit/numerics/tensor.hpp"

namespace absvit::obj {

/// -log softmax(logits)[label].
double cross_entropy(const Eigen::VectorXd& logits, int label);

/// -log( e^{xi.z+} / (e^{xi.z+} + sum_k e^{xi.z-_k}) ). Needs one negative.
double clip_prior_loss(const Eigen::VectorXd& xi, const Eigen::VectorXd& positive,
                       const std::vector<Eigen::VectorXd>& negatives);

/// The uninformative prior: a constant with no gradient.
inline double uninformative_prior() { return 0.0; }

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;

  void validate() const;
};

/// Decoupled weight decay Adam. State is kept in double precision and the
/// update order is fixed by parameter name, so runs are reproducible.
template <typename T>
class AdamW {
 public:
  using Decays = std::function<bool(const std::string&)>;

  explicit AdamW(AdamWHyper hyper, Decays decays = {});

  /// One update of every parameter in `params` that has a gradient, at
  /// learning rate `lr` (the schedule's value for this step). Throws
  /// num::NumericError before touching anything if a gradient is non-finite.
  void step(std::map<std::string, num::Tensor<T>*>& params, const std::map<std::string, num::Tensor<T>>& grads,
            double lr);

  /// Same, updating the graph's parameters in place.
  void step(num::Graph<T>& graph, const std::map<std::string, num::Tensor<T>>& grads, double lr);

  std::uint64_t steps() const { return t_; }
  const AdamWHyper& hyper() const { return hyper_; }

 private:
  AdamWHyper hyper_;
  Decays decays_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
double learning_rate(double base, std::uint64_t step, std::uint64_t warmup, std::uint64_t total);

}  // namespace absvit::obj
