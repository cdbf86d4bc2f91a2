// SPDX-License-Identifier: Apache-2.0
//
// Static computation graph with reverse-mode differentiation.
//
// A Graph is built once through the op methods below (shapes are checked at
// construction), then evaluated any number of times with different bindings
// for its named inputs. Parameters are named leaves that hold their own
// value; trainable parameters receive adjoints from grad(). Broadcasting is
// limited to rank-0 scalars in add/sub/mul; everything else needs an explicit
// reshape/expand.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "absvit/numerics/tensor.hpp"

namespace absvit::num {

using NodeId = std::size_t;

enum class OpKind : std::uint8_t {
  Input,
  Parameter,
  Constant,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Relu,
  Tanh,
  Exp,
  Log,
  Abs,
  Gelu,
  Softmax,
  LogSoftmax,
  LayerNorm,
  L2Norm,
  Cosine,
  Clamp,
  Sum,
  Mean,
  Concat,
  Permute,
  Reshape,
  Expand,
  SoftThreshold,
  StopGradient,
};

const char* op_name(OpKind op);

struct EvalOptions {
  /// Reuse the values cached by the previous evaluation for every
  /// stop-gradient node instead of recomputing them. Finite differences of
  /// the resulting function agree with the analytic adjoints.
  bool freeze_stop_gradients = false;
};

struct OpTiming {
  double forward_seconds = 0.0;
  double backward_seconds = 0.0;
  std::size_t calls = 0;
};

struct GradOptions {
  /// Also return adjoints for Input leaves (keyed by input name).
  bool include_inputs = false;
};

template <typename T>
class Graph {
 public:
  using TensorT = Tensor<T>;
  using Bindings = std::map<std::string, TensorT>;

  // Leaves.
  NodeId input(const std::string& name, Shape shape);
  NodeId parameter(const std::string& name, TensorT value, bool trainable = true);
  NodeId constant(TensorT value);

  // Linear algebra. matmul accepts [n,k]x[k,m] or batched [b,n,k]x[b,k,m].
  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  NodeId add_scalar(NodeId a, double s);

  // Elementwise.
  NodeId relu(NodeId a);
  NodeId tanh(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId abs(NodeId a);
  NodeId gelu(NodeId a);
  NodeId clamp(NodeId a, double lo, double hi);
  NodeId soft_threshold(NodeId a, double lambda);

  // Last-axis reductions and normalizations.
  NodeId softmax(NodeId a);
  NodeId log_softmax(NodeId a);
  NodeId layer_norm(NodeId a, double eps = 1e-6);
  NodeId l2_norm(NodeId a);
  NodeId cosine(NodeId a, NodeId b);

  // Reductions: axis < 0 reduces everything to a scalar.
  NodeId sum(NodeId a, int axis = -1);
  NodeId mean(NodeId a, int axis = -1);

  // Layout.
  NodeId concat(const std::vector<NodeId>& parts, std::size_t axis);
  NodeId permute(NodeId a, std::vector<std::size_t> perm);
  NodeId transpose(NodeId a);  // swaps the last two axes
  NodeId reshape(NodeId a, Shape shape);
  NodeId expand(NodeId a, Shape shape);  // size-1 axes only, same rank

  NodeId stop_gradient(NodeId a);

  void mark_output(const std::string& name, NodeId id);

  /// Evaluates every node. All inputs must be bound with their declared shape.
  /// Throws ShapeError on binding mismatches and NumericError on non-finite values.
  Bindings eval(const Bindings& inputs, const EvalOptions& options = {});

  /// Adjoints of every trainable parameter (zeros when unreachable) w.r.t. a
  /// rank-0 node, using the values from the most recent eval().
  Bindings grad(NodeId scalar_output, const GradOptions& options = {});

  const TensorT& value(NodeId id) const { return nodes_.at(id).value; }
  const Shape& shape(NodeId id) const { return nodes_.at(id).shape; }
  OpKind kind(NodeId id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  bool has_parameter(const std::string& name) const { return params_.count(name) != 0; }
  const TensorT& parameter_value(const std::string& name) const;
  void set_parameter(const std::string& name, const TensorT& value);
  /// Mutable access for in-place optimizer updates.
  TensorT& parameter_ref(const std::string& name);
  std::vector<std::string> parameter_names() const;
  std::vector<std::string> input_names() const;
  std::vector<std::string> output_names() const;
  NodeId output_node(const std::string& name) const { return outputs_.at(name); }
  NodeId leaf(const std::string& name) const;

  /// Accumulates wall time per op kind across eval() and grad() calls.
  void set_profiling(bool on) { profiling_ = on; }
  const std::map<std::string, OpTiming>& profile() const { return profile_; }
  void clear_profile() { profile_.clear(); }

 private:
  struct Node {
    OpKind op;
    std::vector<NodeId> in;
    Shape shape;
    double a = 0.0;
    double b = 0.0;
    std::size_t axis = 0;
    bool all_axes = false;
    std::vector<std::size_t> perm;
    std::string name;
    bool trainable = false;
    TensorT value;
  };

  NodeId push(Node node);
  NodeId unary(OpKind op, NodeId a, double p = 0.0, double q = 0.0);
  NodeId binary_elementwise(OpKind op, NodeId a, NodeId b);
  const Node& at(NodeId id) const;
  void forward(Node& node);
  void backward(const Node& node, const TensorT& adj, std::vector<TensorT>& adjoints,
                const std::vector<char>& live);

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> inputs_;
  std::map<std::string, NodeId> params_;
  std::map<std::string, NodeId> outputs_;
  bool evaluated_ = false;
  bool profiling_ = false;
  std::map<std::string, OpTiming> profile_;
};

extern template class Graph<float>;
extern template class Graph<double>;

/// Free-function spelling of Graph::eval restricted to marked outputs.
template <typename T>
std::map<std::string, Tensor<T>> eval_graph(Graph<T>& graph,
                                            const std::map<std::string, Tensor<T>>& inputs) {
  return graph.eval(inputs);
}

/// Max over elements of `leaf` (parameter or input) of
/// |analytic - central difference| / max(1, |central difference|), with step
/// h = 1e-6 * max(1, |x|). Stop-gradient nodes are frozen at their unperturbed
/// values while differencing. The graph must have been evaluated with `inputs`.
double fd_check(Graph<double>& graph, const std::map<std::string, Tensor<double>>& inputs,
                const std::string& leaf, NodeId scalar_output);

}  // namespace absvit::num
