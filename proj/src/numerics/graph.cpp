// SPDX-License-Identifier: Apache-2.0

#include "absvit/numerics/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace absvit::num {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Relu: return "relu";
    case OpKind::Tanh: return "tanh";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Abs: return "abs";
    case OpKind::Gelu: return "gelu";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::L2Norm: return "l2_norm";
    case OpKind::Cosine: return "cosine";
    case OpKind::Clamp: return "clamp";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Concat: return "concat";
    case OpKind::Permute: return "permute";
    case OpKind::Reshape: return "reshape";
    case OpKind::Expand: return "expand";
    case OpKind::SoftThreshold: return "soft_threshold";
    case OpKind::StopGradient: return "stop_gradient";
  }
  return "unknown";
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using ArrC = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ArrM = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Visits every flat index of `out_shape` in row-major order together with the
// matching offset into a source addressed by `src_strides`.
template <typename F>
void for_each_strided(const Shape& out_shape, const Shape& src_strides, F&& fn) {
  const std::size_t r = out_shape.size();
  const std::size_t total = numel(out_shape);
  if (total == 0) return;
  if (r == 0) {
    fn(std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  const std::size_t last = out_shape[r - 1];
  const std::size_t last_stride = src_strides[r - 1];
  std::size_t base = 0;
  std::size_t flat = 0;
  while (flat < total) {
    for (std::size_t j = 0; j < last; ++j) fn(flat + j, base + j * last_stride);
    flat += last;
    // carry into the outer axes
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      base += src_strides[d];
      if (idx[d] < out_shape[d]) break;
      base -= src_strides[d] * idx[d];
      idx[d] = 0;
    }
  }
}

std::size_t last_dim(const Shape& s) {
  if (s.empty()) throw ShapeError("last-axis op requires rank >= 1");
  return s.back();
}

bool is_scalar_shape(const Shape& s) { return s.empty(); }

}  // namespace

template <typename T>
NodeId Graph<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  evaluated_ = false;
  return nodes_.size() - 1;
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::at(NodeId id) const {
  if (id >= nodes_.size()) throw std::out_of_range("graph node id " + std::to_string(id));
  return nodes_[id];
}

template <typename T>
NodeId Graph<T>::input(const std::string& name, Shape shape) {
  if (inputs_.count(name) || params_.count(name)) throw std::invalid_argument("duplicate leaf name: " + name);
  Node n{OpKind::Input, {}, shape};
  n.name = name;
  n.value = TensorT(shape);
  const NodeId id = push(std::move(n));
  inputs_[name] = id;
  return id;
}

template <typename T>
NodeId Graph<T>::parameter(const std::string& name, TensorT value, bool trainable) {
  if (inputs_.count(name) || params_.count(name)) throw std::invalid_argument("duplicate leaf name: " + name);
  Node n{OpKind::Parameter, {}, value.shape()};
  n.name = name;
  n.trainable = trainable;
  n.value = std::move(value);
  const NodeId id = push(std::move(n));
  params_[name] = id;
  return id;
}

template <typename T>
NodeId Graph<T>::constant(TensorT value) {
  Node n{OpKind::Constant, {}, value.shape()};
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::matmul(NodeId a, NodeId b) {
  const Shape& sa = at(a).shape;
  const Shape& sb = at(b).shape;
  Shape out;
  if (sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0]) {
    out = {sa[0], sb[1]};
  } else if (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1]) {
    out = {sa[0], sa[1], sb[2]};
  } else {
    throw ShapeError("matmul shape mismatch: " + shape_str(sa) + " x " + shape_str(sb));
  }
  return push(Node{OpKind::MatMul, {a, b}, out});
}

template <typename T>
NodeId Graph<T>::binary_elementwise(OpKind op, NodeId a, NodeId b) {
  const Shape& sa = at(a).shape;
  const Shape& sb = at(b).shape;
  Shape out;
  if (sa == sb) {
    out = sa;
  } else if (is_scalar_shape(sa)) {
    out = sb;
  } else if (is_scalar_shape(sb)) {
    out = sa;
  } else {
    throw ShapeError(std::string(op_name(op)) + " shape mismatch: " + shape_str(sa) + " vs " + shape_str(sb));
  }
  return push(Node{op, {a, b}, out});
}

template <typename T>
NodeId Graph<T>::add(NodeId a, NodeId b) { return binary_elementwise(OpKind::Add, a, b); }
template <typename T>
NodeId Graph<T>::sub(NodeId a, NodeId b) { return binary_elementwise(OpKind::Sub, a, b); }
template <typename T>
NodeId Graph<T>::mul(NodeId a, NodeId b) { return binary_elementwise(OpKind::Mul, a, b); }

template <typename T>
NodeId Graph<T>::unary(OpKind op, NodeId a, double p, double q) {
  Node n{op, {a}, at(a).shape};
  n.a = p;
  n.b = q;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::scale(NodeId a, double s) { return unary(OpKind::Scale, a, s); }
template <typename T>
NodeId Graph<T>::add_scalar(NodeId a, double s) { return unary(OpKind::AddScalar, a, s); }
template <typename T>
NodeId Graph<T>::relu(NodeId a) { return unary(OpKind::Relu, a); }
template <typename T>
NodeId Graph<T>::tanh(NodeId a) { return unary(OpKind::Tanh, a); }
template <typename T>
NodeId Graph<T>::exp(NodeId a) { return unary(OpKind::Exp, a); }
template <typename T>
NodeId Graph<T>::log(NodeId a) { return unary(OpKind::Log, a); }
template <typename T>
NodeId Graph<T>::abs(NodeId a) { return unary(OpKind::Abs, a); }
template <typename T>
NodeId Graph<T>::gelu(NodeId a) { return unary(OpKind::Gelu, a); }

template <typename T>
NodeId Graph<T>::clamp(NodeId a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp requires lo <= hi");
  return unary(OpKind::Clamp, a, lo, hi);
}

template <typename T>
NodeId Graph<T>::soft_threshold(NodeId a, double lambda) {
  if (lambda < 0) throw std::invalid_argument("soft_threshold requires lambda >= 0");
  return unary(OpKind::SoftThreshold, a, lambda);
}

template <typename T>
NodeId Graph<T>::softmax(NodeId a) {
  last_dim(at(a).shape);
  return unary(OpKind::Softmax, a);
}

template <typename T>
NodeId Graph<T>::log_softmax(NodeId a) {
  last_dim(at(a).shape);
  return unary(OpKind::LogSoftmax, a);
}

template <typename T>
NodeId Graph<T>::layer_norm(NodeId a, double eps) {
  last_dim(at(a).shape);
  return unary(OpKind::LayerNorm, a, eps);
}

template <typename T>
NodeId Graph<T>::l2_norm(NodeId a) {
  Shape s = at(a).shape;
  last_dim(s);
  s.pop_back();
  return push(Node{OpKind::L2Norm, {a}, s});
}

template <typename T>
NodeId Graph<T>::cosine(NodeId a, NodeId b) {
  Shape s = at(a).shape;
  if (s != at(b).shape) {
    throw ShapeError("cosine shape mismatch: " + shape_str(s) + " vs " + shape_str(at(b).shape));
  }
  last_dim(s);
  s.pop_back();
  return push(Node{OpKind::Cosine, {a, b}, s});
}

template <typename T>
NodeId Graph<T>::sum(NodeId a, int axis) {
  Node n{OpKind::Sum, {a}, {}};
  const Shape& s = at(a).shape;
  if (axis < 0) {
    n.all_axes = true;
  } else {
    if (static_cast<std::size_t>(axis) >= s.size()) throw ShapeError("sum axis out of range for " + shape_str(s));
    n.axis = static_cast<std::size_t>(axis);
    n.shape = s;
    n.shape.erase(n.shape.begin() + axis);
  }
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::mean(NodeId a, int axis) {
  NodeId id = sum(a, axis);
  nodes_[id].op = OpKind::Mean;
  return id;
}

template <typename T>
NodeId Graph<T>::concat(const std::vector<NodeId>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape out = at(parts[0]).shape;
  if (axis >= out.size()) throw ShapeError("concat axis out of range for " + shape_str(out));
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const Shape& s = at(parts[i]).shape;
    if (s.size() != out.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != out[d]) {
        throw ShapeError("concat shape mismatch: " + shape_str(out) + " vs " + shape_str(s));
      }
    }
    out[axis] += s[axis];
  }
  Node n{OpKind::Concat, parts, out};
  n.axis = axis;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::permute(NodeId a, std::vector<std::size_t> perm) {
  const Shape& s = at(a).shape;
  if (perm.size() != s.size()) throw ShapeError("permute rank mismatch for " + shape_str(s));
  std::vector<char> seen(perm.size(), 0);
  Shape out(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || seen[perm[i]]) throw ShapeError("invalid permutation");
    seen[perm[i]] = 1;
    out[i] = s[perm[i]];
  }
  Node n{OpKind::Permute, {a}, out};
  n.perm = std::move(perm);
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::transpose(NodeId a) {
  const std::size_t r = at(a).shape.size();
  if (r < 2) throw ShapeError("transpose requires rank >= 2");
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, perm);
}

template <typename T>
NodeId Graph<T>::reshape(NodeId a, Shape shape) {
  if (numel(shape) != numel(at(a).shape)) {
    throw ShapeError("cannot reshape " + shape_str(at(a).shape) + " to " + shape_str(shape));
  }
  return push(Node{OpKind::Reshape, {a}, std::move(shape)});
}

template <typename T>
NodeId Graph<T>::expand(NodeId a, Shape shape) {
  const Shape& s = at(a).shape;
  if (s.size() != shape.size()) throw ShapeError("expand rank mismatch: " + shape_str(s) + " to " + shape_str(shape));
  for (std::size_t d = 0; d < s.size(); ++d) {
    if (s[d] != shape[d] && s[d] != 1) {
      throw ShapeError("expand only widens size-1 axes: " + shape_str(s) + " to " + shape_str(shape));
    }
  }
  return push(Node{OpKind::Expand, {a}, std::move(shape)});
}

template <typename T>
NodeId Graph<T>::stop_gradient(NodeId a) { return unary(OpKind::StopGradient, a); }

template <typename T>
void Graph<T>::mark_output(const std::string& name, NodeId id) {
  at(id);
  outputs_[name] = id;
}

template <typename T>
const Tensor<T>& Graph<T>::parameter_value(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
  return nodes_[it->second].value;
}

template <typename T>
Tensor<T>& Graph<T>::parameter_ref(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
  return nodes_[it->second].value;
}

template <typename T>
void Graph<T>::set_parameter(const std::string& name, const TensorT& value) {
  TensorT& dst = parameter_ref(name);
  if (dst.shape() != value.shape()) {
    throw ShapeError("parameter " + name + " expects " + shape_str(dst.shape()) + ", got " +
                     shape_str(value.shape()));
  }
  dst = value;
}

template <typename T>
std::vector<std::string> Graph<T>::parameter_names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : params_) out.push_back(k);
  return out;
}

template <typename T>
std::vector<std::string> Graph<T>::input_names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : inputs_) out.push_back(k);
  return out;
}

template <typename T>
std::vector<std::string> Graph<T>::output_names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : outputs_) out.push_back(k);
  return out;
}

template <typename T>
NodeId Graph<T>::leaf(const std::string& name) const {
  if (auto it = inputs_.find(name); it != inputs_.end()) return it->second;
  if (auto it = params_.find(name); it != params_.end()) return it->second;
  throw std::out_of_range("no leaf named " + name);
}

template <typename T>
typename Graph<T>::Bindings Graph<T>::eval(const Bindings& inputs, const EvalOptions& options) {
  for (const auto& [name, id] : inputs_) {
    auto it = inputs.find(name);
    if (it == inputs.end()) throw std::invalid_argument("unbound graph input: " + name);
    if (it->second.shape() != nodes_[id].shape) {
      throw ShapeError("input " + name + " expects " + shape_str(nodes_[id].shape) + ", got " +
                       shape_str(it->second.shape()));
    }
    if (!it->second.all_finite()) throw NumericError("non-finite value bound to input " + name);
    nodes_[id].value = it->second;
  }
  const bool freeze = options.freeze_stop_gradients && evaluated_;
  for (Node& n : nodes_) {
    switch (n.op) {
      case OpKind::Input:
      case OpKind::Parameter:
      case OpKind::Constant:
        continue;
      case OpKind::StopGradient:
        if (freeze) continue;
        break;
      default:
        break;
    }
    if (profiling_) {
      const auto t0 = std::chrono::steady_clock::now();
      forward(n);
      auto& rec = profile_[op_name(n.op)];
      rec.forward_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      ++rec.calls;
    } else {
      forward(n);
    }
    if (!n.value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op_name(n.op) + " node");
    }
  }
  evaluated_ = true;
  Bindings out;
  for (const auto& [name, id] : outputs_) out.emplace(name, nodes_[id].value);
  return out;
}

template <typename T>
void Graph<T>::forward(Node& n) {
  TensorT& y = n.value;
  y.reset(n.shape);
  T* yd = y.data().data();
  const std::size_t count = y.size();

  auto in = [&](std::size_t k) -> const TensorT& { return nodes_[n.in[k]].value; };

  switch (n.op) {
    case OpKind::MatMul: {
      const TensorT& A = in(0);
      const TensorT& B = in(1);
      if (A.rank() == 2) {
        const auto rows = static_cast<Eigen::Index>(A.dim(0));
        const auto inner = static_cast<Eigen::Index>(A.dim(1));
        const auto cols = static_cast<Eigen::Index>(B.dim(1));
        MapM<T>(yd, rows, cols).noalias() =
            MapC<T>(A.data().data(), rows, inner) * MapC<T>(B.data().data(), inner, cols);
      } else {
        const std::size_t batch = A.dim(0);
        const auto rows = static_cast<Eigen::Index>(A.dim(1));
        const auto inner = static_cast<Eigen::Index>(A.dim(2));
        const auto cols = static_cast<Eigen::Index>(B.dim(2));
        for (std::size_t bi = 0; bi < batch; ++bi) {
          MapM<T>(yd + bi * rows * cols, rows, cols).noalias() =
              MapC<T>(A.data().data() + bi * rows * inner, rows, inner) *
              MapC<T>(B.data().data() + bi * inner * cols, inner, cols);
        }
      }
      return;
    }
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      const TensorT& A = in(0);
      const TensorT& B = in(1);
      const bool sa = A.size() == 1 && A.rank() == 0 && count != 1;
      const bool sb = B.size() == 1 && B.rank() == 0 && count != 1;
      if (!sa && !sb) {
        const T* ad = A.data().data();
        const T* bd = B.data().data();
        if (n.op == OpKind::Add) {
          for (std::size_t i = 0; i < count; ++i) yd[i] = ad[i] + bd[i];
        } else if (n.op == OpKind::Sub) {
          for (std::size_t i = 0; i < count; ++i) yd[i] = ad[i] - bd[i];
        } else {
          for (std::size_t i = 0; i < count; ++i) yd[i] = ad[i] * bd[i];
        }
        return;
      }
      for (std::size_t i = 0; i < count; ++i) {
        const T x = sa ? A[0] : A[i];
        const T z = sb ? B[0] : B[i];
        yd[i] = n.op == OpKind::Add ? x + z : (n.op == OpKind::Sub ? x - z : x * z);
      }
      return;
    }
    case OpKind::Scale: {
      const T s = static_cast<T>(n.a);
      const TensorT& A = in(0);
      for (std::size_t i = 0; i < count; ++i) yd[i] = A[i] * s;
      return;
    }
    case OpKind::AddScalar: {
      const T s = static_cast<T>(n.a);
      const TensorT& A = in(0);
      for (std::size_t i = 0; i < count; ++i) yd[i] = A[i] + s;
      return;
    }
    case OpKind::Relu: {
      const TensorT& A = in(0);
      for (std::size_t i = 0; i < count; ++i) yd[i] = A[i] > T(0) ? A[i] : T(0);
      return;
    }
    case OpKind::Tanh: {
      const TensorT& A = in(0);
      for (std::size_t i = 0; i < count; ++i) yd[i] = std::tanh(A[i]);
      return;
    }
    case OpKind::Exp: {
      const TensorT& A = in(0);
      for (std::size_t i = 0; i < count; ++i) yd[i] = std::exp(A[i]);
      return;
    }
    case OpKind::Log: {
      const TensorT& A = in(0);
      for (std::size_t i = 0; i < count; ++i) yd[i] = std::log(A[i]);
      return;
    }
    case OpKind::Abs: {
      const TensorT& A = in(0);
      for (std::size_t i = 0; i < count; ++i) yd[i] = std::abs(A[i]);
      return;
    }
    case OpKind::Gelu: {
      const auto x = ArrC<T>(in(0).data().data(), Eigen::Index(count));
      ArrM<T>(yd, Eigen::Index(count)) = T(0.5) * x * (T(1) + (T(kGeluC) * (x + T(kGeluA) * x * x * x)).tanh());
      return;
    }
    case OpKind::Clamp: {
      const TensorT& A = in(0);
      const T lo = static_cast<T>(n.a);
      const T hi = static_cast<T>(n.b);
      for (std::size_t i = 0; i < count; ++i) yd[i] = std::clamp(A[i], lo, hi);
      return;
    }
    case OpKind::SoftThreshold: {
      const TensorT& A = in(0);
      const T lam = static_cast<T>(n.a);
      for (std::size_t i = 0; i < count; ++i) {
        const T m = std::abs(A[i]) - lam;
        yd[i] = m > T(0) ? (A[i] > T(0) ? m : -m) : T(0);
      }
      return;
    }
    case OpKind::Softmax:
    case OpKind::LogSoftmax: {
      const TensorT& A = in(0);
      const std::size_t cols = n.shape.back();
      const std::size_t rows = cols ? count / cols : 0;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* x = A.data().data() + r * cols;
        T* o = yd + r * cols;
        const T mx = ArrC<T>(x, Eigen::Index(cols)).maxCoeff();
        if (n.op == OpKind::Softmax) {
          auto e = ArrM<T>(o, Eigen::Index(cols));
          e = (ArrC<T>(x, Eigen::Index(cols)) - mx).exp();
          e /= e.sum();
        } else {
          T s = 0;
          for (std::size_t j = 0; j < cols; ++j) s += std::exp(x[j] - mx);
          const T lse = std::log(s);
          for (std::size_t j = 0; j < cols; ++j) o[j] = x[j] - mx - lse;
        }
      }
      return;
    }
    case OpKind::LayerNorm: {
      const TensorT& A = in(0);
      const std::size_t cols = n.shape.back();
      const std::size_t rows = cols ? count / cols : 0;
      const T eps = static_cast<T>(n.a);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* x = A.data().data() + r * cols;
        T* o = yd + r * cols;
        T mu = 0;
        for (std::size_t j = 0; j < cols; ++j) mu += x[j];
        mu /= static_cast<T>(cols);
        T var = 0;
        for (std::size_t j = 0; j < cols; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<T>(cols);
        const T rstd = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < cols; ++j) o[j] = (x[j] - mu) * rstd;
      }
      return;
    }
    case OpKind::L2Norm: {
      const TensorT& A = in(0);
      const std::size_t cols = A.shape().back();
      for (std::size_t r = 0; r < count; ++r) {
        const T* x = A.data().data() + r * cols;
        T s = 0;
        for (std::size_t j = 0; j < cols; ++j) s += x[j] * x[j];
        yd[r] = std::sqrt(s);
      }
      return;
    }
    case OpKind::Cosine: {
      const TensorT& A = in(0);
      const TensorT& B = in(1);
      const std::size_t cols = A.shape().back();
      for (std::size_t r = 0; r < count; ++r) {
        const T* a = A.data().data() + r * cols;
        const T* b = B.data().data() + r * cols;
        T dot = 0, na = 0, nb = 0;
        for (std::size_t j = 0; j < cols; ++j) {
          dot += a[j] * b[j];
          na += a[j] * a[j];
          nb += b[j] * b[j];
        }
        yd[r] = (na > T(0) && nb > T(0)) ? dot / (std::sqrt(na) * std::sqrt(nb)) : T(0);
      }
      return;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      const TensorT& A = in(0);
      if (n.all_axes) {
        T s = 0;
        for (T v : A.data()) s += v;
        yd[0] = n.op == OpKind::Mean ? s / static_cast<T>(std::max<std::size_t>(A.size(), 1)) : s;
        return;
      }
      const Shape& s = A.shape();
      const std::size_t len = s[n.axis];
      std::size_t inner = 1;
      for (std::size_t d = n.axis + 1; d < s.size(); ++d) inner *= s[d];
      const std::size_t outer = len ? A.size() / (len * inner) : 0;
      std::fill(yd, yd + count, T(0));
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < len; ++k) {
          const T* src = A.data().data() + (o * len + k) * inner;
          T* dst = yd + o * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
      }
      if (n.op == OpKind::Mean && len) {
        for (std::size_t i = 0; i < count; ++i) yd[i] /= static_cast<T>(len);
      }
      return;
    }
    case OpKind::Concat: {
      std::size_t outer = 1;
      for (std::size_t d = 0; d < n.axis; ++d) outer *= n.shape[d];
      const std::size_t out_block = outer ? count / outer : 0;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        const TensorT& P = in(k);
        const std::size_t block = outer ? P.size() / outer : 0;
        for (std::size_t o = 0; o < outer; ++o) {
          std::copy_n(P.data().data() + o * block, block, yd + o * out_block + offset);
        }
        offset += block;
      }
      return;
    }
    case OpKind::Permute: {
      const TensorT& A = in(0);
      const Shape st = strides_of(A.shape());
      Shape src(n.perm.size());
      for (std::size_t i = 0; i < n.perm.size(); ++i) src[i] = st[n.perm[i]];
      const T* ad = A.data().data();
      for_each_strided(n.shape, src, [&](std::size_t o, std::size_t s) { yd[o] = ad[s]; });
      return;
    }
    case OpKind::Reshape:
    case OpKind::StopGradient: {
      const TensorT& A = in(0);
      std::copy(A.data().begin(), A.data().end(), yd);
      return;
    }
    case OpKind::Expand: {
      const TensorT& A = in(0);
      Shape st = strides_of(A.shape());
      for (std::size_t d = 0; d < st.size(); ++d) {
        if (A.dim(d) == 1) st[d] = 0;
      }
      const T* ad = A.data().data();
      for_each_strided(n.shape, st, [&](std::size_t o, std::size_t s) { yd[o] = ad[s]; });
      return;
    }
    case OpKind::Input:
    case OpKind::Parameter:
    case OpKind::Constant:
      return;
  }
  throw std::logic_error("unknown op kind in graph evaluation");
}

template <typename T>
typename Graph<T>::Bindings Graph<T>::grad(NodeId scalar_output, const GradOptions& options) {
  if (!evaluated_) throw std::logic_error("grad() called before eval()");
  const Node& out = at(scalar_output);
  if (!out.shape.empty()) throw ShapeError("grad requires a rank-0 output, got " + shape_str(out.shape));

  std::vector<char> live(nodes_.size(), 0);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    switch (n.op) {
      case OpKind::Parameter: live[i] = n.trainable; break;
      case OpKind::Input: live[i] = options.include_inputs; break;
      case OpKind::Constant:
      case OpKind::StopGradient: live[i] = 0; break;
      default:
        for (NodeId j : n.in) live[i] = live[i] || live[j];
    }
  }

  std::vector<TensorT> adj(nodes_.size());
  std::vector<char> has(nodes_.size(), 0);
  adj[scalar_output] = TensorT::scalar(T(1));
  has[scalar_output] = 1;

  for (std::size_t i = scalar_output + 1; i-- > 0;) {
    if (!has[i] || !live[i]) continue;
    const Node& n = nodes_[i];
    if (n.op == OpKind::Input || n.op == OpKind::Parameter || n.op == OpKind::Constant) continue;
    for (NodeId j : n.in) {
      if (live[j] && !has[j]) {
        adj[j] = TensorT(nodes_[j].shape);
        has[j] = 1;
      }
    }
    if (profiling_) {
      const auto t0 = std::chrono::steady_clock::now();
      backward(n, adj[i], adj, live);
      profile_[op_name(n.op)].backward_seconds +=
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    } else {
      backward(n, adj[i], adj, live);
    }
    // release intermediate adjoints early; leaves are kept for the result
    adj[i] = TensorT();
  }

  Bindings result;
  for (const auto& [name, id] : params_) {
    if (!nodes_[id].trainable) continue;
    result.emplace(name, has[id] ? adj[id] : TensorT(nodes_[id].shape));
  }
  if (options.include_inputs) {
    for (const auto& [name, id] : inputs_) {
      result.emplace(name, has[id] ? adj[id] : TensorT(nodes_[id].shape));
    }
  }
  return result;
}

template <typename T>
void Graph<T>::backward(const Node& n, const TensorT& g, std::vector<TensorT>& adj,
                        const std::vector<char>& live) {
  const T* gd = g.data().data();
  const std::size_t count = g.size();
  auto in = [&](std::size_t k) -> const TensorT& { return nodes_[n.in[k]].value; };
  auto want = [&](std::size_t k) { return live[n.in[k]] != 0; };
  auto dst = [&](std::size_t k) -> T* { return adj[n.in[k]].data().data(); };
  const T* yd = n.value.data().data();

  switch (n.op) {
    case OpKind::MatMul: {
      const TensorT& A = in(0);
      const TensorT& B = in(1);
      const bool batched = A.rank() == 3;
      const std::size_t batch = batched ? A.dim(0) : 1;
      const auto rows = static_cast<Eigen::Index>(batched ? A.dim(1) : A.dim(0));
      const auto inner = static_cast<Eigen::Index>(batched ? A.dim(2) : A.dim(1));
      const auto cols = static_cast<Eigen::Index>(batched ? B.dim(2) : B.dim(1));
      for (std::size_t bi = 0; bi < batch; ++bi) {
        MapC<T> G(gd + bi * rows * cols, rows, cols);
        if (want(0)) {
          MapM<T>(dst(0) + bi * rows * inner, rows, inner).noalias() +=
              G * MapC<T>(B.data().data() + bi * inner * cols, inner, cols).transpose();
        }
        if (want(1)) {
          MapM<T>(dst(1) + bi * inner * cols, inner, cols).noalias() +=
              MapC<T>(A.data().data() + bi * rows * inner, rows, inner).transpose() * G;
        }
      }
      return;
    }
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      const TensorT& A = in(0);
      const TensorT& B = in(1);
      const bool sa = A.rank() == 0 && count != 1;
      const bool sb = B.rank() == 0 && count != 1;
      const T sign_b = n.op == OpKind::Sub ? T(-1) : T(1);
      if (want(0)) {
        T* da = dst(0);
        for (std::size_t i = 0; i < count; ++i) {
          const T v = n.op == OpKind::Mul ? gd[i] * (sb ? B[0] : B[i]) : gd[i];
          if (sa) da[0] += v; else da[i] += v;
        }
      }
      if (want(1)) {
        T* db = dst(1);
        for (std::size_t i = 0; i < count; ++i) {
          const T v = n.op == OpKind::Mul ? gd[i] * (sa ? A[0] : A[i]) : sign_b * gd[i];
          if (sb) db[0] += v; else db[i] += v;
        }
      }
      return;
    }
    case OpKind::Scale: {
      const T s = static_cast<T>(n.a);
      T* d = dst(0);
      for (std::size_t i = 0; i < count; ++i) d[i] += gd[i] * s;
      return;
    }
    case OpKind::AddScalar:
    case OpKind::Reshape: {
      T* d = dst(0);
      for (std::size_t i = 0; i < count; ++i) d[i] += gd[i];
      return;
    }
    case OpKind::Relu: {
      const TensorT& A = in(0);
      T* d = dst(0);
      for (std::size_t i = 0; i < count; ++i) d[i] += A[i] > T(0) ? gd[i] : T(0);
      return;
    }
    case OpKind::Tanh: {
      T* d = dst(0);
      for (std::size_t i = 0; i < count; ++i) d[i] += gd[i] * (T(1) - yd[i] * yd[i]);
      return;
    }
    case OpKind::Exp: {
      T* d = dst(0);
      for (std::size_t i = 0; i < count; ++i) d[i] += gd[i] * yd[i];
      return;
    }
    case OpKind::Log: {
      const TensorT& A = in(0);
      T* d = dst(0);
      for (std::size_t i = 0; i < count; ++i) d[i] += gd[i] / A[i];
      return;
    }
    case OpKind::Abs: {
      const TensorT& A = in(0);
      T* d = dst(0);
      for (std::size_t i = 0; i < count; ++i) {
        d[i] += A[i] > T(0) ? gd[i] : (A[i] < T(0) ? -gd[i] : T(0));
      }
      return;
    }
    case OpKind::Gelu: {
      const Eigen::Index m = Eigen::Index(count);
      const auto x = ArrC<T>(in(0).data().data(), m);
      const Eigen::Array<T, Eigen::Dynamic, 1> t = (T(kGeluC) * (x + T(kGeluA) * x * x * x)).tanh();
      ArrM<T>(dst(0), m) += ArrC<T>(gd, m) * (T(0.5) * (T(1) + t) +
                                               T(0.5) * x * (T(1) - t * t) * T(kGeluC) * (T(1) + T(3 * kGeluA) * x * x));
      return;
    }
    case OpKind::Clamp: {
      const TensorT& A = in(0);
      const T lo = static_cast<T>(n.a);
      const T hi = static_cast<T>(n.b);
      T* d = dst(0);
      for (std::size_t i = 0; i < count; ++i) d[i] += (A[i] >= lo && A[i] <= hi) ? gd[i] : T(0);
      return;
    }
    case OpKind::SoftThreshold: {
      const TensorT& A = in(0);
      const T lam = static_cast<T>(n.a);
      T* d = dst(0);
      for (std::size_t i = 0; i < count; ++i) d[i] += std::abs(A[i]) > lam ? gd[i] : T(0);
      return;
    }
    case OpKind::Softmax: {
      const std::size_t cols = n.shape.back();
      const std::size_t rows = cols ? count / cols : 0;
      T* d = dst(0);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = yd + r * cols;
        const T* gr = gd + r * cols;
        T dot = 0;
        for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * y[j];
        for (std::size_t j = 0; j < cols; ++j) d[r * cols + j] += y[j] * (gr[j] - dot);
      }
      return;
    }
    case OpKind::LogSoftmax: {
      const std::size_t cols = n.shape.back();
      const std::size_t rows = cols ? count / cols : 0;
      T* d = dst(0);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = yd + r * cols;
        const T* gr = gd + r * cols;
        T s = 0;
        for (std::size_t j = 0; j < cols; ++j) s += gr[j];
        for (std::size_t j = 0; j < cols; ++j) d[r * cols + j] += gr[j] - std::exp(y[j]) * s;
      }
      return;
    }
    case OpKind::LayerNorm: {
      const TensorT& A = in(0);
      const std::size_t cols = n.shape.back();
      const std::size_t rows = cols ? count / cols : 0;
      const T eps = static_cast<T>(n.a);
      const T inv_n = T(1) / static_cast<T>(cols);
      T* d = dst(0);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* x = A.data().data() + r * cols;
        const T* y = yd + r * cols;
        const T* gr = gd + r * cols;
        T mu = 0;
        for (std::size_t j = 0; j < cols; ++j) mu += x[j];
        mu *= inv_n;
        T var = 0;
        for (std::size_t j = 0; j < cols; ++j) var += (x[j] - mu) * (x[j] - mu);
        var *= inv_n;
        const T rstd = T(1) / std::sqrt(var + eps);
        T gmean = 0, gy = 0;
        for (std::size_t j = 0; j < cols; ++j) {
          gmean += gr[j];
          gy += gr[j] * y[j];
        }
        gmean *= inv_n;
        gy *= inv_n;
        for (std::size_t j = 0; j < cols; ++j) d[r * cols + j] += rstd * (gr[j] - gmean - y[j] * gy);
      }
      return;
    }
    case OpKind::L2Norm: {
      const TensorT& A = in(0);
      const std::size_t cols = A.shape().back();
      T* d = dst(0);
      for (std::size_t r = 0; r < count; ++r) {
        if (yd[r] <= T(0)) continue;
        const T f = gd[r] / yd[r];
        for (std::size_t j = 0; j < cols; ++j) d[r * cols + j] += f * A[r * cols + j];
      }
      return;
    }
    case OpKind::Cosine: {
      const TensorT& A = in(0);
      const TensorT& B = in(1);
      const std::size_t cols = A.shape().back();
      for (std::size_t r = 0; r < count; ++r) {
        const T* a = A.data().data() + r * cols;
        const T* b = B.data().data() + r * cols;
        T na = 0, nb = 0;
        for (std::size_t j = 0; j < cols; ++j) {
          na += a[j] * a[j];
          nb += b[j] * b[j];
        }
        if (!(na > T(0) && nb > T(0))) continue;
        const T ra = std::sqrt(na), rb = std::sqrt(nb);
        const T c = yd[r];
        if (want(0)) {
          T* d = dst(0) + r * cols;
          for (std::size_t j = 0; j < cols; ++j) d[j] += gd[r] * (b[j] / (ra * rb) - c * a[j] / na);
        }
        if (want(1)) {
          T* d = dst(1) + r * cols;
          for (std::size_t j = 0; j < cols; ++j) d[j] += gd[r] * (a[j] / (ra * rb) - c * b[j] / nb);
        }
      }
      return;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      const TensorT& A = in(0);
      T* d = dst(0);
      if (n.all_axes) {
        const T v = n.op == OpKind::Mean ? gd[0] / static_cast<T>(std::max<std::size_t>(A.size(), 1)) : gd[0];
        for (std::size_t i = 0; i < A.size(); ++i) d[i] += v;
        return;
      }
      const Shape& s = A.shape();
      const std::size_t len = s[n.axis];
      std::size_t inner = 1;
      for (std::size_t k = n.axis + 1; k < s.size(); ++k) inner *= s[k];
      const std::size_t outer = len ? A.size() / (len * inner) : 0;
      const T f = n.op == OpKind::Mean && len ? T(1) / static_cast<T>(len) : T(1);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < len; ++k) {
          T* dd = d + (o * len + k) * inner;
          const T* src = gd + o * inner;
          for (std::size_t i = 0; i < inner; ++i) dd[i] += src[i] * f;
        }
      }
      return;
    }
    case OpKind::Concat: {
      std::size_t outer = 1;
      for (std::size_t k = 0; k < n.axis; ++k) outer *= n.shape[k];
      const std::size_t out_block = outer ? count / outer : 0;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        const std::size_t block = outer ? in(k).size() / outer : 0;
        if (want(k)) {
          T* d = dst(k);
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = gd + o * out_block + offset;
            for (std::size_t i = 0; i < block; ++i) d[o * block + i] += src[i];
          }
        }
        offset += block;
      }
      return;
    }
    case OpKind::Permute: {
      const TensorT& A = in(0);
      const Shape st = strides_of(A.shape());
      Shape src(n.perm.size());
      for (std::size_t i = 0; i < n.perm.size(); ++i) src[i] = st[n.perm[i]];
      T* d = dst(0);
      for_each_strided(n.shape, src, [&](std::size_t o, std::size_t s) { d[s] += gd[o]; });
      return;
    }
    case OpKind::Expand: {
      const TensorT& A = in(0);
      Shape st = strides_of(A.shape());
      for (std::size_t k = 0; k < st.size(); ++k) {
        if (A.dim(k) == 1) st[k] = 0;
      }
      T* d = dst(0);
      for_each_strided(n.shape, st, [&](std::size_t o, std::size_t s) { d[s] += gd[o]; });
      return;
    }
    case OpKind::StopGradient:
    case OpKind::Input:
    case OpKind::Parameter:
    case OpKind::Constant:
      return;
  }
  throw std::logic_error("unknown op kind in graph differentiation");
}

template class Graph<float>;
template class Graph<double>;

double fd_check(Graph<double>& graph, const std::map<std::string, Tensor<double>>& inputs,
                const std::string& leaf, NodeId scalar_output) {
  const NodeId leaf_id = graph.leaf(leaf);
  const bool is_input = graph.kind(leaf_id) == OpKind::Input;

  graph.eval(inputs);
  GradOptions gopt;
  gopt.include_inputs = is_input;
  const auto grads = graph.grad(scalar_output, gopt);
  const Tensor<double> analytic = grads.count(leaf) ? grads.at(leaf) : Tensor<double>(graph.shape(leaf_id));

  std::map<std::string, Tensor<double>> work = inputs;
  Tensor<double> base = is_input ? inputs.at(leaf) : graph.parameter_value(leaf);
  EvalOptions frozen;
  frozen.freeze_stop_gradients = true;

  auto evaluate = [&](const Tensor<double>& v) {
    if (is_input) {
      work[leaf] = v;
    } else {
      graph.set_parameter(leaf, v);
    }
    graph.eval(work, frozen);
    return graph.value(scalar_output).item();
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    const double x = base[i];
    const double h = 1e-6 * std::max(1.0, std::abs(x));
    Tensor<double> p = base;
    p[i] = x + h;
    const double fp = evaluate(p);
    p[i] = x - h;
    const double fm = evaluate(p);
    const double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
  }
  // restore the unperturbed state
  if (is_input) {
    work[leaf] = base;
  } else {
    graph.set_parameter(leaf, base);
  }
  graph.eval(work);
  return worst;
}

}  // namespace absvit::num
