// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <functional>

#include "absvit/numerics/graph.hpp"
#include "absvit/rng.hpp"

using absvit::Rng;
using absvit::num::fd_check;
using absvit::num::Graph;
using absvit::num::NodeId;
using absvit::num::NumericError;
using absvit::num::Shape;
using absvit::num::ShapeError;
using absvit::num::Tensor;

namespace {

using T64 = Tensor<double>;

T64 random_tensor(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  T64 t(shape);
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Keeps |x - k| >= margin for every kink k so central differences stay on one side.
T64 away_from(Rng& rng, const Shape& shape, std::vector<double> kinks, double margin = 1e-2) {
  T64 t(shape);
  for (auto& v : t.storage()) {
    bool ok = false;
    while (!ok) {
      v = rng.uniform(-2.0, 2.0);
      ok = true;
      for (double k : kinks) ok = ok && std::abs(v - k) >= margin;
    }
  }
  return t;
}

// loss = sum(op(x...) * R) with R a fixed random weighting.
struct OpCase {
  std::string name;
  std::function<NodeId(Graph<double>&, Rng&, std::map<std::string, T64>&)> build;
};

NodeId weighted_sum(Graph<double>& g, Rng& rng, NodeId y) {
  const NodeId r = g.constant(random_tensor(rng, g.shape(y)));
  return g.sum(g.mul(y, r));
}

std::vector<OpCase> op_cases() {
  auto in = [](Graph<double>& g, std::map<std::string, T64>& b, const std::string& name, T64 v) {
    const NodeId id = g.input(name, v.shape());
    b[name] = std::move(v);
    return id;
  };
  std::vector<OpCase> cases;
  auto unary = [&](std::string name, std::function<NodeId(Graph<double>&, NodeId)> op,
                   std::vector<double> kinks = {}, double lo = -2, double hi = 2) {
    cases.push_back({name, [=](Graph<double>& g, Rng& rng, std::map<std::string, T64>& b) {
                       T64 x = kinks.empty() ? random_tensor(rng, {3, 4}, lo, hi) : away_from(rng, {3, 4}, kinks);
                       return weighted_sum(g, rng, op(g, in(g, b, "x", std::move(x))));
                     }});
  };
  cases.push_back({"matmul", [=](Graph<double>& g, Rng& rng, std::map<std::string, T64>& b) {
                     const NodeId x = in(g, b, "x", random_tensor(rng, {3, 4}));
                     const NodeId w = in(g, b, "w", random_tensor(rng, {4, 2}));
                     return weighted_sum(g, rng, g.matmul(x, w));
                   }});
  cases.push_back({"matmul_batched", [=](Graph<double>& g, Rng& rng, std::map<std::string, T64>& b) {
                     const NodeId x = in(g, b, "x", random_tensor(rng, {2, 3, 4}));
                     const NodeId w = in(g, b, "w", random_tensor(rng, {2, 4, 5}));
                     return weighted_sum(g, rng, g.matmul(x, w));
                   }});
  for (auto kind : {0, 1, 2}) {
    const char* names[] = {"add", "sub", "mul"};
    cases.push_back({names[kind], [=](Graph<double>& g, Rng& rng, std::map<std::string, T64>& b) {
                       const NodeId x = in(g, b, "x", random_tensor(rng, {3, 4}));
                       const NodeId w = in(g, b, "w", random_tensor(rng, {3, 4}));
                       const NodeId y = kind == 0 ? g.add(x, w) : kind == 1 ? g.sub(x, w) : g.mul(x, w);
                       return weighted_sum(g, rng, y);
                     }});
  }
  cases.push_back({"mul_scalar_broadcast", [=](Graph<double>& g, Rng& rng, std::map<std::string, T64>& b) {
                     const NodeId x = in(g, b, "x", random_tensor(rng, {3, 4}));
                     const NodeId s = in(g, b, "s", random_tensor(rng, {}));
                     return weighted_sum(g, rng, g.mul(s, x));
                   }});
  unary("scale", [](Graph<double>& g, NodeId x) { return g.scale(x, -1.7); });
  unary("add_scalar", [](Graph<double>& g, NodeId x) { return g.add_scalar(x, 0.3); });
  unary("relu", [](Graph<double>& g, NodeId x) { return g.relu(x); }, {0.0});
  unary("tanh", [](Graph<double>& g, NodeId x) { return g.tanh(x); });
  unary("exp", [](Graph<double>& g, NodeId x) { return g.exp(x); });
  unary("log", [](Graph<double>& g, NodeId x) { return g.log(x); }, {}, 0.2, 3.0);
  unary("abs", [](Graph<double>& g, NodeId x) { return g.abs(x); }, {0.0});
  unary("gelu", [](Graph<double>& g, NodeId x) { return g.gelu(x); });
  unary("clamp", [](Graph<double>& g, NodeId x) { return g.clamp(x, -0.5, 0.8); }, {-0.5, 0.8});
  unary("soft_threshold", [](Graph<double>& g, NodeId x) { return g.soft_threshold(x, 0.4); }, {-0.4, 0.4});
  unary("softmax", [](Graph<double>& g, NodeId x) { return g.softmax(x); });
  unary("log_softmax", [](Graph<double>& g, NodeId x) { return g.log_softmax(x); });
  unary("layer_norm", [](Graph<double>& g, NodeId x) { return g.layer_norm(x); });
  unary("l2_norm", [](Graph<double>& g, NodeId x) { return g.l2_norm(x); });
  unary("sum_axis", [](Graph<double>& g, NodeId x) { return g.sum(x, 0); });
  unary("mean_axis", [](Graph<double>& g, NodeId x) { return g.mean(x, 1); });
  unary("mean_all", [](Graph<double>& g, NodeId x) { return g.reshape(g.mean(x), {1}); });
  unary("transpose", [](Graph<double>& g, NodeId x) { return g.transpose(x); });
  unary("reshape", [](Graph<double>& g, NodeId x) { return g.reshape(x, {2, 6}); });
  unary("expand", [](Graph<double>& g, NodeId x) {
    return g.expand(g.reshape(x, {3, 1, 4}), {3, 5, 4});
  });
  cases.push_back({"permute3", [=](Graph<double>& g, Rng& rng, std::map<std::string, T64>& b) {
                     const NodeId x = in(g, b, "x", random_tensor(rng, {2, 3, 4}));
                     return weighted_sum(g, rng, g.permute(x, {2, 0, 1}));
                   }});
  cases.push_back({"cosine", [=](Graph<double>& g, Rng& rng, std::map<std::string, T64>& b) {
                     const NodeId x = in(g, b, "x", random_tensor(rng, {3, 4}));
                     const NodeId w = in(g, b, "w", random_tensor(rng, {3, 4}));
                     return weighted_sum(g, rng, g.cosine(x, w));
                   }});
  cases.push_back({"concat", [=](Graph<double>& g, Rng& rng, std::map<std::string, T64>& b) {
                     const NodeId x = in(g, b, "x", random_tensor(rng, {3, 2}));
                     const NodeId w = in(g, b, "w", random_tensor(rng, {3, 4}));
                     return weighted_sum(g, rng, g.concat({x, w, x}, 1));
                   }});
  return cases;
}

}  // namespace

TEST(Numerics, MatmulIdentity) {
  Graph<double> g;
  Rng rng(1);
  const T64 a = random_tensor(rng, {3, 5});
  const NodeId eye = g.constant(T64({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  const NodeId x = g.input("a", {3, 5});
  g.mark_output("y", g.matmul(eye, x));
  EXPECT_EQ(g.eval({{"a", a}}).at("y"), a);
}

TEST(Numerics, SoftmaxOfEqualLogitsIsUniform) {
  Graph<double> g;
  g.mark_output("p", g.softmax(g.constant(T64({2}, {0.0, 0.0}))));
  const auto p = g.eval({}).at("p");
  EXPECT_EQ(p[0], 0.5);
  EXPECT_EQ(p[1], 0.5);
}

TEST(Numerics, LayerNormOfConstantVectorIsZero) {
  Graph<double> g;
  g.mark_output("y", g.layer_norm(g.constant(T64({1, 4}, {2.5, 2.5, 2.5, 2.5}))));
  const auto y = g.eval({}).at("y");
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Numerics, SquareDerivative) {
  Graph<double> g;
  const NodeId x = g.parameter("x", T64::scalar(3.0));
  const NodeId y = g.mul(x, x);
  g.eval({});
  EXPECT_DOUBLE_EQ(g.grad(y).at("x").item(), 6.0);
}

TEST(Numerics, StopGradientBlocksAdjointExactly) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Graph<double> g;
    const NodeId x = g.parameter("x", T64::scalar(rng.uniform(-5, 5)));
    const NodeId y = g.parameter("y", T64::scalar(rng.uniform(-5, 5)));
    const NodeId out = g.mul(g.stop_gradient(x), y);
    g.eval({});
    const auto grads = g.grad(out);
    EXPECT_EQ(grads.at("x").item(), 0.0);
    EXPECT_EQ(grads.at("y").item(), g.parameter_value("x").item());
  }
}

TEST(Numerics, FdCheckLinearIsExact) {
  Graph<double> g;
  const NodeId a = g.parameter("a", T64({4}, {0.5, -1.0, 2.0, 3.0}));
  const NodeId x = g.input("x", {4});
  const NodeId y = g.sum(g.mul(a, x));
  const std::map<std::string, T64> in{{"x", T64({4}, {1.0, 2.0, -3.0, 0.25})}};
  EXPECT_LE(fd_check(g, in, "a", y), 1e-8);
  EXPECT_LE(fd_check(g, in, "x", y), 1e-8);
}

TEST(Numerics, FdCheckTanhChain) {
  Rng rng(3);
  Graph<double> g;
  const NodeId w = g.parameter("w", random_tensor(rng, {4, 4}));
  NodeId h = g.input("x", {2, 4});
  for (int i = 0; i < 3; ++i) h = g.tanh(g.matmul(h, w));
  const NodeId y = g.sum(h);
  EXPECT_LE(fd_check(g, {{"x", random_tensor(rng, {2, 4})}}, "w", y), 1e-4);
}

TEST(Numerics, FdCheckFreezesStopGradient) {
  Rng rng(4);
  Graph<double> g;
  const NodeId x = g.parameter("x", random_tensor(rng, {3}));
  const NodeId sq = g.mul(x, x);
  // y = sum(sg(x*x) * x): analytic d/dx = sg(x*x), matching FD only when sg is frozen.
  const NodeId y = g.sum(g.mul(g.stop_gradient(sq), x));
  EXPECT_LE(fd_check(g, {}, "x", y), 1e-4);
  // a pure sg path gives exact zeros and FD of the frozen function is zero too
  const NodeId z = g.sum(g.stop_gradient(sq));
  EXPECT_LE(fd_check(g, {}, "x", z), 1e-12);
}

TEST(Numerics, RandomCompositeGraphMatchesFiniteDifferences) {
  Rng rng(11);
  for (int seed = 0; seed < 20; ++seed) {
    Graph<double> g;
    const NodeId w = g.parameter("w", random_tensor(rng, {4, 3}));
    const NodeId x = g.input("x", {2, 4});
    const NodeId h = g.gelu(g.matmul(x, w));
    const NodeId p = g.softmax(g.layer_norm(h));
    const NodeId y = g.sum(g.mul(p, g.tanh(h)));
    EXPECT_LE(fd_check(g, {{"x", random_tensor(rng, {2, 4})}}, "w", y), 1e-4) << "seed " << seed;
  }
}

TEST(Numerics, EveryOpPassesFiniteDifferenceCheck) {
  for (const auto& c : op_cases()) {
    for (int seed = 0; seed < 20; ++seed) {
      Rng rng(1000 + seed);
      Graph<double> g;
      std::map<std::string, T64> bindings;
      const NodeId loss = c.build(g, rng, bindings);
      for (const auto& name : g.input_names()) {
        EXPECT_LE(fd_check(g, bindings, name, loss), 1e-4) << c.name << " seed " << seed << " leaf " << name;
      }
    }
  }
}

TEST(Numerics, EvalIsPure) {
  Rng rng(5);
  Graph<float> g;
  const NodeId x = g.input("x", {8, 16});
  const NodeId w = g.parameter("w", random_tensor(rng, {16, 16}).cast<float>());
  g.mark_output("y", g.softmax(g.layer_norm(g.matmul(x, w))));
  const auto in = std::map<std::string, Tensor<float>>{{"x", random_tensor(rng, {8, 16}).cast<float>()}};
  const auto first = g.eval(in).at("y");
  const auto second = g.eval(in).at("y");
  EXPECT_EQ(first, second);
}

TEST(Numerics, ShapeMismatchThrows) {
  Graph<double> g;
  const NodeId a = g.input("a", {2, 3});
  const NodeId b = g.input("b", {2, 3});
  EXPECT_THROW(g.matmul(a, b), ShapeError);
  EXPECT_THROW(g.add(a, g.input("c", {3, 2})), ShapeError);
  EXPECT_THROW(g.expand(a, {4, 3}), ShapeError);
  EXPECT_THROW(g.eval({{"a", T64({2, 3})}, {"b", T64({3, 2})}, {"c", T64({3, 2})}}), ShapeError);
}

TEST(Numerics, NonFiniteIntermediateThrows) {
  Graph<double> g;
  const NodeId x = g.input("x", {2});
  g.log(x);
  EXPECT_THROW(g.eval({{"x", T64({2}, {1.0, -1.0})}}), NumericError);
  EXPECT_THROW(g.eval({{"x", T64({2}, {1.0, 0.0})}}), NumericError);
}

TEST(Numerics, GradRequiresScalarOutput) {
  Graph<double> g;
  const NodeId x = g.parameter("x", T64({2}, {1.0, 2.0}));
  const NodeId y = g.tanh(x);
  g.eval({});
  EXPECT_THROW(g.grad(y), ShapeError);
}

TEST(Numerics, UnreachableParameterGetsZeros) {
  Graph<double> g;
  const NodeId x = g.parameter("x", T64({2}, {1.0, 2.0}));
  g.parameter("unused", T64({3}, {1.0, 2.0, 3.0}));
  const NodeId y = g.sum(x);
  g.eval({});
  const auto grads = g.grad(y);
  for (double v : grads.at("unused").data()) EXPECT_EQ(v, 0.0);
}
