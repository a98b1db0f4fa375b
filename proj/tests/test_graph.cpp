#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "advdpnp/graph.hpp"
#include "advdpnp/losses.hpp"
#include "advdpnp/model.hpp"
#include "advdpnp/rng.hpp"
#include "oracles.hpp"

namespace {

using namespace advdpnp;

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

TEST(Forward, AffineScalar) {
  Graph g;
  int w = g.input("w", {1, 1});
  int x = g.input("x", {1, 1});
  int b = g.input("b", {1});
  int y = g.affine(x, w, b);
  Workspace ws = forward(g, {{"w", Tensor({1, 1}, {2.0})},
                             {"x", Tensor({1, 1}, {3.0})},
                             {"b", Tensor({1}, {1.0})}});
  EXPECT_DOUBLE_EQ(ws.value(y)[0], 7.0);
}

TEST(Forward, ReluNegative) {
  Graph g;
  int x = g.input("x", {1});
  int y = g.relu(x);
  EXPECT_DOUBLE_EQ(forward(g, {{"x", Tensor({1}, {-5.0})}}).value(y)[0], 0.0);
}

TEST(Forward, RandomMlpMatchesStraightLineOracle) {
  Rng rng(11);
  ArchitectureConfig arch{"mlp", {4}, {8, 6, 5}, 3};
  ModelParams params = init_model(arch, 2, 1.0, 99);
  Tensor batch = random_tensor({5, 4}, rng);
  Tensor features = extract_features(params, batch);
  for (int r = 0; r < 5; ++r) {
    std::vector<double> x(batch.row(r), batch.row(r) + 4);
    const auto expected = oracles::mlp_forward(params, x);
    for (int c = 0; c < 3; ++c) {
      EXPECT_NEAR(features.at(r, c), expected[static_cast<std::size_t>(c)], 1e-12);
    }
  }
}

TEST(Forward, ShapeMismatchNamesNode) {
  Graph g;
  g.input("a", {2, 3});
  g.input("b", {3, 3});
  try {
    g.add(0, 1);
    FAIL() << "expected shape error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
}

TEST(Forward, NonFiniteNamesNode) {
  Graph g;
  int x = g.input("x", {1});
  int y = g.log(x);
  try {
    forward(g, {{"x", Tensor({1}, {-1.0})}});
    FAIL() << "expected numeric error";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("log"), std::string::npos);
    EXPECT_NE(msg.find("#" + std::to_string(y)), std::string::npos);
  }
}

TEST(Forward, Determinism) {
  Rng rng(3);
  ArchitectureConfig arch{"mlp", {6}, {10, 10}, 4};
  ModelParams params = init_model(arch, 3, 2.0, 7);
  Tensor batch = random_tensor({4, 6}, rng);
  Tensor f1 = extract_features(params, batch);
  Tensor f2 = extract_features(params, batch);
  for (std::int64_t i = 0; i < f1.numel(); ++i) {
    EXPECT_EQ(f1[i], f2[i]);  // bit-identical
  }
}

TEST(Backward, SquareDerivative) {
  Graph g;
  int x = g.input("x", {1});
  int y = g.sum(g.square(x));
  NamedTensors grads = backward(g, y, {{"x", Tensor({1}, {3.0})}});
  EXPECT_DOUBLE_EQ(grads.at("x")[0], 6.0);
}

TEST(Backward, BarrierZeroesParentGradient) {
  Graph g;
  int x = g.input("x", {2});
  int locked = g.barrier(x);
  int y = g.sum(g.square(locked));
  NamedTensors grads = backward(g, y, {{"x", Tensor({2}, {1.0, 2.0})}});
  EXPECT_DOUBLE_EQ(grads.at("x")[0], 0.0);
  EXPECT_DOUBLE_EQ(grads.at("x")[1], 0.0);
}

TEST(Backward, BarrierFreePathKeepsGradient) {
  // Diamond: y = sum(square(barrier(x))) + sum(x). The barrier cuts only the
  // squared branch, so dx = 1 everywhere.
  Graph g;
  int x = g.input("x", {3});
  int cut = g.sum(g.square(g.barrier(x)));
  int open = g.sum(x);
  int y = g.add(cut, open);
  NamedTensors grads = backward(g, y, {{"x", Tensor({3}, {1.0, -2.0, 3.0})}});
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(grads.at("x")[i], 1.0);
}

TEST(Backward, TwoLayerNetMatchesCentralDifferences) {
  Rng rng(21);
  ArchitectureConfig arch{"mlp", {3}, {5}, 2};
  ModelParams params = init_model(arch, 2, 1.0, 5);

  Graph g;
  int x = g.input("x", {2, 3});
  int f = build_extractor(g, arch, x, nullptr);
  int loss = g.sum(g.square(f));

  NamedTensors point;
  point.emplace("x", random_tensor({2, 3}, rng));
  for (const auto& [name, t] : params.extractor) point.emplace(name, t);

  NamedTensors analytic = backward(g, loss, point);
  auto fn = [&](const NamedTensors& p) { return forward(g, p).value(loss)[0]; };
  NamedTensors numeric = oracles::fd_gradient(fn, point, 1e-5);
  for (const auto& [name, a] : analytic) {
    const Tensor& n = numeric.at(name);
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      const double rel = std::abs(a[i] - n[i]) / std::max(1.0, std::abs(a[i]));
      EXPECT_LE(rel, 1e-4) << name << "[" << i << "]";
    }
  }
}

TEST(Backward, NonScalarOutputRejected) {
  Graph g;
  int x = g.input("x", {2});
  int y = g.square(x);
  EXPECT_THROW(backward(g, y, {{"x", Tensor({2}, {1.0, 2.0})}}), ConfigError);
}

TEST(Backward, Linearity) {
  // backward(a*f + b*g) == a*backward(f) + b*backward(g), coordinate-wise.
  Rng rng(31);
  Tensor x0 = random_tensor({4}, rng);
  const double a = 2.5, b = -1.25;

  Graph gf;
  int xf = gf.input("x", {4});
  int f = gf.sum(gf.square(xf));
  Graph gg;
  int xg = gg.input("x", {4});
  int gg_out = gg.sum(gg.mul(xg, gg.exp(gg.scale(xg, 0.5))));
  Graph gc;
  int xc = gc.input("x", {4});
  int fc = gc.sum(gc.square(xc));
  int gcp = gc.sum(gc.mul(xc, gc.exp(gc.scale(xc, 0.5))));
  int combo = gc.add(gc.scale(fc, a), gc.scale(gcp, b));

  NamedTensors gf_grad = backward(gf, f, {{"x", x0}});
  NamedTensors gg_grad = backward(gg, gg_out, {{"x", x0}});
  NamedTensors gc_grad = backward(gc, combo, {{"x", x0}});
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(gc_grad.at("x")[i],
                a * gf_grad.at("x")[i] + b * gg_grad.at("x")[i], 1e-12);
  }
}

TEST(Backward, Determinism) {
  Rng rng(17);
  ArchitectureConfig arch{"mlp", {4}, {6}, 3};
  ModelParams params = init_model(arch, 3, 1.0, 2);
  Graph g;
  int x = g.input("x", {3, 4});
  int f = build_extractor(g, arch, x, nullptr);
  int loss = g.sum(g.sqrt_abs(f));
  NamedTensors point;
  point.emplace("x", random_tensor({3, 4}, rng));
  for (const auto& [name, t] : params.extractor) point.emplace(name, t);
  NamedTensors g1 = backward(g, loss, point);
  NamedTensors g2 = backward(g, loss, point);
  for (const auto& [name, t1] : g1) {
    const Tensor& t2 = g2.at(name);
    for (std::int64_t i = 0; i < t1.numel(); ++i) EXPECT_EQ(t1[i], t2[i]);
  }
}

TEST(GradCheck, QuadraticIsExact) {
  Graph g;
  int x = g.input("x", {5});
  int y = g.sum(g.square(x));
  Rng rng(41);
  NamedTensors point{{"x", random_tensor({5}, rng)}};
  EXPECT_LE(grad_check(g, y, point, 1e-5), 1e-9);
}

TEST(GradCheck, CrossEntropyOnRandomLogits) {
  Rng rng(43);
  const int classes = 4;
  Graph g;
  int z = g.input("z", {1, classes});
  int p = g.softmax_logits(z);
  int onehot = g.constant(one_hot({2}, classes));
  int loss = g.scale(g.sum(g.mul(onehot, g.log(p))), -1.0);
  NamedTensors point{{"z", random_tensor({1, classes}, rng)}};
  EXPECT_LE(grad_check(g, loss, point, 1e-5), 1e-6);
}

TEST(GradCheck, CompositeLossThreeClassToy) {
  Rng rng(47);
  ArchitectureConfig arch{"mlp", {2}, {6}, 2};
  ModelParams params = init_model(arch, 3, 4.0, 13);
  std::vector<int> labels{0, 1, 2};
  CompositeOptions opts;
  opts.lock_prototypes = false;  // FD sees the whole forward map
  CompositeGraph cg = build_composite(arch, 3, labels, LossWeights{0.1, 0.1, 2.0, 4.0},
                                      opts, nearest_negatives(params.bank));
  NamedTensors point = composite_bindings(params, random_tensor({3, 2}, rng),
                                          random_tensor({3, 2}, rng));
  EXPECT_LE(grad_check(cg.graph, cg.total, point, 1e-5), 1e-4);
}

TEST(GradCheck, RejectsBadStep) {
  Graph g;
  int x = g.input("x", {1});
  int y = g.sum(x);
  EXPECT_THROW(grad_check(g, y, {{"x", Tensor({1}, {1.0})}}, 0.0), ConfigError);
  EXPECT_THROW(grad_check(g, y, {{"x", Tensor({1}, {1.0})}}, 0.5), ConfigError);
}

TEST(Primitives, MaxRoutesToFirstArgmax) {
  Graph g;
  int x = g.input("x", {4});
  int y = g.max(x);
  Workspace ws = forward(g, {{"x", Tensor({4}, {1.0, 7.0, 7.0, 2.0})}});
  EXPECT_DOUBLE_EQ(ws.value(y)[0], 7.0);
  NamedTensors grads = backward(g, y, ws);
  EXPECT_DOUBLE_EQ(grads.at("x")[1], 1.0);
  EXPECT_DOUBLE_EQ(grads.at("x")[2], 0.0);  // tie resolved to the first
}

TEST(Primitives, InnerAndL2NormValuesAndGrads) {
  Graph g;
  int a = g.input("a", {3});
  int b = g.input("b", {3});
  int ip = g.inner(a, b);
  int nrm = g.l2norm(a);
  int y = g.add(ip, nrm);
  NamedTensors point{{"a", Tensor({3}, {3.0, 0.0, 4.0})},
                     {"b", Tensor({3}, {1.0, 2.0, -1.0})}};
  Workspace ws = forward(g, point);
  EXPECT_DOUBLE_EQ(ws.value(ip)[0], -1.0);
  EXPECT_DOUBLE_EQ(ws.value(nrm)[0], 5.0);
  NamedTensors grads = backward(g, y, ws);
  EXPECT_DOUBLE_EQ(grads.at("a")[0], 1.0 + 3.0 / 5.0);
  EXPECT_DOUBLE_EQ(grads.at("b")[2], 4.0);
}

TEST(Primitives, SqrtAbsSmoothedAtZero) {
  Graph g;
  int x = g.input("x", {2});
  int y = g.sum(g.sqrt_abs(x));
  Workspace ws = forward(g, {{"x", Tensor({2}, {0.0, 4.0})}});
  EXPECT_NEAR(ws.value(y)[0], 1e-6 + 2.0, 1e-9);
  NamedTensors grads = backward(g, y, ws);
  EXPECT_DOUBLE_EQ(grads.at("x")[0], 0.0);      // sign(0) = 0
  EXPECT_NEAR(grads.at("x")[1], 0.25, 1e-9);    // 1/(2*sqrt(4))
}

TEST(Primitives, SoftmaxRowsAreStochastic) {
  Rng rng(53);
  Graph g;
  int z = g.input("z", {6, 5});
  int p = g.softmax_logits(z);
  Tensor logits = random_tensor({6, 5}, rng, 5.0);
  Workspace ws = forward(g, {{"z", logits}});
  for (int r = 0; r < 6; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 5; ++c) {
      const double v = ws.value(p).at(r, c);
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Primitives, Conv2dHandValuesAndGradCheck) {
  // 1x1x3x3 input, 1x1x2x2 kernel, stride 1, pad 0.
  Graph g;
  int x = g.input("x", {1, 1, 3, 3});
  int k = g.input("k", {1, 1, 2, 2});
  int b = g.input("b", {1});
  int y = g.conv2d(x, k, b, 1, 0);
  NamedTensors point{
      {"x", Tensor({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9})},
      {"k", Tensor({1, 1, 2, 2}, {1, 0, 0, 1})},
      {"b", Tensor({1}, {0.5})}};
  Workspace ws = forward(g, point);
  // top-left window: 1*1 + 5*1 + 0.5
  EXPECT_DOUBLE_EQ(ws.value(y)[0], 6.5);
  EXPECT_DOUBLE_EQ(ws.value(y)[3], 14.5);  // bottom-right window: 5 + 9 + 0.5

  Graph g2;
  int x2 = g2.input("x", {2, 2, 5, 5});
  int k2 = g2.input("k", {3, 2, 3, 3});
  int b2 = g2.input("b", {3});
  int y2 = g2.sum(g2.relu(g2.conv2d(x2, k2, b2, 2, 1)));
  Rng rng(59);
  NamedTensors p2{{"x", random_tensor({2, 2, 5, 5}, rng)},
                  {"k", random_tensor({3, 2, 3, 3}, rng)},
                  {"b", random_tensor({3}, rng)}};
  EXPECT_LE(grad_check(g2, y2, p2, 1e-5), 1e-4);
}

TEST(Primitives, MeanAndReshape) {
  Graph g;
  int x = g.input("x", {2, 3});
  int m = g.mean(x);
  int r = g.reshape(x, {3, 2});
  int s = g.sum(g.square(r));
  int y = g.add(m, s);
  NamedTensors point{{"x", Tensor({2, 3}, {1, 2, 3, 4, 5, 6})}};
  Workspace ws = forward(g, point);
  EXPECT_DOUBLE_EQ(ws.value(m)[0], 3.5);
  EXPECT_DOUBLE_EQ(ws.value(s)[0], 91.0);
  NamedTensors grads = backward(g, y, ws);
  EXPECT_DOUBLE_EQ(grads.at("x")[0], 1.0 / 6.0 + 2.0);
}

}  // namespace
