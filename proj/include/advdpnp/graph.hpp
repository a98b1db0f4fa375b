// Reverse-mode automatic differentiation on an explicit tape of primitive
// operations. Nodes are appended in topological order; forward evaluates the
// tape, backward walks it in reverse accumulating vector-Jacobian products.
//
// A node carrying the gradient-barrier flag passes its value through but
// never propagates adjoints to its parents. This is how the trainer locks
// prototypes on the adversarial branch: the locked copy feeds the forward
// pass while every gradient path through it is cut.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "advdpnp/tensor.hpp"

namespace advdpnp {

// Smoothing inside sqrt-abs: d/dv sqrt(|v|) diverges at 0, so the primitive
// computes sqrt(|v| + kSqrtEps) instead.
inline constexpr double kSqrtEps = 1e-12;

enum class Op {
  kInput,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatMul,
  kTranspose,
  kAffine,
  kConv2d,
  kReshape,
  kRelu,
  kExp,
  kLog,
  kSum,
  kMean,
  kSquare,
  kSqrtAbs,
  kMax,
  kSoftmaxLogits,
  kInner,
  kL2Norm,
  kBarrier,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kAffine: return "affine";
    case Op::kConv2d: return "conv2d";
    case Op::kReshape: return "reshape";
    case Op::kRelu: return "relu";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kSquare: return "square";
    case Op::kSqrtAbs: return "sqrt-abs";
    case Op::kMax: return "max";
    case Op::kSoftmaxLogits: return "softmax-logits";
    case Op::kInner: return "inner-product";
    case Op::kL2Norm: return "l2-norm";
    case Op::kBarrier: return "barrier";
  }
  return "?";
}

struct Node {
  Op op;
  std::vector<int> parents;
  Shape shape;
  bool barrier = false;
  double factor = 0.0;  // kScale
  Tensor payload;       // kConstant
  std::string name;     // kInput
  int stride = 1;       // kConv2d
  int pad = 0;          // kConv2d
};

using NamedTensors = std::map<std::string, Tensor>;

class Graph {
 public:
  int input(const std::string& name, Shape shape) {
    if (inputs_.count(name)) {
      throw ConfigError("graph input '" + name + "' declared twice");
    }
    Node n;
    n.op = Op::kInput;
    n.shape = std::move(shape);
    n.name = name;
    int id = push(std::move(n));
    inputs_.emplace(name, id);
    return id;
  }

  int constant(Tensor value) {
    Node n;
    n.op = Op::kConstant;
    n.shape = value.shape();
    n.payload = std::move(value);
    return push(std::move(n));
  }

  int add(int a, int b) { return elementwise(Op::kAdd, a, b); }
  int sub(int a, int b) { return elementwise(Op::kSub, a, b); }
  int mul(int a, int b) { return elementwise(Op::kMul, a, b); }

  int scale(int a, double factor) {
    Node n;
    n.op = Op::kScale;
    n.parents = {a};
    n.shape = shape_of(a);
    n.factor = factor;
    return push(std::move(n));
  }

  int matmul(int a, int b) {
    const Shape& sa = shape_of(a);
    const Shape& sb = shape_of(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
      fail_build(Op::kMatMul, "operands " + shape_str(sa) + " x " + shape_str(sb));
    }
    Node n;
    n.op = Op::kMatMul;
    n.parents = {a, b};
    n.shape = {sa[0], sb[1]};
    return push(std::move(n));
  }

  int transpose(int a) {
    const Shape& s = shape_of(a);
    if (s.size() != 2) fail_build(Op::kTranspose, "operand " + shape_str(s));
    Node n;
    n.op = Op::kTranspose;
    n.parents = {a};
    n.shape = {s[1], s[0]};
    return push(std::move(n));
  }

  // y = x * w^T + b with x:(B,I), w:(O,I), b:(O).
  int affine(int x, int w, int b) {
    const Shape& sx = shape_of(x);
    const Shape& sw = shape_of(w);
    const Shape& sb = shape_of(b);
    if (sx.size() != 2 || sw.size() != 2 || sb.size() != 1 ||
        sx[1] != sw[1] || sw[0] != sb[0]) {
      fail_build(Op::kAffine, "operands " + shape_str(sx) + ", " + shape_str(sw) +
                                  ", " + shape_str(sb));
    }
    Node n;
    n.op = Op::kAffine;
    n.parents = {x, w, b};
    n.shape = {sx[0], sw[0]};
    return push(std::move(n));
  }

  // x:(B,C,H,W), k:(OC,C,KH,KW), b:(OC) -> (B,OC,OH,OW).
  int conv2d(int x, int k, int b, int stride, int pad) {
    const Shape& sx = shape_of(x);
    const Shape& sk = shape_of(k);
    const Shape& sb = shape_of(b);
    if (sx.size() != 4 || sk.size() != 4 || sb.size() != 1 || sx[1] != sk[1] ||
        sb[0] != sk[0] || stride < 1 || pad < 0) {
      fail_build(Op::kConv2d, "operands " + shape_str(sx) + ", " + shape_str(sk));
    }
    int oh = (sx[2] + 2 * pad - sk[2]) / stride + 1;
    int ow = (sx[3] + 2 * pad - sk[3]) / stride + 1;
    if (oh <= 0 || ow <= 0) fail_build(Op::kConv2d, "empty output");
    Node n;
    n.op = Op::kConv2d;
    n.parents = {x, k, b};
    n.shape = {sx[0], sk[0], oh, ow};
    n.stride = stride;
    n.pad = pad;
    return push(std::move(n));
  }

  int reshape(int a, Shape shape) {
    if (shape_numel(shape) != shape_numel(shape_of(a))) {
      fail_build(Op::kReshape, shape_str(shape_of(a)) + " -> " + shape_str(shape));
    }
    Node n;
    n.op = Op::kReshape;
    n.parents = {a};
    n.shape = std::move(shape);
    return push(std::move(n));
  }

  int relu(int a) { return unary(Op::kRelu, a); }
  int exp(int a) { return unary(Op::kExp, a); }
  int log(int a) { return unary(Op::kLog, a); }
  int square(int a) { return unary(Op::kSquare, a); }
  int sqrt_abs(int a) { return unary(Op::kSqrtAbs, a); }

  int sum(int a) { return reduction(Op::kSum, a); }
  int mean(int a) { return reduction(Op::kMean, a); }
  int max(int a) { return reduction(Op::kMax, a); }
  int l2norm(int a) { return reduction(Op::kL2Norm, a); }

  // Row-stochastic softmax over the last axis of a (B,M) tensor; logits are
  // shifted by the row max before exponentiation.
  int softmax_logits(int a) {
    const Shape& s = shape_of(a);
    if (s.size() != 2) fail_build(Op::kSoftmaxLogits, "operand " + shape_str(s));
    Node n;
    n.op = Op::kSoftmaxLogits;
    n.parents = {a};
    n.shape = s;
    return push(std::move(n));
  }

  int inner(int a, int b) {
    if (shape_numel(shape_of(a)) != shape_numel(shape_of(b))) {
      fail_build(Op::kInner, shape_str(shape_of(a)) + " vs " + shape_str(shape_of(b)));
    }
    Node n;
    n.op = Op::kInner;
    n.parents = {a, b};
    n.shape = {};
    return push(std::move(n));
  }

  // Identity in the forward pass; no adjoint reaches its parents.
  int barrier(int a) {
    Node n;
    n.op = Op::kBarrier;
    n.parents = {a};
    n.shape = shape_of(a);
    n.barrier = true;
    return push(std::move(n));
  }

  void mark_output(const std::string& name, int id) {
    outputs_.emplace_back(name, id);
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }
  const Shape& shape_of(int id) const { return node(id).shape; }
  const std::map<std::string, int>& inputs() const { return inputs_; }
  const std::vector<std::pair<std::string, int>>& outputs() const { return outputs_; }

  std::string describe(int id) const {
    const Node& n = node(id);
    std::string s = "node #" + std::to_string(id) + " (" + op_name(n.op);
    if (!n.name.empty()) s += " '" + n.name + "'";
    s += ")";
    return s;
  }

 private:
  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int unary(Op op, int a) {
    Node n;
    n.op = op;
    n.parents = {a};
    n.shape = shape_of(a);
    return push(std::move(n));
  }

  int reduction(Op op, int a) {
    Node n;
    n.op = op;
    n.parents = {a};
    n.shape = {};
    return push(std::move(n));
  }

  int elementwise(Op op, int a, int b) {
    if (shape_of(a) != shape_of(b)) {
      fail_build(op, shape_str(shape_of(a)) + " vs " + shape_str(shape_of(b)));
    }
    Node n;
    n.op = op;
    n.parents = {a, b};
    n.shape = shape_of(a);
    return push(std::move(n));
  }

  [[noreturn]] void fail_build(Op op, const std::string& detail) {
    throw ConfigError(std::string("shape mismatch at node #") +
                      std::to_string(nodes_.size()) + " (" + op_name(op) +
                      "): " + detail);
  }

  std::vector<Node> nodes_;
  std::map<std::string, int> inputs_;
  std::vector<std::pair<std::string, int>> outputs_;
};

struct Workspace {
  std::vector<Tensor> values;
  const Tensor& value(int id) const { return values[static_cast<std::size_t>(id)]; }
};

namespace detail {

// C = A * B, all row-major, C preallocated and zeroed.
inline void matmul_acc(const double* a, const double* b, double* c, int m,
                       int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::int64_t>(i) * k;
    double* crow = c + static_cast<std::int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

inline Workspace forward(const Graph& g, const NamedTensors& inputs) {
  Workspace ws;
  ws.values.resize(static_cast<std::size_t>(g.size()));
  for (int id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    Tensor& out = ws.values[static_cast<std::size_t>(id)];
    auto parent = [&](int slot) -> const Tensor& {
      return ws.values[static_cast<std::size_t>(n.parents[static_cast<std::size_t>(slot)])];
    };
    switch (n.op) {
      case Op::kInput: {
        auto it = inputs.find(n.name);
        if (it == inputs.end()) {
          throw ConfigError("missing binding for graph input '" + n.name + "'");
        }
        if (it->second.shape() != n.shape) {
          throw ConfigError("binding for input '" + n.name + "' has shape " +
                            shape_str(it->second.shape()) + ", expected " +
                            shape_str(n.shape));
        }
        out = it->second;
        break;
      }
      case Op::kConstant:
        out = n.payload;
        break;
      case Op::kAdd: {
        out = parent(0);
        const Tensor& b = parent(1);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b[i];
        break;
      }
      case Op::kSub: {
        out = parent(0);
        const Tensor& b = parent(1);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
        break;
      }
      case Op::kMul: {
        out = parent(0);
        const Tensor& b = parent(1);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
        break;
      }
      case Op::kScale: {
        out = parent(0);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= n.factor;
        break;
      }
      case Op::kMatMul: {
        const Tensor& a = parent(0);
        const Tensor& b = parent(1);
        out = Tensor(n.shape);
        detail::matmul_acc(a.data(), b.data(), out.data(), a.dim(0), a.dim(1),
                           b.dim(1));
        break;
      }
      case Op::kTranspose: {
        const Tensor& a = parent(0);
        out = Tensor(n.shape);
        for (int r = 0; r < a.dim(0); ++r)
          for (int c = 0; c < a.dim(1); ++c) out.at(c, r) = a.at(r, c);
        break;
      }
      case Op::kAffine: {
        const Tensor& x = parent(0);
        const Tensor& w = parent(1);
        const Tensor& b = parent(2);
        const int batch = x.dim(0), in = x.dim(1), outdim = w.dim(0);
        out = Tensor(n.shape);
        for (int r = 0; r < batch; ++r) {
          const double* xr = x.data() + static_cast<std::int64_t>(r) * in;
          double* yr = out.data() + static_cast<std::int64_t>(r) * outdim;
          for (int o = 0; o < outdim; ++o) {
            yr[o] = b[o] + dot(xr, w.data() + static_cast<std::int64_t>(o) * in, in);
          }
        }
        break;
      }
      case Op::kConv2d: {
        const Tensor& x = parent(0);
        const Tensor& k = parent(1);
        const Tensor& b = parent(2);
        out = Tensor(n.shape);
        const int batch = x.dim(0), ic = x.dim(1), h = x.dim(2), w = x.dim(3);
        const int oc = k.dim(0), kh = k.dim(2), kw = k.dim(3);
        const int oh = n.shape[2], ow = n.shape[3];
        for (int bi = 0; bi < batch; ++bi)
          for (int o = 0; o < oc; ++o)
            for (int oy = 0; oy < oh; ++oy)
              for (int ox = 0; ox < ow; ++ox) {
                double acc = b[o];
                const int y0 = oy * n.stride - n.pad;
                const int x0 = ox * n.stride - n.pad;
                for (int c = 0; c < ic; ++c)
                  for (int ky = 0; ky < kh; ++ky) {
                    const int iy = y0 + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                      const int ix = x0 + kx;
                      if (ix < 0 || ix >= w) continue;
                      acc += x[((static_cast<std::int64_t>(bi) * ic + c) * h + iy) * w + ix] *
                             k[((static_cast<std::int64_t>(o) * ic + c) * kh + ky) * kw + kx];
                    }
                  }
                out[((static_cast<std::int64_t>(bi) * oc + o) * oh + oy) * ow + ox] = acc;
              }
        break;
      }
      case Op::kReshape:
        out = Tensor(n.shape, parent(0).vec());
        break;
      case Op::kRelu: {
        out = parent(0);
        for (std::int64_t i = 0; i < out.numel(); ++i)
          if (out[i] < 0.0) out[i] = 0.0;
        break;
      }
      case Op::kExp: {
        out = parent(0);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
        break;
      }
      case Op::kLog: {
        out = parent(0);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
        break;
      }
      case Op::kSum: {
        const Tensor& a = parent(0);
        double s = 0.0;
        for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i];
        out = Tensor::scalar(s);
        break;
      }
      case Op::kMean: {
        const Tensor& a = parent(0);
        double s = 0.0;
        for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i];
        out = Tensor::scalar(s / static_cast<double>(a.numel()));
        break;
      }
      case Op::kSquare: {
        out = parent(0);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
        break;
      }
      case Op::kSqrtAbs: {
        out = parent(0);
        for (std::int64_t i = 0; i < out.numel(); ++i)
          out[i] = std::sqrt(std::abs(out[i]) + kSqrtEps);
        break;
      }
      case Op::kMax: {
        const Tensor& a = parent(0);
        double m = a[0];
        for (std::int64_t i = 1; i < a.numel(); ++i) m = std::max(m, a[i]);
        out = Tensor::scalar(m);
        break;
      }
      case Op::kSoftmaxLogits: {
        const Tensor& a = parent(0);
        out = Tensor(n.shape);
        const int rows = a.dim(0), cols = a.dim(1);
        for (int r = 0; r < rows; ++r) {
          const double* zr = a.data() + static_cast<std::int64_t>(r) * cols;
          double* pr = out.data() + static_cast<std::int64_t>(r) * cols;
          double m = zr[0];
          for (int c = 1; c < cols; ++c) m = std::max(m, zr[c]);
          double denom = 0.0;
          for (int c = 0; c < cols; ++c) {
            pr[c] = std::exp(zr[c] - m);
            denom += pr[c];
          }
          for (int c = 0; c < cols; ++c) pr[c] /= denom;
        }
        break;
      }
      case Op::kInner: {
        const Tensor& a = parent(0);
        const Tensor& b = parent(1);
        out = Tensor::scalar(dot(a.data(), b.data(), a.numel()));
        break;
      }
      case Op::kL2Norm:
        out = Tensor::scalar(l2_norm(parent(0)));
        break;
      case Op::kBarrier:
        out = parent(0);
        break;
    }
    if (!out.all_finite()) {
      throw NumericError("non-finite value at " + g.describe(id));
    }
  }
  return ws;
}

inline NamedTensors outputs(const Graph& g, const Workspace& ws) {
  NamedTensors named;
  for (const auto& [name, id] : g.outputs()) named.emplace(name, ws.value(id));
  return named;
}

// Adjoints of every named input with respect to a scalar output node.
// Inputs reachable only through barrier nodes receive exactly zero.
inline NamedTensors backward(const Graph& g, int output, const Workspace& ws) {
  if (shape_numel(g.shape_of(output)) != 1) {
    throw ConfigError("backward requires a scalar output, got shape " +
                      shape_str(g.shape_of(output)) + " at " + g.describe(output));
  }
  std::vector<Tensor> adj(static_cast<std::size_t>(g.size()));
  std::vector<bool> live(static_cast<std::size_t>(g.size()), false);
  auto touch = [&](int id) -> Tensor& {
    if (!live[static_cast<std::size_t>(id)]) {
      adj[static_cast<std::size_t>(id)] = Tensor(g.shape_of(id));
      live[static_cast<std::size_t>(id)] = true;
    }
    return adj[static_cast<std::size_t>(id)];
  };
  touch(output)[0] = 1.0;

  for (int id = output; id >= 0; --id) {
    const Node& n = g.node(id);
    if (!live[static_cast<std::size_t>(id)] || n.barrier || n.parents.empty())
      continue;
    const Tensor& gout = adj[static_cast<std::size_t>(id)];
    auto val = [&](int slot) -> const Tensor& {
      return ws.value(n.parents[static_cast<std::size_t>(slot)]);
    };
    auto gin = [&](int slot) -> Tensor& {
      return touch(n.parents[static_cast<std::size_t>(slot)]);
    };
    switch (n.op) {
      case Op::kAdd: {
        Tensor& ga = gin(0);
        Tensor& gb = gin(1);
        for (std::int64_t i = 0; i < gout.numel(); ++i) {
          ga[i] += gout[i];
          gb[i] += gout[i];
        }
        break;
      }
      case Op::kSub: {
        Tensor& ga = gin(0);
        Tensor& gb = gin(1);
        for (std::int64_t i = 0; i < gout.numel(); ++i) {
          ga[i] += gout[i];
          gb[i] -= gout[i];
        }
        break;
      }
      case Op::kMul: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        Tensor& ga = gin(0);
        Tensor& gb = gin(1);
        for (std::int64_t i = 0; i < gout.numel(); ++i) {
          ga[i] += gout[i] * b[i];
          gb[i] += gout[i] * a[i];
        }
        break;
      }
      case Op::kScale: {
        Tensor& ga = gin(0);
        for (std::int64_t i = 0; i < gout.numel(); ++i) ga[i] += gout[i] * n.factor;
        break;
      }
      case Op::kMatMul: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        const int m = a.dim(0), k = a.dim(1), c = b.dim(1);
        // dA += G * B^T
        Tensor& ga = gin(0);
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double s = 0.0;
            const double* grow = gout.data() + static_cast<std::int64_t>(i) * c;
            const double* brow = b.data() + static_cast<std::int64_t>(p) * c;
            for (int j = 0; j < c; ++j) s += grow[j] * brow[j];
            ga[static_cast<std::int64_t>(i) * k + p] += s;
          }
        // dB += A^T * G
        Tensor& gb = gin(1);
        for (int i = 0; i < m; ++i) {
          const double* arow = a.data() + static_cast<std::int64_t>(i) * k;
          const double* grow = gout.data() + static_cast<std::int64_t>(i) * c;
          for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* gbrow = gb.data() + static_cast<std::int64_t>(p) * c;
            for (int j = 0; j < c; ++j) gbrow[j] += av * grow[j];
          }
        }
        break;
      }
      case Op::kTranspose: {
        Tensor& ga = gin(0);
        const Shape& s = g.shape_of(n.parents[0]);
        for (int r = 0; r < s[0]; ++r)
          for (int c = 0; c < s[1]; ++c)
            ga[static_cast<std::int64_t>(r) * s[1] + c] += gout.at(c, r);
        break;
      }
      case Op::kAffine: {
        const Tensor& x = val(0);
        const Tensor& w = val(1);
        const int batch = x.dim(0), in = x.dim(1), outdim = w.dim(0);
        Tensor& gx = gin(0);
        Tensor& gw = gin(1);
        Tensor& gb = gin(2);
        for (int r = 0; r < batch; ++r) {
          const double* grow = gout.data() + static_cast<std::int64_t>(r) * outdim;
          const double* xrow = x.data() + static_cast<std::int64_t>(r) * in;
          double* gxrow = gx.data() + static_cast<std::int64_t>(r) * in;
          for (int o = 0; o < outdim; ++o) {
            const double gv = grow[o];
            if (gv == 0.0) continue;
            gb[o] += gv;
            const double* wrow = w.data() + static_cast<std::int64_t>(o) * in;
            double* gwrow = gw.data() + static_cast<std::int64_t>(o) * in;
            for (int i = 0; i < in; ++i) {
              gxrow[i] += gv * wrow[i];
              gwrow[i] += gv * xrow[i];
            }
          }
        }
        break;
      }
      case Op::kConv2d: {
        const Tensor& x = val(0);
        const Tensor& k = val(1);
        Tensor& gx = gin(0);
        Tensor& gk = gin(1);
        Tensor& gb = gin(2);
        const int batch = x.dim(0), ic = x.dim(1), h = x.dim(2), w = x.dim(3);
        const int oc = k.dim(0), kh = k.dim(2), kw = k.dim(3);
        const int oh = n.shape[2], ow = n.shape[3];
        for (int bi = 0; bi < batch; ++bi)
          for (int o = 0; o < oc; ++o)
            for (int oy = 0; oy < oh; ++oy)
              for (int ox = 0; ox < ow; ++ox) {
                const double gv =
                    gout[((static_cast<std::int64_t>(bi) * oc + o) * oh + oy) * ow + ox];
                if (gv == 0.0) continue;
                gb[o] += gv;
                const int y0 = oy * n.stride - n.pad;
                const int x0 = ox * n.stride - n.pad;
                for (int c = 0; c < ic; ++c)
                  for (int ky = 0; ky < kh; ++ky) {
                    const int iy = y0 + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                      const int ix = x0 + kx;
                      if (ix < 0 || ix >= w) continue;
                      const std::int64_t xi =
                          ((static_cast<std::int64_t>(bi) * ic + c) * h + iy) * w + ix;
                      const std::int64_t ki =
                          ((static_cast<std::int64_t>(o) * ic + c) * kh + ky) * kw + kx;
                      gx[xi] += gv * k[ki];
                      gk[ki] += gv * x[xi];
                    }
                  }
              }
        break;
      }
      case Op::kReshape: {
        Tensor& ga = gin(0);
        for (std::int64_t i = 0; i < gout.numel(); ++i) ga[i] += gout[i];
        break;
      }
      case Op::kRelu: {
        const Tensor& a = val(0);
        Tensor& ga = gin(0);
        // Subgradient at the kink is 0.
        for (std::int64_t i = 0; i < gout.numel(); ++i)
          if (a[i] > 0.0) ga[i] += gout[i];
        break;
      }
      case Op::kExp: {
        const Tensor& y = ws.value(id);
        Tensor& ga = gin(0);
        for (std::int64_t i = 0; i < gout.numel(); ++i) ga[i] += gout[i] * y[i];
        break;
      }
      case Op::kLog: {
        const Tensor& a = val(0);
        Tensor& ga = gin(0);
        for (std::int64_t i = 0; i < gout.numel(); ++i) ga[i] += gout[i] / a[i];
        break;
      }
      case Op::kSum: {
        Tensor& ga = gin(0);
        const double gv = gout[0];
        for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += gv;
        break;
      }
      case Op::kMean: {
        Tensor& ga = gin(0);
        const double gv = gout[0] / static_cast<double>(ga.numel());
        for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += gv;
        break;
      }
      case Op::kSquare: {
        const Tensor& a = val(0);
        Tensor& ga = gin(0);
        for (std::int64_t i = 0; i < gout.numel(); ++i)
          ga[i] += 2.0 * a[i] * gout[i];
        break;
      }
      case Op::kSqrtAbs: {
        const Tensor& a = val(0);
        const Tensor& y = ws.value(id);
        Tensor& ga = gin(0);
        for (std::int64_t i = 0; i < gout.numel(); ++i) {
          const double sign = a[i] > 0.0 ? 1.0 : (a[i] < 0.0 ? -1.0 : 0.0);
          ga[i] += gout[i] * sign / (2.0 * y[i]);
        }
        break;
      }
      case Op::kMax: {
        const Tensor& a = val(0);
        Tensor& ga = gin(0);
        std::int64_t arg = 0;
        for (std::int64_t i = 1; i < a.numel(); ++i)
          if (a[i] > a[arg]) arg = i;
        ga[arg] += gout[0];
        break;
      }
      case Op::kSoftmaxLogits: {
        const Tensor& p = ws.value(id);
        Tensor& ga = gin(0);
        const int rows = p.dim(0), cols = p.dim(1);
        for (int r = 0; r < rows; ++r) {
          const double* pr = p.data() + static_cast<std::int64_t>(r) * cols;
          const double* gr = gout.data() + static_cast<std::int64_t>(r) * cols;
          double gp = 0.0;
          for (int c = 0; c < cols; ++c) gp += gr[c] * pr[c];
          double* gar = ga.data() + static_cast<std::int64_t>(r) * cols;
          for (int c = 0; c < cols; ++c) gar[c] += pr[c] * (gr[c] - gp);
        }
        break;
      }
      case Op::kInner: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        Tensor& ga = gin(0);
        Tensor& gb = gin(1);
        const double gv = gout[0];
        for (std::int64_t i = 0; i < a.numel(); ++i) {
          ga[i] += gv * b[i];
          gb[i] += gv * a[i];
        }
        break;
      }
      case Op::kL2Norm: {
        const Tensor& a = val(0);
        const double norm = ws.value(id)[0];
        Tensor& ga = gin(0);
        if (norm > 0.0) {
          const double gv = gout[0] / norm;
          for (std::int64_t i = 0; i < a.numel(); ++i) ga[i] += gv * a[i];
        }
        break;
      }
      case Op::kInput:
      case Op::kConstant:
      case Op::kBarrier:
        break;
    }
  }

  NamedTensors grads;
  for (const auto& [name, id] : g.inputs()) {
    if (live[static_cast<std::size_t>(id)]) {
      grads.emplace(name, std::move(adj[static_cast<std::size_t>(id)]));
    } else {
      grads.emplace(name, Tensor(g.shape_of(id)));
    }
  }
  for (const auto& [name, grad] : grads) {
    if (!grad.all_finite()) {
      throw NumericError("non-finite gradient for input '" + name + "'");
    }
  }
  return grads;
}

inline NamedTensors backward(const Graph& g, int output, const NamedTensors& inputs) {
  Workspace ws = forward(g, inputs);
  return backward(g, output, ws);
}

// Max over all input coordinates of |analytic - central difference| /
// max(1, |analytic|). `output` must be scalar; `step` in (0, 1e-2].
inline double grad_check(const Graph& g, int output, const NamedTensors& point,
                         double step) {
  if (!(step > 0.0 && step <= 1e-2)) {
    throw ConfigError("grad_check step must be in (0, 1e-2]");
  }
  NamedTensors analytic = backward(g, output, point);
  double worst = 0.0;
  NamedTensors probe = point;
  for (auto& [name, tensor] : probe) {
    const Tensor& grad = analytic.at(name);
    for (std::int64_t i = 0; i < tensor.numel(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + step;
      const double hi = forward(g, probe).value(output)[0];
      tensor[i] = saved - step;
      const double lo = forward(g, probe).value(output)[0];
      tensor[i] = saved;
      const double numeric = (hi - lo) / (2.0 * step);
      if (!std::isfinite(numeric)) {
        throw NumericError("non-finite numeric gradient for input '" + name + "'");
      }
      const double err =
          std::abs(grad[i] - numeric) / std::max(1.0, std::abs(grad[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace advdpnp
