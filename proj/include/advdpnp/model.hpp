// Feature extractor f(x; theta) plus the unified prototype head: one vector
// per class that is simultaneously the classifier weight row and the class
// anchor in feature space. Class probabilities are a softmax over the scaled
// similarities c_j^T f / alpha.
#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "advdpnp/graph.hpp"
#include "advdpnp/rng.hpp"
#include "advdpnp/tensor.hpp"

namespace advdpnp {

struct ArchitectureConfig {
  std::string family = "mlp";   // "mlp" | "small-cnn"
  std::vector<int> input_shape; // {D} for mlp, {H,W} for small-cnn
  std::vector<int> hidden;      // layer widths (mlp) or channel counts (cnn)
  int feature_dim = 2;

  int input_numel() const {
    int n = 1;
    for (int e : input_shape) n *= e;
    return n;
  }
};

struct PrototypeBank {
  Tensor prototypes;  // (M, d)
  double radius = 40.0;

  int classes() const { return prototypes.dim(0); }
  int dim() const { return prototypes.dim(1); }
};

struct ModelParams {
  ArchitectureConfig arch;
  std::vector<std::pair<std::string, Tensor>> extractor;  // fixed order
  PrototypeBank bank;

  const Tensor& extractor_tensor(const std::string& name) const {
    for (const auto& [n, t] : extractor)
      if (n == name) return t;
    throw ConfigError("unknown extractor tensor '" + name + "'");
  }
  Tensor& extractor_tensor(const std::string& name) {
    for (auto& [n, t] : extractor)
      if (n == name) return t;
    throw ConfigError("unknown extractor tensor '" + name + "'");
  }
};

inline const std::string kPrototypesName = "prototypes";

namespace detail {

inline void validate_arch(const ArchitectureConfig& arch) {
  if (arch.family != "mlp" && arch.family != "small-cnn") {
    throw ConfigError("unknown extractor family '" + arch.family + "'");
  }
  if (arch.feature_dim < 2) {
    throw ConfigError("feature dimension must be >= 2, got " +
                      std::to_string(arch.feature_dim));
  }
  if (arch.family == "mlp" && arch.input_shape.size() != 1) {
    throw ConfigError("mlp extractor expects a flat input shape {D}");
  }
  if (arch.family == "small-cnn" && arch.input_shape.size() != 2) {
    throw ConfigError("small-cnn extractor expects an input shape {H,W}");
  }
}

// Extractor tensor names with shapes, in parameter order.
inline std::vector<std::pair<std::string, Shape>> extractor_layout(
    const ArchitectureConfig& arch) {
  validate_arch(arch);
  std::vector<std::pair<std::string, Shape>> layout;
  if (arch.family == "mlp") {
    int in = arch.input_shape[0];
    std::vector<int> widths = arch.hidden;
    widths.push_back(arch.feature_dim);
    for (std::size_t i = 0; i < widths.size(); ++i) {
      layout.emplace_back("w" + std::to_string(i), Shape{widths[i], in});
      layout.emplace_back("b" + std::to_string(i), Shape{widths[i]});
      in = widths[i];
    }
  } else {
    std::vector<int> channels = arch.hidden.empty() ? std::vector<int>{8, 16, 32}
                                                    : arch.hidden;
    int h = arch.input_shape[0], w = arch.input_shape[1], c = 1;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      layout.emplace_back("conv" + std::to_string(i) + "_k",
                          Shape{channels[i], c, 5, 5});
      layout.emplace_back("conv" + std::to_string(i) + "_b", Shape{channels[i]});
      h = (h + 2 * 2 - 5) / 2 + 1;  // 5x5 kernels, stride 2, pad 2
      w = (w + 2 * 2 - 5) / 2 + 1;
      if (h <= 0 || w <= 0) throw ConfigError("small-cnn input too small");
      c = channels[i];
    }
    layout.emplace_back("fc_w", Shape{arch.feature_dim, c * h * w});
    layout.emplace_back("fc_b", Shape{arch.feature_dim});
  }
  return layout;
}

}  // namespace detail

// Declares one graph node per extractor tensor, in layout order. With
// `values == nullptr` parameters become named graph inputs (trainable),
// otherwise they are baked in as constants.
inline std::vector<int> extractor_param_nodes(Graph& g,
                                              const ArchitectureConfig& arch,
                                              const ModelParams* values) {
  std::vector<int> ids;
  for (const auto& [name, shape] : detail::extractor_layout(arch)) {
    if (values) {
      ids.push_back(g.constant(values->extractor_tensor(name)));
    } else {
      ids.push_back(g.input(name, shape));
    }
  }
  return ids;
}

// Appends the extractor body from flat input node `x` (B, D), reusing the
// given parameter nodes, and returns the (B, feature_dim) feature node.
// Separate calls share parameters, which is how the clean and adversarial
// branches see one set of weights.
inline int apply_extractor(Graph& g, const ArchitectureConfig& arch, int x,
                           const std::vector<int>& params) {
  detail::validate_arch(arch);
  std::size_t next = 0;
  auto take = [&]() { return params[next++]; };

  int cur = x;
  if (arch.family == "mlp") {
    const std::size_t n_layers = params.size() / 2;
    for (std::size_t i = 0; i < n_layers; ++i) {
      int w = take();
      int b = take();
      cur = g.affine(cur, w, b);
      if (i + 1 < n_layers) cur = g.relu(cur);  // raw final activation
    }
  } else {
    const int batch = g.shape_of(x)[0];
    cur = g.reshape(cur, {batch, 1, arch.input_shape[0], arch.input_shape[1]});
    const std::size_t n_convs = (params.size() - 2) / 2;
    for (std::size_t i = 0; i < n_convs; ++i) {
      int k = take();
      int b = take();
      cur = g.relu(g.conv2d(cur, k, b, /*stride=*/2, /*pad=*/2));
    }
    const Shape& s = g.shape_of(cur);
    cur = g.reshape(cur, {batch, s[1] * s[2] * s[3]});
    int w = take();
    int b = take();
    cur = g.affine(cur, w, b);
  }
  return cur;
}

inline int build_extractor(Graph& g, const ArchitectureConfig& arch, int x,
                           const ModelParams* values) {
  return apply_extractor(g, arch, x, extractor_param_nodes(g, arch, values));
}

// Class-probability head on top of a feature node. `prototypes` is an (M, d)
// node; logits are c_j^T f / alpha.
inline int build_head(Graph& g, int features, int prototypes, double alpha) {
  int logits = g.scale(g.matmul(features, g.transpose(prototypes)), 1.0 / alpha);
  return g.softmax_logits(logits);
}

inline ModelParams init_model(const ArchitectureConfig& arch, int classes,
                              double alpha, std::uint64_t seed) {
  detail::validate_arch(arch);
  if (classes < 2) throw ConfigError("need at least 2 classes");
  if (!(alpha > 0.0)) throw ConfigError("prototype radius must be positive");

  Rng root(seed);
  Rng rng_w = root.derive("extractor");
  Rng rng_p = root.derive("prototypes");

  ModelParams params;
  params.arch = arch;
  for (const auto& [name, shape] : detail::extractor_layout(arch)) {
    Tensor t(shape);
    if (shape.size() == 1) {
      // biases start at zero
    } else {
      // scaled-uniform fan-in: U(-1/sqrt(fan_in), 1/sqrt(fan_in))
      std::int64_t fan_in = shape_numel(shape) / shape[0];
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = rng_w.uniform(-bound, bound);
    }
    params.extractor.emplace_back(name, std::move(t));
  }

  Tensor protos({classes, arch.feature_dim});
  for (int j = 0; j < classes; ++j) {
    double* row = protos.row(j);
    double norm = 0.0;
    do {
      for (int i = 0; i < arch.feature_dim; ++i) row[i] = rng_p.normal();
      norm = l2_norm(row, arch.feature_dim);
    } while (norm == 0.0);
    for (int i = 0; i < arch.feature_dim; ++i) row[i] *= alpha / norm;
  }
  params.bank = PrototypeBank{std::move(protos), alpha};
  return params;
}

inline Tensor extract_features(const ModelParams& params, const Tensor& batch) {
  if (batch.rank() != 2 || batch.dim(1) != params.arch.input_numel()) {
    throw ConfigError("batch shape " + shape_str(batch.shape()) +
                      " does not match extractor input of " +
                      std::to_string(params.arch.input_numel()));
  }
  Graph g;
  int x = g.input("x", batch.shape());
  int f = build_extractor(g, params.arch, x, &params);
  Workspace ws = forward(g, {{"x", batch}});
  return ws.value(f);
}

// Eq-style softmax over scaled prototype similarities, row-stochastic output.
inline Tensor class_probabilities(const Tensor& features,
                                  const PrototypeBank& bank) {
  if (!features.all_finite()) throw NumericError("non-finite features");
  if (features.rank() != 2 || features.dim(1) != bank.dim()) {
    throw ConfigError("feature dim " + shape_str(features.shape()) +
                      " does not match prototype dim " +
                      std::to_string(bank.dim()));
  }
  const int batch = features.dim(0);
  const int classes = bank.classes();
  Tensor probs({batch, classes});
  std::vector<double> logits(static_cast<std::size_t>(classes));
  for (int r = 0; r < batch; ++r) {
    const double* f = features.row(r);
    double m = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < classes; ++j) {
      logits[static_cast<std::size_t>(j)] =
          dot(bank.prototypes.row(j), f, bank.dim()) / bank.radius;
      m = std::max(m, logits[static_cast<std::size_t>(j)]);
    }
    double denom = 0.0;
    double* p = probs.row(r);
    for (int j = 0; j < classes; ++j) {
      p[j] = std::exp(logits[static_cast<std::size_t>(j)] - m);
      denom += p[j];
    }
    for (int j = 0; j < classes; ++j) p[j] /= denom;
  }
  return probs;
}

// Per-row argmax; ties break toward the smallest class index.
inline std::vector<int> predict(const Tensor& probs) {
  std::vector<int> labels(static_cast<std::size_t>(probs.dim(0)));
  for (int r = 0; r < probs.dim(0); ++r) {
    const double* p = probs.row(r);
    int arg = 0;
    for (int j = 1; j < probs.dim(1); ++j)
      if (p[j] > p[arg]) arg = j;
    labels[static_cast<std::size_t>(r)] = arg;
  }
  return labels;
}

inline PrototypeBank renormalize_prototypes(const PrototypeBank& bank) {
  PrototypeBank out = bank;
  for (int j = 0; j < bank.classes(); ++j) {
    double norm = l2_norm(bank.prototypes.row(j), bank.dim());
    if (norm == 0.0) {
      throw NumericError("prototype collapse: class " + std::to_string(j) +
                         " has zero norm");
    }
    double* row = out.prototypes.row(j);
    for (int i = 0; i < bank.dim(); ++i) row[i] = bank.radius * row[i] / norm;
  }
  return out;
}

}  // namespace advdpnp
