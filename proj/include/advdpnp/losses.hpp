// Loss components and their composition.
//
//   CE    : -log p_y with p from the prototype softmax head
//   DPP   : CE + (lambda_dpp / 2) * ||f - c_y||^2
//   DNP   : -(1/M) sum_j sum_i sqrt(|c_{j,i} - c^neg_{j,i}|), negatives are
//           the nearest rival prototypes, recomputed per batch
//   DFA   : KL(p(x) || p(x_adv))
//   total : lambda_dnp * DNP
//           + mean_i [DPP(x_i) + DPP(adv_i) + lambda_dfa * DFA_i] / 2
//
// The composite graph feeds the adversarial branch through a barrier copy of
// the prototypes, so prototype gradients come only from the clean branch
// (clean DPP, DNP, and the clean-side path of DFA).
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "advdpnp/graph.hpp"
#include "advdpnp/model.hpp"
#include "advdpnp/tensor.hpp"

namespace advdpnp {

struct LossWeights {
  double lambda_dpp = 0.1;
  double lambda_dnp = 0.1;
  double lambda_dfa = 2.0;
  double alpha = 40.0;
};

enum class TrainMode { kAdvDpnp, kAtBaseline, kTradesLike };

inline const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kAdvDpnp: return "adv-dpnp";
    case TrainMode::kAtBaseline: return "at-baseline";
    case TrainMode::kTradesLike: return "trades-like";
  }
  return "?";
}

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "adv-dpnp") return TrainMode::kAdvDpnp;
  if (s == "at-baseline") return TrainMode::kAtBaseline;
  if (s == "trades-like") return TrainMode::kTradesLike;
  throw ConfigError("unknown train mode '" + s + "'");
}

// trades-like degenerates to CE + DFA by zeroing the prototype terms.
inline LossWeights effective_weights(const LossWeights& w, TrainMode mode) {
  LossWeights e = w;
  if (mode == TrainMode::kTradesLike) {
    e.lambda_dpp = 0.0;
    e.lambda_dnp = 0.0;
  }
  return e;
}

struct CompositeOptions {
  TrainMode mode = TrainMode::kAdvDpnp;
  // Ablation/testing switches.
  bool mask_clean_dpp = false;          // drop the clean DPP term from the total
  bool full_dfa_to_prototypes = false;  // DFA's adversarial softmax bypasses the lock
  // The lock makes prototype gradients intentionally differ from the
  // d(total)/d(prototypes) of the forward map, so finite-difference checks
  // build the graph with lock_prototypes = false.
  bool lock_prototypes = true;
};

// Diagnostic decomposition of the composite loss. ce_* are batch means;
// pull_* carry their lambda_dpp/2 weight; dnp and dfa are raw values, so
//   total = lambda_dnp*dnp + [ce_clean+pull_clean+ce_adv+pull_adv+lambda_dfa*dfa]/2
// (at-baseline instead records total = ce_adv).
struct LossBreakdown {
  double ce_clean = 0.0;
  double ce_adv = 0.0;
  double pull_clean = 0.0;
  double pull_adv = 0.0;
  double dnp = 0.0;
  double dfa = 0.0;
  double total = 0.0;
};

// ---- scalar loss components ------------------------------------------------

inline double ce_loss(const Tensor& probs_row, int label) {
  if (label < 0 || label >= probs_row.numel()) {
    throw ConfigError("label " + std::to_string(label) + " out of range");
  }
  const double p = probs_row[label];
  if (p <= 0.0) {
    throw NumericError("cross-entropy: probability of true class is zero");
  }
  return -std::log(p);
}

inline double dpp_loss(const Tensor& features_row, int label,
                       const PrototypeBank& bank, double lambda_dpp) {
  Tensor f({1, static_cast<int>(features_row.numel())}, features_row.vec());
  Tensor probs = class_probabilities(f, bank);
  double ce = ce_loss(probs.row_copy(0), label);
  double sq = 0.0;
  const double* c = bank.prototypes.row(label);
  for (int i = 0; i < bank.dim(); ++i) {
    const double d = features_row[i] - c[i];
    sq += d * d;
  }
  return ce + 0.5 * lambda_dpp * sq;
}

// Nearest rival prototype per class (L2 distance, ties toward the smaller
// index).
inline std::vector<int> nearest_negatives(const PrototypeBank& bank) {
  const int classes = bank.classes();
  if (classes < 2) throw ConfigError("nearest_negatives needs at least 2 classes");
  std::vector<int> neg(static_cast<std::size_t>(classes));
  for (int j = 0; j < classes; ++j) {
    int best = -1;
    double best_sq = 0.0;
    for (int k = 0; k < classes; ++k) {
      if (k == j) continue;
      double sq = 0.0;
      for (int i = 0; i < bank.dim(); ++i) {
        const double d = bank.prototypes.at(k, i) - bank.prototypes.at(j, i);
        sq += d * d;
      }
      if (best < 0 || sq < best_sq) {
        best = k;
        best_sq = sq;
      }
    }
    neg[static_cast<std::size_t>(j)] = best;
  }
  return neg;
}

inline double dnp_loss(const PrototypeBank& bank) {
  const std::vector<int> neg = nearest_negatives(bank);
  double acc = 0.0;
  for (int j = 0; j < bank.classes(); ++j) {
    const double* cj = bank.prototypes.row(j);
    const double* cn = bank.prototypes.row(neg[static_cast<std::size_t>(j)]);
    for (int i = 0; i < bank.dim(); ++i) {
      acc += std::sqrt(std::abs(cj[i] - cn[i]) + kSqrtEps);
    }
  }
  return -acc / static_cast<double>(bank.classes());
}

// KL(p_clean || p_adv); rows must be stochastic with p_adv strictly positive.
inline double dfa_loss(const Tensor& p_clean, const Tensor& p_adv) {
  if (p_clean.numel() != p_adv.numel()) {
    throw ConfigError("distribution length mismatch in dfa_loss");
  }
  double kl = 0.0;
  for (std::int64_t j = 0; j < p_clean.numel(); ++j) {
    if (p_adv[j] <= 0.0) {
      throw NumericError("dfa_loss: zero entry in adversarial distribution");
    }
    if (p_clean[j] > 0.0) kl += p_clean[j] * std::log(p_clean[j] / p_adv[j]);
  }
  return kl;
}

// ---- composite graph -------------------------------------------------------

inline Tensor one_hot(const std::vector<int>& labels, int classes) {
  Tensor t({static_cast<int>(labels.size()), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= classes) {
      throw ConfigError("label " + std::to_string(y) + " out of range [0, " +
                        std::to_string(classes) + ")");
    }
    t.at(static_cast<int>(i), y) = 1.0;
  }
  return t;
}

struct CompositeGraph {
  Graph graph;
  int total = -1;
  int ce_clean = -1, ce_adv = -1, pull_clean = -1, pull_adv = -1;
  int dnp = -1, dfa = -1;
  int features_clean = -1, features_adv = -1;
  int probs_clean = -1, probs_adv = -1;
  std::vector<int> negatives;

  LossBreakdown breakdown(const Workspace& ws) const {
    LossBreakdown b;
    b.ce_clean = ws.value(ce_clean)[0];
    b.ce_adv = ws.value(ce_adv)[0];
    b.pull_clean = ws.value(pull_clean)[0];
    b.pull_adv = ws.value(pull_adv)[0];
    b.dnp = ws.value(dnp)[0];
    b.dfa = ws.value(dfa)[0];
    b.total = ws.value(total)[0];
    return b;
  }
};

// Inputs: "x_clean", "x_adv" (B, D), one input per extractor tensor, and
// "prototypes" (M, d). `negatives` is the DNP pairing frozen for this batch.
inline CompositeGraph build_composite(const ArchitectureConfig& arch,
                                      int classes,
                                      const std::vector<int>& labels,
                                      const LossWeights& weights,
                                      const CompositeOptions& opts,
                                      const std::vector<int>& negatives) {
  const LossWeights w = effective_weights(weights, opts.mode);
  const int batch = static_cast<int>(labels.size());
  const int input_dim = arch.input_numel();

  CompositeGraph cg;
  cg.negatives = negatives;
  Graph& g = cg.graph;

  const int x_clean = g.input("x_clean", {batch, input_dim});
  const int x_adv = g.input("x_adv", {batch, input_dim});
  const std::vector<int> params = extractor_param_nodes(g, arch, nullptr);
  const int protos = g.input(kPrototypesName, {classes, arch.feature_dim});

  cg.features_clean = apply_extractor(g, arch, x_clean, params);
  cg.features_adv = apply_extractor(g, arch, x_adv, params);

  // Locked prototype copy for the adversarial branch; at-baseline is plain
  // CE training on adversarial data, so its head stays unlocked.
  const bool locked = opts.lock_prototypes && opts.mode != TrainMode::kAtBaseline;
  const int protos_adv = locked ? g.barrier(protos) : protos;

  cg.probs_clean = build_head(g, cg.features_clean, protos, w.alpha);
  cg.probs_adv = build_head(g, cg.features_adv, protos_adv, w.alpha);

  const int onehot = g.constant(one_hot(labels, classes));
  const double inv_b = 1.0 / static_cast<double>(batch);

  auto mean_ce = [&](int probs) {
    return g.scale(g.sum(g.mul(onehot, g.log(probs))), -inv_b);
  };
  cg.ce_clean = mean_ce(cg.probs_clean);
  cg.ce_adv = mean_ce(cg.probs_adv);

  auto mean_pull = [&](int features, int proto_node) {
    const int selected = g.matmul(onehot, proto_node);
    return g.scale(g.sum(g.square(g.sub(features, selected))),
                   0.5 * w.lambda_dpp * inv_b);
  };
  cg.pull_clean = mean_pull(cg.features_clean, protos);
  cg.pull_adv = mean_pull(cg.features_adv, protos_adv);

  // DNP over the frozen pairing: diff = C - Sel * C.
  Tensor sel({classes, classes});
  for (int j = 0; j < classes; ++j)
    sel.at(j, negatives[static_cast<std::size_t>(j)]) = 1.0;
  const int neg_protos = g.matmul(g.constant(sel), protos);
  cg.dnp = g.scale(g.sum(g.sqrt_abs(g.sub(protos, neg_protos))),
                   -1.0 / static_cast<double>(classes));

  // DFA: KL(p_clean || p_adv), batch mean. With full_dfa_to_prototypes the
  // adversarial softmax is rebuilt against the unlocked prototypes.
  const int probs_adv_dfa =
      (opts.full_dfa_to_prototypes && locked)
          ? build_head(g, cg.features_adv, protos, w.alpha)
          : cg.probs_adv;
  cg.dfa = g.scale(
      g.sum(g.mul(cg.probs_clean,
                  g.sub(g.log(cg.probs_clean), g.log(probs_adv_dfa)))),
      inv_b);

  if (opts.mode == TrainMode::kAtBaseline) {
    cg.total = cg.ce_adv;
  } else {
    // Terms with a zero coefficient are omitted entirely, so their inputs
    // receive gradients that are exactly zero.
    std::vector<int> terms;
    if (!opts.mask_clean_dpp) {
      terms.push_back(g.scale(cg.ce_clean, 0.5));
      if (w.lambda_dpp != 0.0) terms.push_back(g.scale(cg.pull_clean, 0.5));
    }
    terms.push_back(g.scale(cg.ce_adv, 0.5));
    if (w.lambda_dpp != 0.0) terms.push_back(g.scale(cg.pull_adv, 0.5));
    if (w.lambda_dnp != 0.0) terms.push_back(g.scale(cg.dnp, w.lambda_dnp));
    if (w.lambda_dfa != 0.0) terms.push_back(g.scale(cg.dfa, 0.5 * w.lambda_dfa));
    int total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = g.add(total, terms[i]);
    cg.total = total;
  }
  g.mark_output("total", cg.total);
  return cg;
}

// Binds a composite graph against concrete batches and parameters.
inline NamedTensors composite_bindings(const ModelParams& params,
                                       const Tensor& x_clean,
                                       const Tensor& x_adv) {
  NamedTensors inputs;
  inputs.emplace("x_clean", x_clean);
  inputs.emplace("x_adv", x_adv);
  for (const auto& [name, tensor] : params.extractor) inputs.emplace(name, tensor);
  inputs.emplace(kPrototypesName, params.bank.prototypes);
  return inputs;
}

inline LossBreakdown composite_loss(const Tensor& x_clean, const Tensor& x_adv,
                                    const std::vector<int>& labels,
                                    const ModelParams& params,
                                    const LossWeights& weights,
                                    const CompositeOptions& opts = {}) {
  if (x_clean.shape() != x_adv.shape() ||
      x_clean.dim(0) != static_cast<int>(labels.size())) {
    throw ConfigError("clean/adversarial batches must align row-for-row");
  }
  CompositeGraph cg =
      build_composite(params.arch, params.bank.classes(), labels, weights, opts,
                      nearest_negatives(params.bank));
  Workspace ws = forward(cg.graph, composite_bindings(params, x_clean, x_adv));
  return cg.breakdown(ws);
}

}  // namespace advdpnp
