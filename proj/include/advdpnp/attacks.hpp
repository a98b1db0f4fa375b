// Adversarial example generation: FGSM and projected gradient ascent under
// l1/l2/linf budgets with random restarts. Objectives are per-sample, so a
// batch attack is just independent per-row ascent sharing forward passes.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "advdpnp/losses.hpp"
#include "advdpnp/model.hpp"
#include "advdpnp/rng.hpp"
#include "advdpnp/tensor.hpp"

namespace advdpnp {

enum class Norm { kL1, kL2, kLinf };

inline const char* norm_name(Norm n) {
  switch (n) {
    case Norm::kL1: return "l1";
    case Norm::kL2: return "l2";
    case Norm::kLinf: return "linf";
  }
  return "?";
}

inline Norm parse_norm(const std::string& s) {
  if (s == "l1") return Norm::kL1;
  if (s == "l2") return Norm::kL2;
  if (s == "linf") return Norm::kLinf;
  throw ConfigError("unknown norm '" + s + "'");
}

enum class AttackObjective { kCrossEntropy, kComposite };

inline AttackObjective parse_objective(const std::string& s) {
  if (s == "cross-entropy") return AttackObjective::kCrossEntropy;
  if (s == "composite") return AttackObjective::kComposite;
  throw ConfigError("unknown attack objective '" + s + "'");
}

struct AttackConfig {
  Norm norm = Norm::kLinf;
  double epsilon = 8.0 / 255.0;
  double step = 2.0 / 255.0;
  int iterations = 10;
  int restarts = 1;
  AttackObjective objective = AttackObjective::kCrossEntropy;
  double box_low = 0.0;
  double box_high = 1.0;
  bool random_init = true;

  void validate() const {
    if (epsilon < 0.0) throw ConfigError("attack epsilon must be >= 0");
    if (iterations < 0) throw ConfigError("attack iterations must be >= 0");
    if (iterations > 0 && !(step > 0.0)) {
      throw ConfigError("attack step must be positive when iterations > 0");
    }
    if (restarts < 1) throw ConfigError("attack restarts must be >= 1");
    if (!(box_low <= box_high)) throw ConfigError("attack box is empty");
  }
};

namespace detail {

inline double norm_of(const double* v, std::int64_t n, Norm norm) {
  switch (norm) {
    case Norm::kL1: {
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i) s += std::abs(v[i]);
      return s;
    }
    case Norm::kL2:
      return l2_norm(v, n);
    case Norm::kLinf: {
      double m = 0.0;
      for (std::int64_t i = 0; i < n; ++i) m = std::max(m, std::abs(v[i]));
      return m;
    }
  }
  return 0.0;
}

// Euclidean projection onto the l1 ball via sort-based soft thresholding.
inline void project_l1(double* v, std::int64_t n, double eps) {
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) total += std::abs(v[i]);
  if (total <= eps) return;
  if (eps == 0.0) {
    std::fill(v, v + n, 0.0);
    return;
  }
  std::vector<double> mag(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) mag[static_cast<std::size_t>(i)] = std::abs(v[i]);
  std::sort(mag.begin(), mag.end(), std::greater<double>());
  double cumsum = 0.0;
  double theta = 0.0;
  for (std::int64_t j = 0; j < n; ++j) {
    cumsum += mag[static_cast<std::size_t>(j)];
    const double candidate = (cumsum - eps) / static_cast<double>(j + 1);
    if (mag[static_cast<std::size_t>(j)] - candidate > 0.0) {
      theta = candidate;
    } else {
      break;
    }
  }
  for (std::int64_t i = 0; i < n; ++i) {
    const double shrunk = std::max(std::abs(v[i]) - theta, 0.0);
    v[i] = v[i] < 0.0 ? -shrunk : shrunk;
  }
}

inline void project_row(double* v, std::int64_t n, Norm norm, double eps) {
  switch (norm) {
    case Norm::kLinf:
      for (std::int64_t i = 0; i < n; ++i) v[i] = std::clamp(v[i], -eps, eps);
      break;
    case Norm::kL2: {
      const double norm2 = l2_norm(v, n);
      if (norm2 > eps) {
        const double f = eps / norm2;
        for (std::int64_t i = 0; i < n; ++i) v[i] *= f;
      }
      break;
    }
    case Norm::kL1:
      project_l1(v, n, eps);
      break;
  }
}

// Steepest-ascent direction of `step` length under the given geometry.
inline void ascent_row(const double* grad, double* dir, std::int64_t n,
                       Norm norm, double step) {
  switch (norm) {
    case Norm::kLinf:
      for (std::int64_t i = 0; i < n; ++i) {
        dir[i] = grad[i] > 0.0 ? step : (grad[i] < 0.0 ? -step : 0.0);
      }
      break;
    case Norm::kL2: {
      const double norm2 = l2_norm(grad, n);
      if (norm2 == 0.0) {
        std::fill(dir, dir + n, 0.0);
      } else {
        for (std::int64_t i = 0; i < n; ++i) dir[i] = step * grad[i] / norm2;
      }
      break;
    }
    case Norm::kL1: {
      // Single largest-|grad| coordinate, sign-directed; ties -> smallest index.
      std::fill(dir, dir + n, 0.0);
      std::int64_t arg = 0;
      for (std::int64_t i = 1; i < n; ++i)
        if (std::abs(grad[i]) > std::abs(grad[arg])) arg = i;
      if (grad[arg] != 0.0) dir[arg] = grad[arg] > 0.0 ? step : -step;
      break;
    }
  }
}

inline void random_init_row(double* delta, std::int64_t n, Norm norm,
                            double eps, Rng& rng) {
  if (eps == 0.0) {
    std::fill(delta, delta + n, 0.0);
    return;
  }
  switch (norm) {
    case Norm::kLinf:
      for (std::int64_t i = 0; i < n; ++i) delta[i] = rng.uniform(-eps, eps);
      break;
    case Norm::kL2:
    case Norm::kL1: {
      double norm_p = 0.0;
      do {
        for (std::int64_t i = 0; i < n; ++i) delta[i] = rng.normal();
        norm_p = norm_of(delta, n, norm);
      } while (norm_p == 0.0);
      const double radius =
          eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(n));
      for (std::int64_t i = 0; i < n; ++i) delta[i] *= radius / norm_p;
      break;
    }
  }
}

}  // namespace detail

// Projection of a perturbation onto the eps-ball of the given norm.
inline Tensor project(const Tensor& delta, Norm norm, double eps) {
  if (eps < 0.0) throw ConfigError("projection radius must be >= 0");
  Tensor out = delta;
  detail::project_row(out.data(), out.numel(), norm, eps);
  return out;
}

inline Tensor ascent_step(const Tensor& grad, Norm norm, double step) {
  if (!(step > 0.0)) throw ConfigError("ascent step must be positive");
  Tensor out(grad.shape());
  detail::ascent_row(grad.data(), out.data(), grad.numel(), norm, step);
  return out;
}

// Per-sample objective: values per row plus the gradient w.r.t. the batch.
struct ObjectiveEval {
  std::vector<double> values;
  Tensor grad;
};
using ObjectiveFn = std::function<ObjectiveEval(const Tensor& x)>;

// Sum of per-sample CE through the frozen model; gradients w.r.t. inputs only.
inline ObjectiveFn make_ce_objective(const ModelParams& params,
                                     const std::vector<int>& labels,
                                     const Shape& batch_shape) {
  auto g = std::make_shared<Graph>();
  const int x = g->input("x", batch_shape);
  const int f = build_extractor(*g, params.arch, x, &params);
  const int probs = build_head(*g, f, g->constant(params.bank.prototypes),
                               params.bank.radius);
  const int onehot = g->constant(one_hot(labels, params.bank.classes()));
  const int loss = g->scale(g->sum(g->mul(onehot, g->log(probs))), -1.0);
  auto labels_copy = labels;
  return [g, x, probs, loss, labels_copy](const Tensor& batch) {
    Workspace ws = forward(*g, {{"x", batch}});
    NamedTensors grads = backward(*g, loss, ws);
    ObjectiveEval ev;
    ev.grad = std::move(grads.at("x"));
    const Tensor& p = ws.value(probs);
    ev.values.resize(labels_copy.size());
    for (std::size_t i = 0; i < labels_copy.size(); ++i) {
      ev.values[i] = -std::log(p.at(static_cast<int>(i), labels_copy[i]));
    }
    (void)x;
    return ev;
  };
}

// Adaptive objective: the x_adv-dependent part of the composite loss,
// [CE(x_adv) + pull(x_adv) + lambda_dfa * KL(p_clean || p_adv)] / 2 per
// sample. The clean branch is a constant of the attack.
inline ObjectiveFn make_composite_objective(const ModelParams& params,
                                            const Tensor& x_clean,
                                            const std::vector<int>& labels,
                                            const LossWeights& weights) {
  const int batch = x_clean.dim(0);
  const int classes = params.bank.classes();
  Tensor p_clean =
      class_probabilities(extract_features(params, x_clean), params.bank);

  auto g = std::make_shared<Graph>();
  const int x = g->input("x", x_clean.shape());
  const int f = build_extractor(*g, params.arch, x, &params);
  const int protos = g->constant(params.bank.prototypes);
  const int probs = g->softmax_logits(
      g->scale(g->matmul(f, g->transpose(protos)), 1.0 / weights.alpha));
  const int onehot = g->constant(one_hot(labels, classes));
  const int p_clean_node = g->constant(p_clean);

  const int ce_sum = g->scale(g->sum(g->mul(onehot, g->log(probs))), -1.0);
  const int pull_sum =
      g->scale(g->sum(g->square(g->sub(f, g->matmul(onehot, protos)))),
               0.5 * weights.lambda_dpp);
  const int kl_sum = g->sum(
      g->mul(p_clean_node, g->sub(g->log(p_clean_node), g->log(probs))));
  const int loss = g->scale(
      g->add(g->add(ce_sum, pull_sum), g->scale(kl_sum, weights.lambda_dfa)),
      0.5);

  auto labels_copy = labels;
  const double lambda_dpp = weights.lambda_dpp;
  const double lambda_dfa = weights.lambda_dfa;
  Tensor protos_copy = params.bank.prototypes;
  return [g, x, f, probs, loss, labels_copy, p_clean, protos_copy, lambda_dpp,
          lambda_dfa, batch, classes](const Tensor& xb) {
    Workspace ws = forward(*g, {{"x", xb}});
    NamedTensors grads = backward(*g, loss, ws);
    ObjectiveEval ev;
    ev.grad = std::move(grads.at("x"));
    const Tensor& p = ws.value(probs);
    const Tensor& feat = ws.value(f);
    ev.values.resize(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i) {
      const int y = labels_copy[static_cast<std::size_t>(i)];
      double ce = -std::log(p.at(i, y));
      double sq = 0.0;
      for (int d = 0; d < feat.dim(1); ++d) {
        const double diff = feat.at(i, d) - protos_copy.at(y, d);
        sq += diff * diff;
      }
      double kl = 0.0;
      for (int j = 0; j < classes; ++j) {
        if (p_clean.at(i, j) > 0.0) {
          kl += p_clean.at(i, j) * std::log(p_clean.at(i, j) / p.at(i, j));
        }
      }
      ev.values[static_cast<std::size_t>(i)] =
          0.5 * (ce + 0.5 * lambda_dpp * sq + lambda_dfa * kl);
    }
    (void)x;
    return ev;
  };
}

// Core PGD loop. Restart r draws from rng.derive(r); restart 0 starts at
// delta = 0 unless cfg.random_init. Returns, per sample, the restart whose
// final point has the highest objective value.
inline Tensor pgd_attack(const ObjectiveFn& objective, const Tensor& x,
                         const AttackConfig& cfg, const Rng& rng) {
  cfg.validate();
  const int batch = x.dim(0);
  const std::int64_t dim = x.row_size();

  Tensor best_x = x;
  std::vector<double> best_val(static_cast<std::size_t>(batch),
                               -std::numeric_limits<double>::infinity());

  auto clamp_box = [&](const Tensor& delta) {
    Tensor adv = x;
    for (std::int64_t i = 0; i < adv.numel(); ++i) {
      adv[i] = std::clamp(adv[i] + delta[i], cfg.box_low, cfg.box_high);
    }
    return adv;
  };
  // Fold the box back into the perturbation so the ball projection sees the
  // effective delta.
  auto refold = [&](Tensor& delta, const Tensor& adv) {
    for (std::int64_t i = 0; i < delta.numel(); ++i) delta[i] = adv[i] - x[i];
  };

  for (int r = 0; r < cfg.restarts; ++r) {
    Rng rr = rng.derive(static_cast<std::uint64_t>(r));
    Tensor delta(x.shape());
    if (r > 0 || cfg.random_init) {
      for (int b = 0; b < batch; ++b) {
        detail::random_init_row(delta.row(b), dim, cfg.norm, cfg.epsilon, rr);
      }
    }
    for (int b = 0; b < batch; ++b) {
      detail::project_row(delta.row(b), dim, cfg.norm, cfg.epsilon);
    }
    Tensor adv = clamp_box(delta);
    refold(delta, adv);

    std::vector<double> dir(static_cast<std::size_t>(dim));
    for (int it = 0; it < cfg.iterations; ++it) {
      ObjectiveEval ev;
      try {
        ev = objective(adv);
        for (double v : ev.values) {
          if (!std::isfinite(v)) throw NumericError("non-finite objective value");
        }
        if (!ev.grad.all_finite()) {
          throw NumericError("non-finite objective gradient");
        }
      } catch (const NumericError& e) {
        throw NumericError("pgd iteration " + std::to_string(it) + ": " +
                           e.what());
      }
      for (int b = 0; b < batch; ++b) {
        double* drow = delta.row(b);
        detail::ascent_row(ev.grad.row(b), dir.data(), dim, cfg.norm, cfg.step);
        for (std::int64_t i = 0; i < dim; ++i) drow[i] += dir[static_cast<std::size_t>(i)];
        detail::project_row(drow, dim, cfg.norm, cfg.epsilon);
      }
      adv = clamp_box(delta);
      refold(delta, adv);
    }

    const ObjectiveEval final_ev = objective(adv);
    for (int b = 0; b < batch; ++b) {
      if (final_ev.values[static_cast<std::size_t>(b)] >
          best_val[static_cast<std::size_t>(b)]) {
        best_val[static_cast<std::size_t>(b)] =
            final_ev.values[static_cast<std::size_t>(b)];
        std::copy(adv.row(b), adv.row(b) + dim, best_x.row(b));
      }
    }
  }
  return best_x;
}

inline ObjectiveFn make_objective(const ModelParams& params, const Tensor& x,
                                  const std::vector<int>& labels,
                                  const AttackConfig& cfg,
                                  const LossWeights& weights) {
  if (cfg.objective == AttackObjective::kComposite) {
    return make_composite_objective(params, x, labels, weights);
  }
  return make_ce_objective(params, labels, x.shape());
}

inline Tensor pgd(const ModelParams& params, const Tensor& x,
                  const std::vector<int>& labels, const AttackConfig& cfg,
                  const Rng& rng, const LossWeights& weights = {}) {
  return pgd_attack(make_objective(params, x, labels, cfg, weights), x, cfg, rng);
}

// Single-step sign attack on the CE objective.
inline Tensor fgsm(const ModelParams& params, const Tensor& x,
                   const std::vector<int>& labels, double epsilon,
                   double box_low, double box_high) {
  if (epsilon < 0.0) throw ConfigError("fgsm epsilon must be >= 0");
  ObjectiveFn objective = make_ce_objective(params, labels, x.shape());
  const ObjectiveEval ev = objective(x);
  Tensor adv = x;
  for (std::int64_t i = 0; i < adv.numel(); ++i) {
    const double g = ev.grad[i];
    const double sign = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
    adv[i] = std::clamp(adv[i] + epsilon * sign, box_low, box_high);
  }
  return adv;
}

}  // namespace advdpnp
