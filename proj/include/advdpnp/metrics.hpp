// Feature-space discrimination metrics plus the clean/robust evaluation
// harness.
//
//   FDR : sum_j tr(S_j^w) / tr(S_j^b), Euclidean scatter ratio (lower better)
//   AFS : angular within-class scatter over angular between-class scatter
//   SCR : mean over classes of nearest-rival center distance divided by the
//         mean within-class distance to the center (higher better)
//   MeanSep/MinSep : nearest-rival / global minimum pairwise angles between
//         class centers, in degrees
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "advdpnp/attacks.hpp"
#include "advdpnp/data.hpp"
#include "advdpnp/losses.hpp"
#include "advdpnp/model.hpp"

namespace advdpnp {

struct FeatureSet {
  Tensor features;          // (N, d)
  std::vector<int> labels;  // class indices
  Tensor centers;           // (M, d): prototypes, or classifier weights
};

namespace detail {

struct ClassStats {
  std::vector<int> counts;
  Tensor class_means;  // (M, d)
  std::vector<double> global_mean;
};

inline ClassStats class_stats(const FeatureSet& fs) {
  const int n = fs.features.dim(0);
  const int d = fs.features.dim(1);
  const int m = fs.centers.dim(0);
  if (fs.centers.dim(1) != d) throw ConfigError("center/feature dim mismatch");
  if (static_cast<int>(fs.labels.size()) != n) {
    throw ConfigError("feature/label count mismatch");
  }
  ClassStats st;
  st.counts.assign(static_cast<std::size_t>(m), 0);
  st.class_means = Tensor({m, d});
  st.global_mean.assign(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < n; ++i) {
    const int y = fs.labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= m) throw ConfigError("label out of range in FeatureSet");
    ++st.counts[static_cast<std::size_t>(y)];
    const double* f = fs.features.row(i);
    double* mu = st.class_means.row(y);
    for (int k = 0; k < d; ++k) {
      mu[k] += f[k];
      st.global_mean[static_cast<std::size_t>(k)] += f[k];
    }
  }
  for (int j = 0; j < m; ++j) {
    if (st.counts[static_cast<std::size_t>(j)] == 0) {
      throw NumericError("class " + std::to_string(j) +
                         " has no samples for metric computation");
    }
    double* mu = st.class_means.row(j);
    for (int k = 0; k < d; ++k) mu[k] /= st.counts[static_cast<std::size_t>(j)];
  }
  for (int k = 0; k < d; ++k) st.global_mean[static_cast<std::size_t>(k)] /= n;
  return st;
}

inline double cosine(const double* a, const double* b, std::int64_t n,
                     const char* what) {
  const double na = l2_norm(a, n);
  const double nb = l2_norm(b, n);
  if (na == 0.0 || nb == 0.0) {
    throw NumericError(std::string("zero-norm vector in ") + what);
  }
  return dot(a, b, n) / (na * nb);
}

}  // namespace detail

// Fisher discriminant ratio, per-class Euclidean scatter ratios summed.
inline double fdr(const FeatureSet& fs) {
  const auto st = detail::class_stats(fs);
  const int d = fs.features.dim(1);
  const int m = fs.centers.dim(0);
  std::vector<double> within(static_cast<std::size_t>(m), 0.0);
  for (int i = 0; i < fs.features.dim(0); ++i) {
    const int y = fs.labels[static_cast<std::size_t>(i)];
    const double* f = fs.features.row(i);
    const double* mu = st.class_means.row(y);
    for (int k = 0; k < d; ++k) {
      const double diff = f[k] - mu[k];
      within[static_cast<std::size_t>(y)] += diff * diff;
    }
  }
  double total = 0.0;
  for (int j = 0; j < m; ++j) {
    double between = 0.0;
    const double* mu = st.class_means.row(j);
    for (int k = 0; k < d; ++k) {
      const double diff = mu[k] - st.global_mean[static_cast<std::size_t>(k)];
      between += diff * diff;
    }
    between *= st.counts[static_cast<std::size_t>(j)];
    if (between == 0.0) {
      throw NumericError("fdr: class " + std::to_string(j) +
                         " mean coincides with the global mean");
    }
    total += within[static_cast<std::size_t>(j)] / between;
  }
  return total;
}

// Angular Fisher score over class means.
inline double afs(const FeatureSet& fs) {
  const auto st = detail::class_stats(fs);
  const int d = fs.features.dim(1);
  const int m = fs.centers.dim(0);
  double numerator = 0.0;
  for (int i = 0; i < fs.features.dim(0); ++i) {
    const int y = fs.labels[static_cast<std::size_t>(i)];
    numerator += 1.0 - detail::cosine(fs.features.row(i), st.class_means.row(y),
                                      d, "afs features");
  }
  double denominator = 0.0;
  for (int j = 0; j < m; ++j) {
    denominator +=
        st.counts[static_cast<std::size_t>(j)] *
        (1.0 - detail::cosine(st.class_means.row(j), st.global_mean.data(), d,
                              "afs class means"));
  }
  if (denominator == 0.0) {
    throw NumericError("afs: zero angular between-class scatter");
  }
  return numerator / denominator;
}

// Separation-to-compactness ratio against the given class centers.
inline double scr(const FeatureSet& fs) {
  const auto st = detail::class_stats(fs);
  const int d = fs.features.dim(1);
  const int m = fs.centers.dim(0);
  std::vector<double> mean_dist(static_cast<std::size_t>(m), 0.0);
  for (int i = 0; i < fs.features.dim(0); ++i) {
    const int y = fs.labels[static_cast<std::size_t>(i)];
    double sq = 0.0;
    const double* f = fs.features.row(i);
    const double* c = fs.centers.row(y);
    for (int k = 0; k < d; ++k) {
      const double diff = f[k] - c[k];
      sq += diff * diff;
    }
    mean_dist[static_cast<std::size_t>(y)] += std::sqrt(sq);
  }
  double total = 0.0;
  for (int j = 0; j < m; ++j) {
    mean_dist[static_cast<std::size_t>(j)] /= st.counts[static_cast<std::size_t>(j)];
    if (mean_dist[static_cast<std::size_t>(j)] == 0.0) {
      throw NumericError("scr: class " + std::to_string(j) +
                         " has zero mean distance to its center");
    }
    double nearest = std::numeric_limits<double>::infinity();
    for (int k = 0; k < m; ++k) {
      if (k == j) continue;
      double sq = 0.0;
      for (int t = 0; t < d; ++t) {
        const double diff = fs.centers.at(k, t) - fs.centers.at(j, t);
        sq += diff * diff;
      }
      nearest = std::min(nearest, std::sqrt(sq));
    }
    total += nearest / mean_dist[static_cast<std::size_t>(j)];
  }
  return total / static_cast<double>(m);
}

// (MeanSep, MinSep) in degrees over unit-normalized centers. arccos input is
// clamped to [-1, 1] to absorb roundoff.
inline std::pair<double, double> angular_separation(const Tensor& centers) {
  const int m = centers.dim(0);
  const int d = centers.dim(1);
  if (m < 2) throw ConfigError("angular_separation needs at least 2 centers");
  constexpr double kRadToDeg = 180.0 / 3.14159265358979323846;
  double mean_sep = 0.0;
  double min_sep = std::numeric_limits<double>::infinity();
  for (int j = 0; j < m; ++j) {
    double nearest = std::numeric_limits<double>::infinity();
    for (int k = 0; k < m; ++k) {
      if (k == j) continue;
      double c = detail::cosine(centers.row(j), centers.row(k), d,
                                "angular_separation centers");
      c = std::clamp(c, -1.0, 1.0);
      const double angle = std::acos(c) * kRadToDeg;
      nearest = std::min(nearest, angle);
    }
    mean_sep += nearest;
    min_sep = std::min(min_sep, nearest);
  }
  return {mean_sep / static_cast<double>(m), min_sep};
}

// ---- evaluation harness -----------------------------------------------------

enum class AttackKind { kPgd, kFgsm };

inline AttackKind parse_attack_kind(const std::string& s) {
  if (s == "pgd") return AttackKind::kPgd;
  if (s == "fgsm") return AttackKind::kFgsm;
  throw ConfigError("unknown attack kind '" + s + "'");
}

struct AttackSpec {
  std::string name;
  AttackConfig config;
  AttackKind kind = AttackKind::kPgd;
};

struct EvalOptions {
  std::vector<AttackSpec> attacks;
  AttackConfig geometry_attack;  // adversarial features for geometry metrics
  LossWeights weights;           // for composite-objective attacks
  int chunk = 256;
};

struct MetricsReport {
  double clean_acc = 0.0;
  std::vector<std::pair<std::string, double>> attack_acc;
  double ensemble_acc = 0.0;
  double fdr_clean = 0.0, fdr_adv = 0.0;
  double afs_clean = 0.0, afs_adv = 0.0;
  double scr_clean = 0.0, scr_adv = 0.0;
  double mean_sep_deg = 0.0, min_sep_deg = 0.0;
};

namespace detail {

// Applies fn to dataset chunks in order; deterministic chunk-derived RNG.
template <typename Fn>
inline void for_chunks(const Dataset& ds, int chunk, Fn&& fn) {
  for (int start = 0, ci = 0; start < ds.size(); start += chunk, ++ci) {
    const int end = std::min(ds.size(), start + chunk);
    std::vector<int> idx(static_cast<std::size_t>(end - start));
    for (int i = start; i < end; ++i) idx[static_cast<std::size_t>(i - start)] = i;
    fn(ci, gather_rows(ds.inputs, idx), gather_labels(ds.labels, idx), start);
  }
}

inline AttackConfig with_box(AttackConfig cfg, const Dataset& ds) {
  cfg.box_low = ds.box_low;
  cfg.box_high = ds.box_high;
  return cfg;
}

}  // namespace detail

// Generates adversarial inputs for a whole dataset, chunked.
inline Tensor attack_dataset(const ModelParams& params, const Dataset& ds,
                             const AttackConfig& cfg, const Rng& rng,
                             const LossWeights& weights = {}, int chunk = 256,
                             AttackKind kind = AttackKind::kPgd) {
  const AttackConfig boxed = detail::with_box(cfg, ds);
  Tensor out = ds.inputs;
  detail::for_chunks(ds, chunk, [&](int ci, const Tensor& bx,
                                    const std::vector<int>& by, int start) {
    const Tensor adv =
        kind == AttackKind::kFgsm
            ? fgsm(params, bx, by, boxed.epsilon, boxed.box_low, boxed.box_high)
            : pgd(params, bx, by, boxed,
                  rng.derive(static_cast<std::uint64_t>(ci)), weights);
    for (int r = 0; r < adv.dim(0); ++r) {
      std::copy(adv.row(r), adv.row(r) + adv.row_size(), out.row(start + r));
    }
  });
  return out;
}

inline double accuracy(const ModelParams& params, const Tensor& inputs,
                       const std::vector<int>& labels, int chunk = 256) {
  std::int64_t correct = 0;
  const int n = inputs.dim(0);
  for (int start = 0; start < n; start += chunk) {
    const int end = std::min(n, start + chunk);
    std::vector<int> idx(static_cast<std::size_t>(end - start));
    for (int i = start; i < end; ++i) idx[static_cast<std::size_t>(i - start)] = i;
    const Tensor bx = gather_rows(inputs, idx);
    const std::vector<int> pred =
        predict(class_probabilities(extract_features(params, bx), params.bank));
    for (int i = start; i < end; ++i) {
      correct += pred[static_cast<std::size_t>(i - start)] ==
                 labels[static_cast<std::size_t>(i)];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

// Robust accuracy plus mean CE under one attack; the sweep table rows.
inline std::pair<double, double> attacked_accuracy_and_loss(
    const ModelParams& params, const Dataset& ds, const AttackConfig& cfg,
    std::uint64_t seed, const LossWeights& weights = {},
    AttackKind kind = AttackKind::kPgd) {
  const Tensor adv = attack_dataset(params, ds, cfg, Rng(seed).derive("attack"),
                                    weights, 256, kind);
  std::int64_t correct = 0;
  double ce_sum = 0.0;
  const int n = ds.size();
  for (int start = 0; start < n; start += 256) {
    const int end = std::min(n, start + 256);
    std::vector<int> idx(static_cast<std::size_t>(end - start));
    for (int i = start; i < end; ++i) idx[static_cast<std::size_t>(i - start)] = i;
    const Tensor bx = gather_rows(adv, idx);
    const Tensor probs =
        class_probabilities(extract_features(params, bx), params.bank);
    const std::vector<int> pred = predict(probs);
    for (int i = start; i < end; ++i) {
      const int y = ds.labels[static_cast<std::size_t>(i)];
      correct += pred[static_cast<std::size_t>(i - start)] == y;
      ce_sum += ce_loss(probs.row_copy(i - start), y);
    }
  }
  return {static_cast<double>(correct) / n, ce_sum / n};
}

// Fraction of samples classified correctly under every listed attack.
inline double ensemble_accuracy(const ModelParams& params, const Dataset& ds,
                                const std::vector<AttackSpec>& attacks,
                                std::uint64_t seed,
                                const LossWeights& weights = {}) {
  if (attacks.empty()) throw ConfigError("ensemble_accuracy needs attacks");
  std::vector<char> survived(static_cast<std::size_t>(ds.size()), 1);
  for (std::size_t a = 0; a < attacks.size(); ++a) {
    const Tensor adv = attack_dataset(
        params, ds, attacks[a].config,
        Rng(seed).derive("ensemble").derive(static_cast<std::uint64_t>(a)),
        weights, 256, attacks[a].kind);
    detail::for_chunks(ds, 256, [&](int, const Tensor&,
                                    const std::vector<int>&, int start) {
      std::vector<int> idx;
      for (int i = start; i < std::min(ds.size(), start + 256); ++i) idx.push_back(i);
      const Tensor bx = gather_rows(adv, idx);
      const std::vector<int> pred = predict(
          class_probabilities(extract_features(params, bx), params.bank));
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (pred[i] != ds.labels[static_cast<std::size_t>(idx[i])]) {
          survived[static_cast<std::size_t>(idx[i])] = 0;
        }
      }
    });
  }
  std::int64_t ok = 0;
  for (char s : survived) ok += s;
  return static_cast<double>(ok) / static_cast<double>(ds.size());
}

inline Tensor features_of(const ModelParams& params, const Tensor& inputs,
                          int chunk = 256) {
  const int n = inputs.dim(0);
  Tensor out({n, params.arch.feature_dim});
  for (int start = 0; start < n; start += chunk) {
    const int end = std::min(n, start + chunk);
    std::vector<int> idx(static_cast<std::size_t>(end - start));
    for (int i = start; i < end; ++i) idx[static_cast<std::size_t>(i - start)] = i;
    const Tensor f = extract_features(params, gather_rows(inputs, idx));
    for (int r = 0; r < f.dim(0); ++r) {
      std::copy(f.row(r), f.row(r) + f.dim(1), out.row(start + r));
    }
  }
  return out;
}

struct EvalArtifacts {
  MetricsReport report;
  Tensor clean_features;  // (N, d)
  Tensor adv_features;    // (N, d), from the geometry attack
};

// Full evaluation: accuracies under each configured attack plus geometry
// metrics on clean features and on features of PGD-perturbed inputs. The
// prototype bank is used verbatim as the set of class centers.
inline EvalArtifacts evaluate_full(const ModelParams& params, const Dataset& ds,
                                   const EvalOptions& opts, std::uint64_t seed) {
  if (ds.size() < 1) throw ConfigError("evaluate: dataset is empty");
  MetricsReport report;
  report.clean_acc = accuracy(params, ds.inputs, ds.labels, opts.chunk);

  std::vector<char> survived(static_cast<std::size_t>(ds.size()), 1);
  for (std::size_t a = 0; a < opts.attacks.size(); ++a) {
    const Tensor adv = attack_dataset(
        params, ds, opts.attacks[a].config,
        Rng(seed).derive("eval").derive(static_cast<std::uint64_t>(a)),
        opts.weights, opts.chunk, opts.attacks[a].kind);
    std::int64_t correct = 0;
    for (int start = 0; start < ds.size(); start += opts.chunk) {
      const int end = std::min(ds.size(), start + opts.chunk);
      std::vector<int> idx(static_cast<std::size_t>(end - start));
      for (int i = start; i < end; ++i) idx[static_cast<std::size_t>(i - start)] = i;
      const std::vector<int> pred = predict(class_probabilities(
          extract_features(params, gather_rows(adv, idx)), params.bank));
      for (int i = start; i < end; ++i) {
        const bool ok = pred[static_cast<std::size_t>(i - start)] ==
                        ds.labels[static_cast<std::size_t>(i)];
        correct += ok;
        if (!ok) survived[static_cast<std::size_t>(i)] = 0;
      }
    }
    report.attack_acc.emplace_back(
        opts.attacks[a].name,
        static_cast<double>(correct) / static_cast<double>(ds.size()));
  }
  if (!opts.attacks.empty()) {
    std::int64_t ok = 0;
    for (char s : survived) ok += s;
    report.ensemble_acc = static_cast<double>(ok) / static_cast<double>(ds.size());
  }

  Tensor clean_features = features_of(params, ds.inputs, opts.chunk);
  const Tensor adv_inputs = attack_dataset(params, ds, opts.geometry_attack,
                                           Rng(seed).derive("geometry"),
                                           opts.weights, opts.chunk);
  Tensor adv_features = features_of(params, adv_inputs, opts.chunk);

  const FeatureSet clean_fs{clean_features, ds.labels, params.bank.prototypes};
  const FeatureSet adv_fs{adv_features, ds.labels, params.bank.prototypes};
  report.fdr_clean = fdr(clean_fs);
  report.fdr_adv = fdr(adv_fs);
  report.afs_clean = afs(clean_fs);
  report.afs_adv = afs(adv_fs);
  report.scr_clean = scr(clean_fs);
  report.scr_adv = scr(adv_fs);
  const auto [mean_sep, min_sep] = angular_separation(params.bank.prototypes);
  report.mean_sep_deg = mean_sep;
  report.min_sep_deg = min_sep;
  return EvalArtifacts{std::move(report), std::move(clean_features),
                       std::move(adv_features)};
}

inline MetricsReport evaluate(const ModelParams& params, const Dataset& ds,
                              const EvalOptions& opts, std::uint64_t seed) {
  return evaluate_full(params, ds, opts, seed).report;
}

}  // namespace advdpnp
