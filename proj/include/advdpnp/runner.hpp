// Orchestration behind the CLI subcommands: train/eval/sweep runs with their
// file artifacts, and the gradient-soundness check. All outputs go through
// atomic writes; an output directory is locked for the duration of a run.
#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "advdpnp/checkpoint.hpp"
#include "advdpnp/config.hpp"
#include "advdpnp/io.hpp"
#include "advdpnp/metrics.hpp"
#include "advdpnp/trainer.hpp"

#ifndef ADVDPNP_VERSION
#define ADVDPNP_VERSION "dev"
#endif

namespace advdpnp {

namespace detail {

// Shortest exact decimal form of a double, stable across runs.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

}  // namespace detail

inline std::string history_csv(const std::vector<EpochStats>& history) {
  std::ostringstream os;
  os << "epoch,lr,ce_clean,ce_adv,pull_clean,pull_adv,dnp,dfa,total,"
        "clean_acc,adv_acc\n";
  for (const EpochStats& e : history) {
    os << e.epoch << ',' << detail::fmt_double(e.lr) << ','
       << detail::fmt_double(e.loss.ce_clean) << ','
       << detail::fmt_double(e.loss.ce_adv) << ','
       << detail::fmt_double(e.loss.pull_clean) << ','
       << detail::fmt_double(e.loss.pull_adv) << ','
       << detail::fmt_double(e.loss.dnp) << ','
       << detail::fmt_double(e.loss.dfa) << ','
       << detail::fmt_double(e.loss.total) << ','
       << detail::fmt_double(e.clean_acc) << ','
       << detail::fmt_double(e.adv_acc) << '\n';
  }
  return os.str();
}

inline std::string features_csv(const Tensor& clean, const Tensor& adv,
                                const std::vector<int>& labels) {
  const int d = clean.dim(1);
  std::ostringstream os;
  os << "index,label,split";
  for (int k = 0; k < d; ++k) os << ",f" << k;
  os << '\n';
  auto emit = [&](const Tensor& f, const char* split) {
    for (int i = 0; i < f.dim(0); ++i) {
      os << i << ',' << labels[static_cast<std::size_t>(i)] << ',' << split;
      for (int k = 0; k < d; ++k) os << ',' << detail::fmt_double(f.at(i, k));
      os << '\n';
    }
  };
  emit(clean, "clean");
  emit(adv, "adv");
  return os.str();
}

inline json report_json(const MetricsReport& r) {
  json j;
  j["clean_acc"] = r.clean_acc;
  for (const auto& [name, acc] : r.attack_acc) j["acc_" + name] = acc;
  j["ensemble_acc"] = r.ensemble_acc;
  j["fdr_clean"] = r.fdr_clean;
  j["fdr_adv"] = r.fdr_adv;
  j["afs_clean"] = r.afs_clean;
  j["afs_adv"] = r.afs_adv;
  j["scr_clean"] = r.scr_clean;
  j["scr_adv"] = r.scr_adv;
  j["mean_sep_deg"] = r.mean_sep_deg;
  j["min_sep_deg"] = r.min_sep_deg;
  return j;
}

// ---- train ------------------------------------------------------------------

inline void run_train(const ExperimentConfig& cfg,
                      const std::filesystem::path& out_dir) {
  validate_config(cfg);
  DirLock lock(out_dir);
  const Dataset train_ds = build_dataset(cfg.dataset, "train");

  TrainHooks hooks;
  if (cfg.train.checkpoint_interval > 0) {
    hooks.on_epoch_end = [&](const TrainState& state) {
      const int epoch = state.epoch;
      if ((epoch + 1) % cfg.train.checkpoint_interval == 0) {
        char name[48];
        std::snprintf(name, sizeof(name), "checkpoint_epoch%04d.bin", epoch);
        save_checkpoint(out_dir / name, state.params);
      }
    };
  }
  auto [params, history] = train(cfg.train, cfg.arch, train_ds, hooks);

  save_checkpoint(out_dir / "checkpoint.bin", params);
  atomic_write_file(out_dir / "history.csv", history_csv(history));
  json manifest;
  manifest["config"] = cfg.echo;
  manifest["version"] = ADVDPNP_VERSION;
  manifest["seed"] = cfg.seed;
  atomic_write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

// ---- eval -------------------------------------------------------------------

inline void check_arch_matches(const ExperimentConfig& cfg,
                               const ModelParams& params) {
  if (params.arch.family != cfg.arch.family ||
      params.arch.input_shape != cfg.arch.input_shape ||
      params.arch.hidden != cfg.arch.hidden ||
      params.arch.feature_dim != cfg.arch.feature_dim) {
    throw ConfigError("checkpoint architecture does not match the config");
  }
}

inline void run_eval(const ExperimentConfig& cfg,
                     const std::filesystem::path& checkpoint_path,
                     const std::filesystem::path& out_dir) {
  validate_config(cfg);
  const ModelParams params = load_checkpoint(checkpoint_path);
  check_arch_matches(cfg, params);
  DirLock lock(out_dir);
  const Dataset test_ds = build_dataset(cfg.dataset, "test");
  if (params.bank.classes() != test_ds.num_classes) {
    throw ConfigError("checkpoint classes do not match the dataset");
  }

  EvalOptions opts;
  opts.attacks = cfg.eval.attacks;
  opts.geometry_attack = cfg.eval.geometry_attack;
  opts.weights = cfg.train.weights;
  const EvalArtifacts artifacts = evaluate_full(params, test_ds, opts, cfg.seed);

  json j = report_json(artifacts.report);
  j["timestamp"] = detail::timestamp_utc();
  atomic_write_file(out_dir / "metrics.json", j.dump(2) + "\n");

  if (params.arch.feature_dim == 2) {
    atomic_write_file(out_dir / "features_2d.csv",
                      features_csv(artifacts.clean_features,
                                   artifacts.adv_features, test_ds.labels));
  }
}

// ---- sweep ------------------------------------------------------------------

struct SweepRow {
  std::string kind;
  std::string value;
  double accuracy = 0.0;
  double mean_ce = 0.0;
};

inline std::vector<SweepRow> run_sweep_rows(const ExperimentConfig& cfg,
                                            const ModelParams& params,
                                            const Dataset& test_ds) {
  const SweepSection& sw = cfg.sweep;
  if (!sw.any()) throw ConfigError("sweep section requests no grids");
  std::vector<SweepRow> rows;
  const LossWeights& w = cfg.train.weights;

  if (sw.eps_present) {
    for (double eps : sw.eps_grid) {
      AttackConfig f;
      f.epsilon = eps;
      f.iterations = 0;
      auto [facc, fce] = attacked_accuracy_and_loss(params, test_ds, f, cfg.seed,
                                                    w, AttackKind::kFgsm);
      rows.push_back({"eps_fgsm", detail::fmt_double(eps), facc, fce});

      AttackConfig p;
      p.norm = sw.eps_norm;
      p.epsilon = eps;
      p.iterations = sw.eps_iterations;
      p.step = eps > 0.0 ? 2.5 * eps / sw.eps_iterations : 0.01;
      p.random_init = false;
      auto [pacc, pce] = attacked_accuracy_and_loss(params, test_ds, p, cfg.seed, w);
      rows.push_back({"eps_pgd", detail::fmt_double(eps), pacc, pce});
    }
  }
  if (sw.iter_present) {
    for (int iters : sw.iter_grid) {
      AttackConfig p;
      p.norm = sw.iter_norm;
      p.epsilon = sw.iter_epsilon;
      p.step = sw.iter_step;
      p.iterations = iters;
      p.random_init = false;
      auto [acc, ce] = attacked_accuracy_and_loss(params, test_ds, p, cfg.seed, w);
      rows.push_back({"iterations", std::to_string(iters), acc, ce});
    }
  }
  if (sw.restart_present) {
    for (int restarts : sw.restart_grid) {
      AttackConfig p;
      p.norm = sw.restart_norm;
      p.epsilon = sw.restart_epsilon;
      p.step = sw.restart_step;
      p.iterations = sw.restart_iterations;
      p.restarts = restarts;
      p.random_init = true;
      auto [acc, ce] = attacked_accuracy_and_loss(params, test_ds, p, cfg.seed, w);
      rows.push_back({"restarts", std::to_string(restarts), acc, ce});
    }
  }
  if (sw.adaptive_present) {
    AttackConfig p;
    p.norm = sw.adaptive_norm;
    p.epsilon = sw.adaptive_epsilon;
    p.step = sw.adaptive_step;
    p.iterations = sw.adaptive_iterations;
    p.random_init = false;
    auto [ce_acc, ce_loss_v] = attacked_accuracy_and_loss(params, test_ds, p,
                                                          cfg.seed, w);
    rows.push_back({"objective", "ce", ce_acc, ce_loss_v});
    p.objective = AttackObjective::kComposite;
    auto [comp_acc, comp_ce] = attacked_accuracy_and_loss(params, test_ds, p,
                                                          cfg.seed, w);
    rows.push_back({"objective", "composite", comp_acc, comp_ce});
  }
  return rows;
}

inline void run_sweep(const ExperimentConfig& cfg,
                      const std::filesystem::path& checkpoint_path,
                      const std::filesystem::path& out_dir) {
  validate_config(cfg);
  const ModelParams params = load_checkpoint(checkpoint_path);
  check_arch_matches(cfg, params);
  DirLock lock(out_dir);
  const Dataset test_ds = build_dataset(cfg.dataset, "test");
  const std::vector<SweepRow> rows = run_sweep_rows(cfg, params, test_ds);
  std::ostringstream os;
  os << "sweep,value,accuracy,mean_ce\n";
  for (const SweepRow& r : rows) {
    os << r.kind << ',' << r.value << ',' << detail::fmt_double(r.accuracy)
       << ',' << detail::fmt_double(r.mean_ce) << '\n';
  }
  atomic_write_file(out_dir / "sweep.csv", os.str());
}

// ---- gradcheck ----------------------------------------------------------------

struct GradCheckResult {
  std::string component;
  double max_rel_error = 0.0;
};

namespace detail {

// grad_check with an optional corruption of the analytic gradient; the
// corrupted path exists so the reporting can be exercised with a known-bad
// backward rule.
inline double checked_error(const Graph& g, int output, const NamedTensors& point,
                            bool corrupt) {
  if (!corrupt) return grad_check(g, output, point, 1e-5);
  NamedTensors analytic = backward(g, output, point);
  analytic.begin()->second[0] += 0.1;  // simulated wrong backward rule
  double worst = 0.0;
  NamedTensors probe = point;
  const double step = 1e-5;
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
      worst = std::max(worst, std::abs(grad[i] - numeric) /
                                  std::max(1.0, std::abs(grad[i])));
    }
  }
  return worst;
}

}  // namespace detail

// Checks CE, DPP, DNP, DFA, and the composite loss against central
// differences on a small random model. DNP prototypes are resampled until
// every paired coordinate difference is at least 1e-3 (away from the
// sqrt-abs kinks).
inline std::vector<GradCheckResult> gradcheck_components(
    std::uint64_t seed, const std::string& corrupt_component = "") {
  const ArchitectureConfig arch{"mlp", {3}, {6}, 3};
  const int classes = 4;
  const double alpha = 4.0;
  const LossWeights weights{0.1, 0.1, 2.0, alpha};
  Rng rng(seed);

  ModelParams params = init_model(arch, classes, alpha, rng.derive("model").seed());
  // Keep DNP away from its kinks.
  Rng proto_rng = rng.derive("protos");
  for (bool ok = false; !ok;) {
    for (std::int64_t i = 0; i < params.bank.prototypes.numel(); ++i) {
      params.bank.prototypes[i] = alpha / 2.0 * proto_rng.normal();
    }
    const std::vector<int> neg = nearest_negatives(params.bank);
    ok = true;
    for (int j = 0; j < classes && ok; ++j) {
      for (int t = 0; t < arch.feature_dim; ++t) {
        const double diff = std::abs(
            params.bank.prototypes.at(j, t) -
            params.bank.prototypes.at(neg[static_cast<std::size_t>(j)], t));
        if (diff < 1e-3) {
          ok = false;
          break;
        }
      }
    }
  }

  const int batch = 2;
  Rng data_rng = rng.derive("data");
  Tensor x({batch, 3});
  Tensor x_adv({batch, 3});
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    x[i] = data_rng.normal();
    x_adv[i] = x[i] + 0.1 * data_rng.normal();
  }
  std::vector<int> labels(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    labels[static_cast<std::size_t>(i)] =
        static_cast<int>(data_rng.uniform_int(classes));
  }
  const Tensor onehot = one_hot(labels, classes);

  NamedTensors full_point;
  full_point.emplace("x_clean", x);
  full_point.emplace("x_adv", x_adv);
  for (const auto& [name, t] : params.extractor) full_point.emplace(name, t);
  full_point.emplace(kPrototypesName, params.bank.prototypes);

  std::vector<GradCheckResult> results;
  auto run = [&](const std::string& name, const Graph& g, int out,
                 const NamedTensors& point) {
    results.push_back(
        {name, detail::checked_error(g, out, point, corrupt_component == name)});
  };

  NamedTensors clean_point = full_point;
  clean_point.erase("x_adv");

  {
    Graph g;
    int xin = g.input("x_clean", {batch, 3});
    int f = apply_extractor(g, arch, xin, extractor_param_nodes(g, arch, nullptr));
    int protos = g.input(kPrototypesName, {classes, 3});
    int probs = build_head(g, f, protos, alpha);
    int ce = g.scale(g.sum(g.mul(g.constant(onehot), g.log(probs))),
                     -1.0 / batch);
    run("ce", g, ce, clean_point);
  }
  {
    Graph g;
    int xin = g.input("x_clean", {batch, 3});
    int f = apply_extractor(g, arch, xin, extractor_param_nodes(g, arch, nullptr));
    int protos = g.input(kPrototypesName, {classes, 3});
    int probs = build_head(g, f, protos, alpha);
    int onehot_c = g.constant(onehot);
    int ce = g.scale(g.sum(g.mul(onehot_c, g.log(probs))), -1.0 / batch);
    int pull = g.scale(g.sum(g.square(g.sub(f, g.matmul(onehot_c, protos)))),
                       0.5 * weights.lambda_dpp / batch);
    run("dpp", g, g.add(ce, pull), clean_point);
  }
  {
    Graph g;
    int protos = g.input(kPrototypesName, {classes, 3});
    const std::vector<int> neg = nearest_negatives(params.bank);
    Tensor sel({classes, classes});
    for (int j = 0; j < classes; ++j) sel.at(j, neg[static_cast<std::size_t>(j)]) = 1.0;
    int dnp = g.scale(
        g.sum(g.sqrt_abs(g.sub(protos, g.matmul(g.constant(sel), protos)))),
        -1.0 / classes);
    NamedTensors point;
    point.emplace(kPrototypesName, params.bank.prototypes);
    run("dnp", g, dnp, point);
  }
  {
    Graph g;
    int xc = g.input("x_clean", {batch, 3});
    int xa = g.input("x_adv", {batch, 3});
    const std::vector<int> ids = extractor_param_nodes(g, arch, nullptr);
    int fc = apply_extractor(g, arch, xc, ids);
    int fa = apply_extractor(g, arch, xa, ids);
    int protos = g.input(kPrototypesName, {classes, 3});
    int pc = build_head(g, fc, protos, alpha);
    int pa = build_head(g, fa, protos, alpha);
    int kl = g.scale(g.sum(g.mul(pc, g.sub(g.log(pc), g.log(pa)))),
                     1.0 / batch);
    run("dfa", g, kl, full_point);
  }
  {
    CompositeOptions opts;
    opts.lock_prototypes = false;
    CompositeGraph cg = build_composite(arch, classes, labels, weights, opts,
                                        nearest_negatives(params.bank));
    run("composite", cg.graph, cg.total, full_point);
  }
  return results;
}

// Nonzero result means at least one component exceeded the tolerance.
inline int run_gradcheck(std::uint64_t base_seed, int seeds, double tolerance,
                         std::ostream& out,
                         const std::string& corrupt_component = "") {
  bool all_ok = true;
  std::vector<double> worst(5, 0.0);
  std::vector<std::string> names;
  for (int s = 0; s < seeds; ++s) {
    const auto results =
        gradcheck_components(base_seed + static_cast<std::uint64_t>(s),
                             corrupt_component);
    if (names.empty()) {
      for (const auto& r : results) names.push_back(r.component);
    }
    for (std::size_t i = 0; i < results.size(); ++i) {
      worst[i] = std::max(worst[i], results[i].max_rel_error);
    }
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    const bool ok = worst[i] <= tolerance;
    all_ok = all_ok && ok;
    out << "gradcheck " << names[i] << ": max_rel_error="
        << detail::fmt_double(worst[i]) << (ok ? " ok" : " FAIL") << "\n";
  }
  return all_ok ? 0 : 3;
}

}  // namespace advdpnp
