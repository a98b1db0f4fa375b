// Experiment configuration: a single JSON document with dataset,
// architecture, training, evaluation, and sweep sections. Unknown keys are
// hard errors so typos surface immediately.
#pragma once

#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "advdpnp/data.hpp"
#include "advdpnp/io.hpp"
#include "advdpnp/metrics.hpp"
#include "advdpnp/trainer.hpp"

namespace advdpnp {

using json = nlohmann::json;

namespace detail {

inline void expect_keys(const json& obj, const std::string& ctx,
                        std::initializer_list<const char*> keys) {
  if (!obj.is_object()) throw ConfigError(ctx + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    bool known = false;
    for (const char* k : keys) {
      if (key == k) {
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError("unknown key '" + key + "' in " + ctx);
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("bad value for '") + key + "'");
  }
}

template <typename T>
T require(const json& obj, const char* key, const std::string& ctx) {
  if (!obj.contains(key)) {
    throw ConfigError("missing key '" + std::string(key) + "' in " + ctx);
  }
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + ctx);
  }
}

}  // namespace detail

struct DatasetSection {
  std::string kind;  // "blobs" | "idx"
  // blobs
  BlobSpec blobs;  // seed field = train seed
  int test_samples_per_class = 0;
  std::uint64_t test_seed = 0;
  // idx
  std::string train_images, train_labels, test_images, test_labels;
  int max_train_samples = 0;  // 0 = all
  int max_test_samples = 0;
  bool augment = false;
};

struct EvalSection {
  std::vector<AttackSpec> attacks;
  AttackConfig geometry_attack;
  bool geometry_given = false;
};

struct SweepSection {
  bool eps_present = false;
  std::vector<double> eps_grid;
  int eps_iterations = 20;
  Norm eps_norm = Norm::kLinf;

  bool iter_present = false;
  std::vector<int> iter_grid;
  double iter_epsilon = 0.0;
  double iter_step = 0.0;
  Norm iter_norm = Norm::kLinf;

  bool restart_present = false;
  std::vector<int> restart_grid;
  double restart_epsilon = 0.0;
  double restart_step = 0.0;
  int restart_iterations = 40;
  Norm restart_norm = Norm::kLinf;

  bool adaptive_present = false;
  double adaptive_epsilon = 0.0;
  double adaptive_step = 0.0;
  int adaptive_iterations = 20;
  Norm adaptive_norm = Norm::kLinf;

  bool any() const {
    return eps_present || iter_present || restart_present || adaptive_present;
  }
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir;
  DatasetSection dataset;
  ArchitectureConfig arch;
  TrainConfig train;
  EvalSection eval;
  SweepSection sweep;
  json echo;  // effective config, re-emitted into the run manifest
};

namespace detail {

inline AttackConfig parse_attack(const json& j, const std::string& ctx,
                                 bool default_random_init) {
  expect_keys(j, ctx,
              {"norm", "epsilon", "step", "iterations", "restarts", "objective",
               "random_init"});
  AttackConfig cfg;
  cfg.norm = parse_norm(get_or<std::string>(j, "norm", "linf"));
  cfg.epsilon = require<double>(j, "epsilon", ctx);
  cfg.step = get_or<double>(j, "step", cfg.epsilon > 0.0 ? cfg.epsilon / 4.0 : 0.01);
  cfg.iterations = get_or<int>(j, "iterations", 10);
  cfg.restarts = get_or<int>(j, "restarts", 1);
  cfg.objective =
      parse_objective(get_or<std::string>(j, "objective", "cross-entropy"));
  cfg.random_init = get_or<bool>(j, "random_init", default_random_init);
  cfg.validate();
  return cfg;
}

inline DatasetSection parse_dataset(const json& j) {
  expect_keys(j, "dataset", {"kind", "blobs", "idx", "augment"});
  DatasetSection ds;
  ds.kind = require<std::string>(j, "kind", "dataset");
  ds.augment = get_or<bool>(j, "augment", false);
  if (ds.kind == "blobs") {
    const json& b = require<json>(j, "blobs", "dataset");
    expect_keys(b, "dataset.blobs",
                {"classes", "dim", "centers", "stddev", "train_samples_per_class",
                 "test_samples_per_class", "train_seed", "test_seed", "box"});
    ds.blobs.classes = require<int>(b, "classes", "dataset.blobs");
    ds.blobs.dim = require<int>(b, "dim", "dataset.blobs");
    ds.blobs.centers =
        require<std::vector<std::vector<double>>>(b, "centers", "dataset.blobs");
    ds.blobs.stddev = require<double>(b, "stddev", "dataset.blobs");
    ds.blobs.samples_per_class =
        require<int>(b, "train_samples_per_class", "dataset.blobs");
    ds.test_samples_per_class =
        get_or<int>(b, "test_samples_per_class", ds.blobs.samples_per_class);
    ds.blobs.seed = get_or<std::uint64_t>(b, "train_seed", 1);
    ds.test_seed = get_or<std::uint64_t>(b, "test_seed", ds.blobs.seed + 1);
    const auto box = require<std::vector<double>>(b, "box", "dataset.blobs");
    if (box.size() != 2) throw ConfigError("dataset.blobs.box must be [low, high]");
    ds.blobs.box_low = box[0];
    ds.blobs.box_high = box[1];
    ds.blobs.validate();
  } else if (ds.kind == "idx") {
    const json& b = require<json>(j, "idx", "dataset");
    expect_keys(b, "dataset.idx",
                {"train_images", "train_labels", "test_images", "test_labels",
                 "max_train_samples", "max_test_samples"});
    ds.train_images = require<std::string>(b, "train_images", "dataset.idx");
    ds.train_labels = require<std::string>(b, "train_labels", "dataset.idx");
    ds.test_images = require<std::string>(b, "test_images", "dataset.idx");
    ds.test_labels = require<std::string>(b, "test_labels", "dataset.idx");
    ds.max_train_samples = get_or<int>(b, "max_train_samples", 0);
    ds.max_test_samples = get_or<int>(b, "max_test_samples", 0);
  } else {
    throw ConfigError("dataset.kind must be 'blobs' or 'idx'");
  }
  return ds;
}

inline ArchitectureConfig parse_arch(const json& j) {
  expect_keys(j, "architecture", {"family", "input_shape", "hidden", "feature_dim"});
  ArchitectureConfig arch;
  arch.family = require<std::string>(j, "family", "architecture");
  arch.input_shape = require<std::vector<int>>(j, "input_shape", "architecture");
  arch.hidden = get_or<std::vector<int>>(j, "hidden", {});
  arch.feature_dim = require<int>(j, "feature_dim", "architecture");
  return arch;
}

inline TrainConfig parse_train(const json& j) {
  expect_keys(j, "train",
              {"mode", "epochs", "batch_size", "lr", "milestones", "momentum",
               "weight_decay", "alpha", "lambda_dpp", "lambda_dnp", "lambda_dfa",
               "mask_clean_dpp", "full_dfa_to_prototypes", "checkpoint_interval",
               "attack"});
  TrainConfig cfg;
  cfg.mode = parse_train_mode(get_or<std::string>(j, "mode", "adv-dpnp"));
  cfg.epochs = require<int>(j, "epochs", "train");
  cfg.batch_size = get_or<int>(j, "batch_size", 128);
  cfg.schedule.initial = get_or<double>(j, "lr", 0.1);
  if (j.contains("milestones")) {
    for (const json& m : j.at("milestones")) {
      expect_keys(m, "train.milestones[]", {"epoch", "lr"});
      cfg.schedule.milestones.push_back(
          {require<int>(m, "epoch", "milestone"), require<double>(m, "lr", "milestone")});
    }
  }
  cfg.momentum = get_or<double>(j, "momentum", 0.9);
  cfg.weight_decay = get_or<double>(j, "weight_decay", 5e-4);
  cfg.weights.alpha = get_or<double>(j, "alpha", 40.0);
  cfg.weights.lambda_dpp = get_or<double>(j, "lambda_dpp", 0.1);
  cfg.weights.lambda_dnp = get_or<double>(j, "lambda_dnp", 0.1);
  cfg.weights.lambda_dfa = get_or<double>(j, "lambda_dfa", 2.0);
  cfg.mask_clean_dpp = get_or<bool>(j, "mask_clean_dpp", false);
  cfg.full_dfa_to_prototypes = get_or<bool>(j, "full_dfa_to_prototypes", false);
  cfg.checkpoint_interval = get_or<int>(j, "checkpoint_interval", 0);
  // Training attack defaults to one random start.
  cfg.attack = parse_attack(require<json>(j, "attack", "train"), "train.attack",
                            /*default_random_init=*/true);
  return cfg;
}

inline EvalSection parse_eval(const json& j) {
  expect_keys(j, "eval", {"attacks", "geometry_attack"});
  EvalSection ev;
  for (const json& a : require<json>(j, "attacks", "eval")) {
    expect_keys(a, "eval.attacks[]",
                {"name", "kind", "norm", "epsilon", "step", "iterations",
                 "restarts", "objective", "random_init"});
    AttackSpec spec;
    spec.name = require<std::string>(a, "name", "eval.attacks[]");
    spec.kind = parse_attack_kind(get_or<std::string>(a, "kind", "pgd"));
    json cfg = a;
    cfg.erase("name");
    cfg.erase("kind");
    if (spec.kind == AttackKind::kFgsm) {
      // only the budget matters for the single-step attack
      expect_keys(cfg, "eval.attacks[] (fgsm)", {"epsilon"});
      spec.config.epsilon = require<double>(cfg, "epsilon", "eval.attacks[]");
      spec.config.iterations = 0;
    } else {
      // evaluation PGD starts from the clean point unless asked otherwise
      spec.config = parse_attack(cfg, "eval.attacks[] '" + spec.name + "'",
                                 /*default_random_init=*/false);
    }
    ev.attacks.push_back(std::move(spec));
  }
  if (j.contains("geometry_attack")) {
    ev.geometry_attack = parse_attack(j.at("geometry_attack"), "eval.geometry_attack",
                                      /*default_random_init=*/false);
    ev.geometry_given = true;
  }
  return ev;
}

inline SweepSection parse_sweep(const json& j) {
  expect_keys(j, "sweep", {"eps", "iterations", "restarts", "adaptive"});
  SweepSection sw;
  if (j.contains("eps")) {
    const json& e = j.at("eps");
    expect_keys(e, "sweep.eps", {"grid", "iterations", "norm"});
    sw.eps_present = true;
    sw.eps_grid = require<std::vector<double>>(e, "grid", "sweep.eps");
    sw.eps_iterations = get_or<int>(e, "iterations", 20);
    sw.eps_norm = parse_norm(get_or<std::string>(e, "norm", "linf"));
  }
  if (j.contains("iterations")) {
    const json& e = j.at("iterations");
    expect_keys(e, "sweep.iterations", {"grid", "epsilon", "step", "norm"});
    sw.iter_present = true;
    sw.iter_grid = require<std::vector<int>>(e, "grid", "sweep.iterations");
    sw.iter_epsilon = require<double>(e, "epsilon", "sweep.iterations");
    sw.iter_step = require<double>(e, "step", "sweep.iterations");
    sw.iter_norm = parse_norm(get_or<std::string>(e, "norm", "linf"));
  }
  if (j.contains("restarts")) {
    const json& e = j.at("restarts");
    expect_keys(e, "sweep.restarts", {"grid", "epsilon", "step", "iterations", "norm"});
    sw.restart_present = true;
    sw.restart_grid = require<std::vector<int>>(e, "grid", "sweep.restarts");
    sw.restart_epsilon = require<double>(e, "epsilon", "sweep.restarts");
    sw.restart_step = require<double>(e, "step", "sweep.restarts");
    sw.restart_iterations = get_or<int>(e, "iterations", 40);
    sw.restart_norm = parse_norm(get_or<std::string>(e, "norm", "linf"));
  }
  if (j.contains("adaptive")) {
    const json& e = j.at("adaptive");
    expect_keys(e, "sweep.adaptive", {"epsilon", "step", "iterations", "norm"});
    sw.adaptive_present = true;
    sw.adaptive_epsilon = require<double>(e, "epsilon", "sweep.adaptive");
    sw.adaptive_step = require<double>(e, "step", "sweep.adaptive");
    sw.adaptive_iterations = get_or<int>(e, "iterations", 20);
    sw.adaptive_norm = parse_norm(get_or<std::string>(e, "norm", "linf"));
  }
  return sw;
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  detail::expect_keys(j, "config",
                      {"seed", "out_dir", "dataset", "architecture", "train",
                       "eval", "sweep"});
  ExperimentConfig cfg;
  cfg.seed = detail::get_or<std::uint64_t>(j, "seed", 0);
  cfg.out_dir = detail::get_or<std::string>(j, "out_dir", "");
  cfg.dataset = detail::parse_dataset(detail::require<json>(j, "dataset", "config"));
  cfg.arch = detail::parse_arch(detail::require<json>(j, "architecture", "config"));
  cfg.train = detail::parse_train(detail::require<json>(j, "train", "config"));
  cfg.train.seed = cfg.seed;
  cfg.train.augment = cfg.dataset.augment;
  if (j.contains("eval")) cfg.eval = detail::parse_eval(j.at("eval"));
  if (j.contains("sweep")) cfg.sweep = detail::parse_sweep(j.at("sweep"));

  // Default geometry attack: 20-step linf PGD at the largest configured
  // linf budget (falling back to the training budget).
  if (!cfg.eval.geometry_given) {
    double eps = cfg.train.attack.epsilon;
    for (const AttackSpec& a : cfg.eval.attacks) {
      if (a.config.norm == Norm::kLinf) eps = std::max(eps, a.config.epsilon);
    }
    AttackConfig g;
    g.norm = Norm::kLinf;
    g.epsilon = eps;
    g.iterations = 20;
    g.step = eps > 0.0 ? 2.5 * eps / 20.0 : 0.01;
    g.restarts = 1;
    g.random_init = false;
    cfg.eval.geometry_attack = g;
  }
  cfg.echo = j;
  cfg.echo["seed"] = cfg.seed;
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  }
  return parse_config(j);
}

// Checks that everything the config references actually exists.
inline void validate_config(const ExperimentConfig& cfg) {
  if (cfg.dataset.kind == "idx") {
    for (const std::string& p :
         {cfg.dataset.train_images, cfg.dataset.train_labels,
          cfg.dataset.test_images, cfg.dataset.test_labels}) {
      if (!std::filesystem::exists(p)) {
        throw ConfigError("dataset file does not exist: " + p);
      }
    }
  }
  if (cfg.sweep.eps_present && cfg.sweep.eps_grid.empty()) {
    throw ConfigError("sweep.eps.grid must be non-empty");
  }
  if (cfg.sweep.iter_present && cfg.sweep.iter_grid.empty()) {
    throw ConfigError("sweep.iterations.grid must be non-empty");
  }
  if (cfg.sweep.restart_present && cfg.sweep.restart_grid.empty()) {
    throw ConfigError("sweep.restarts.grid must be non-empty");
  }
  cfg.train.validate();
}

inline Dataset build_dataset(const DatasetSection& ds, const std::string& split) {
  if (ds.kind == "blobs") {
    BlobSpec spec = ds.blobs;
    if (split == "test") {
      spec.samples_per_class = ds.test_samples_per_class;
      spec.seed = ds.test_seed;
    }
    return gen_blobs(spec, split);
  }
  Dataset data = split == "test"
                     ? load_idx(ds.test_images, ds.test_labels, split)
                     : load_idx(ds.train_images, ds.train_labels, split);
  const int cap = split == "test" ? ds.max_test_samples : ds.max_train_samples;
  if (cap > 0 && cap < data.size()) data = subset(data, cap);
  return data;
}

}  // namespace advdpnp
