// Dual-branch training loop. Each step regenerates adversarial examples from
// the current parameters, evaluates the composite loss with the adversarial
// branch reading a barrier copy of the prototypes, and applies SGD with
// momentum: the extractor from the full loss gradient (with weight decay),
// the prototypes from the clean-branch paths only (no decay, they are
// renormalized at every epoch start).
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "advdpnp/attacks.hpp"
#include "advdpnp/data.hpp"
#include "advdpnp/losses.hpp"
#include "advdpnp/model.hpp"
#include "advdpnp/rng.hpp"

namespace advdpnp {

struct LrMilestone {
  int epoch = 0;
  double lr = 0.0;
};

struct LrSchedule {
  double initial = 0.1;
  std::vector<LrMilestone> milestones;  // ascending epochs
};

// Piecewise-constant step schedule.
inline double lr_at(const LrSchedule& schedule, int epoch) {
  double lr = schedule.initial;
  for (const auto& m : schedule.milestones) {
    if (epoch >= m.epoch) lr = m.lr;
  }
  return lr;
}

struct TrainConfig {
  int epochs = 110;
  int batch_size = 128;
  LrSchedule schedule;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  LossWeights weights;
  AttackConfig attack;
  TrainMode mode = TrainMode::kAdvDpnp;
  bool mask_clean_dpp = false;
  bool full_dfa_to_prototypes = false;
  bool augment = false;
  AugmentConfig augment_cfg;
  int checkpoint_interval = 0;  // epochs between checkpoints; 0 = final only
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (!(schedule.initial > 0.0)) throw ConfigError("learning rate must be positive");
    attack.validate();
  }

  CompositeOptions composite_options() const {
    return CompositeOptions{mode, mask_clean_dpp, full_dfa_to_prototypes};
  }
};

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;
  double clean_acc = 0.0;
  double adv_acc = 0.0;
};

struct TrainState {
  ModelParams params;
  std::vector<std::pair<std::string, Tensor>> momentum_extractor;
  Tensor momentum_prototypes;
  int epoch = 0;
  std::uint64_t step_count = 0;
  Rng rng_batching = Rng(0);
  Rng rng_attack = Rng(0);
  Rng rng_augment = Rng(0);
  std::vector<EpochStats> history;
};

struct StepStats {
  LossBreakdown loss;
  int clean_correct = 0;
  int adv_correct = 0;
  int batch = 0;
};

struct TrainHooks {
  // Called right after the epoch-start renormalization.
  std::function<void(const TrainState&)> after_renormalize;
  std::function<void(const TrainState&)> on_epoch_end;
};

// buffer' = momentum * buffer + grad + weight_decay * param
// param'  = param - lr * buffer'
inline void sgd_update(Tensor& param, const Tensor& grad, Tensor& buffer,
                       double lr, double momentum, double weight_decay) {
  if (!param.same_shape(grad) || !param.same_shape(buffer)) {
    throw ConfigError("sgd_update shape mismatch");
  }
  if (!grad.all_finite()) throw NumericError("non-finite gradient in sgd_update");
  for (std::int64_t i = 0; i < param.numel(); ++i) {
    buffer[i] = momentum * buffer[i] + grad[i] + weight_decay * param[i];
    param[i] -= lr * buffer[i];
  }
}

inline TrainState init_train_state(const TrainConfig& cfg,
                                   const ArchitectureConfig& arch,
                                   int classes) {
  cfg.validate();
  Rng root(cfg.seed);
  TrainState state;
  state.params = init_model(arch, classes, cfg.weights.alpha,
                            root.derive("init").seed());
  for (const auto& [name, tensor] : state.params.extractor) {
    state.momentum_extractor.emplace_back(name, Tensor(tensor.shape()));
  }
  state.momentum_prototypes = Tensor(state.params.bank.prototypes.shape());
  state.rng_batching = root.derive("batching");
  state.rng_attack = root.derive("attack");
  state.rng_augment = root.derive("augmentation");
  return state;
}

// One optimization step on a clean batch: generate the adversarial batch,
// evaluate the composite loss, update extractor and prototypes.
inline StepStats train_step(TrainState& state, const Tensor& batch_x,
                            const std::vector<int>& batch_y,
                            const TrainConfig& cfg) {
  if (batch_x.dim(0) != static_cast<int>(batch_y.size()) || batch_y.empty()) {
    throw ConfigError("train_step batch/label mismatch");
  }
  ModelParams& params = state.params;
  const std::vector<int> negatives = nearest_negatives(params.bank);

  const Rng attack_rng = state.rng_attack.derive(state.step_count);
  const Tensor batch_adv =
      pgd(params, batch_x, batch_y, cfg.attack, attack_rng, cfg.weights);

  CompositeGraph cg =
      build_composite(params.arch, params.bank.classes(), batch_y, cfg.weights,
                      cfg.composite_options(), negatives);
  Workspace ws = forward(cg.graph, composite_bindings(params, batch_x, batch_adv));
  NamedTensors grads = backward(cg.graph, cg.total, ws);

  const double lr = lr_at(cfg.schedule, state.epoch);
  for (std::size_t i = 0; i < params.extractor.size(); ++i) {
    auto& [name, tensor] = params.extractor[i];
    sgd_update(tensor, grads.at(name), state.momentum_extractor[i].second, lr,
               cfg.momentum, cfg.weight_decay);
  }
  // Prototypes carry no weight decay; they live on the alpha-sphere.
  sgd_update(params.bank.prototypes, grads.at(kPrototypesName),
             state.momentum_prototypes, lr, cfg.momentum, 0.0);

  StepStats stats;
  stats.loss = cg.breakdown(ws);
  stats.batch = batch_x.dim(0);
  const std::vector<int> pred_clean = predict(ws.value(cg.probs_clean));
  const std::vector<int> pred_adv = predict(ws.value(cg.probs_adv));
  for (std::size_t i = 0; i < batch_y.size(); ++i) {
    stats.clean_correct += pred_clean[i] == batch_y[i];
    stats.adv_correct += pred_adv[i] == batch_y[i];
  }
  ++state.step_count;
  return stats;
}

inline std::pair<ModelParams, std::vector<EpochStats>> train(
    const TrainConfig& config, const ArchitectureConfig& arch,
    const Dataset& dataset, const TrainHooks& hooks = {}) {
  config.validate();
  if (dataset.size() < 1) throw ConfigError("training dataset is empty");

  TrainConfig cfg = config;
  cfg.attack.box_low = dataset.box_low;
  cfg.attack.box_high = dataset.box_high;

  TrainState state = init_train_state(cfg, arch, dataset.num_classes);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    state.params.bank = renormalize_prototypes(state.params.bank);
    if (hooks.after_renormalize) hooks.after_renormalize(state);

    LossBreakdown sum;
    std::int64_t n_seen = 0, clean_correct = 0, adv_correct = 0;
    for (const std::vector<int>& idx : batches(dataset, cfg.batch_size,
                                               state.rng_batching)) {
      Tensor bx = gather_rows(dataset.inputs, idx);
      const std::vector<int> by = gather_labels(dataset.labels, idx);
      if (cfg.augment && dataset.image_shaped()) {
        bx = augment(bx, dataset.sample_shape[0], dataset.sample_shape[1],
                     cfg.augment_cfg, state.rng_augment);
      }
      const StepStats stats = train_step(state, bx, by, cfg);
      const double w = static_cast<double>(stats.batch);
      sum.ce_clean += w * stats.loss.ce_clean;
      sum.ce_adv += w * stats.loss.ce_adv;
      sum.pull_clean += w * stats.loss.pull_clean;
      sum.pull_adv += w * stats.loss.pull_adv;
      sum.dnp += w * stats.loss.dnp;
      sum.dfa += w * stats.loss.dfa;
      sum.total += w * stats.loss.total;
      n_seen += stats.batch;
      clean_correct += stats.clean_correct;
      adv_correct += stats.adv_correct;
    }

    EpochStats es;
    es.epoch = epoch;
    es.lr = lr_at(cfg.schedule, epoch);
    const double inv = 1.0 / static_cast<double>(n_seen);
    es.loss.ce_clean = sum.ce_clean * inv;
    es.loss.ce_adv = sum.ce_adv * inv;
    es.loss.pull_clean = sum.pull_clean * inv;
    es.loss.pull_adv = sum.pull_adv * inv;
    es.loss.dnp = sum.dnp * inv;
    es.loss.dfa = sum.dfa * inv;
    es.loss.total = sum.total * inv;
    es.clean_acc = static_cast<double>(clean_correct) * inv;
    es.adv_acc = static_cast<double>(adv_correct) * inv;
    state.history.push_back(es);
    if (hooks.on_epoch_end) hooks.on_epoch_end(state);
  }
  return {std::move(state.params), std::move(state.history)};
}

}  // namespace advdpnp
