#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "advdpnp/losses.hpp"
#include "advdpnp/model.hpp"
#include "advdpnp/rng.hpp"
#include "oracles.hpp"

namespace {

using namespace advdpnp;

constexpr double kCeHand = 0.3132616875182228;  // -log(e / (e + 1))

TEST(CeLoss, UniformRowGivesLogM) {
  Tensor row({4}, {0.25, 0.25, 0.25, 0.25});
  EXPECT_NEAR(ce_loss(row, 2), std::log(4.0), 1e-12);
}

TEST(CeLoss, CertainPredictionGivesZero) {
  Tensor row({3}, {0.0, 1.0, 0.0});
  EXPECT_DOUBLE_EQ(ce_loss(row, 1), 0.0);
}

TEST(CeLoss, HandValue) {
  const double e = std::exp(1.0);
  Tensor row({2}, {e / (e + 1.0), 1.0 / (e + 1.0)});
  EXPECT_NEAR(ce_loss(row, 0), kCeHand, 1e-12);
}

TEST(CeLoss, Errors) {
  Tensor row({2}, {0.0, 1.0});
  EXPECT_THROW(ce_loss(row, 0), NumericError);
  EXPECT_THROW(ce_loss(row, 5), ConfigError);
}

TEST(DppLoss, ZeroWeightEqualsCe) {
  PrototypeBank bank{Tensor({2, 2}, {1, 0, 0, 1}), 1.0};
  Tensor f({2}, {0.3, -0.2});
  Tensor batch({1, 2}, {0.3, -0.2});
  const double ce = ce_loss(class_probabilities(batch, bank).row_copy(0), 1);
  EXPECT_NEAR(dpp_loss(f, 1, bank, 0.0), ce, 1e-15);
}

TEST(DppLoss, FeatureAtPrototypeHasNoPull) {
  PrototypeBank bank{Tensor({2, 2}, {1, 0, 0, 1}), 1.0};
  Tensor f({2}, {1.0, 0.0});
  EXPECT_NEAR(dpp_loss(f, 0, bank, 0.1), kCeHand, 1e-12);
}

TEST(DppLoss, HandValueWithPull) {
  PrototypeBank bank{Tensor({2, 2}, {1, 0, 0, 1}), 1.0};
  Tensor f({2}, {0.0, 0.0});
  // CE = ln 2 (equal logits), pull = 0.05 * ||(0,0)-(1,0)||^2 = 0.05
  EXPECT_NEAR(dpp_loss(f, 0, bank, 0.1), std::log(2.0) + 0.05, 1e-12);
}

TEST(NearestNegatives, GeometryAndTieRule) {
  PrototypeBank bank{Tensor({3, 2}, {1, 0, 0, 1, -1, 0}), 1.0};
  const std::vector<int> neg = nearest_negatives(bank);
  EXPECT_EQ(neg[0], 1);  // sqrt(2) < 2
  EXPECT_EQ(neg[1], 0);  // tie between 0 and 2 at sqrt(2) -> smallest
  EXPECT_EQ(neg[2], 1);
}

TEST(NearestNegatives, MatchesExhaustiveScan) {
  Rng rng(61);
  for (int trial = 0; trial < 30; ++trial) {
    const int m = 2 + static_cast<int>(rng.uniform_int(7));
    const int d = 2 + static_cast<int>(rng.uniform_int(5));
    Tensor protos({m, d});
    for (std::int64_t i = 0; i < protos.numel(); ++i) protos[i] = rng.normal();
    PrototypeBank bank{protos, 1.0};
    const std::vector<int> neg = nearest_negatives(bank);
    for (int j = 0; j < m; ++j) {
      int best = -1;
      double best_dist = 1e300;
      for (int k = 0; k < m; ++k) {
        if (k == j) continue;
        double dist = 0.0;
        for (int t = 0; t < d; ++t) {
          const double diff = protos.at(k, t) - protos.at(j, t);
          dist += diff * diff;
        }
        dist = std::sqrt(dist);
        if (dist < best_dist) {
          best_dist = dist;
          best = k;
        }
      }
      EXPECT_EQ(neg[static_cast<std::size_t>(j)], best);
    }
  }
}

TEST(DnpLoss, HandValue) {
  PrototypeBank bank{Tensor({2, 2}, {1, 0, 0, 1}), 1.0};
  // diff per class is (1,-1): sum of sqrt = 2; loss = -(1/2)(2+2) = -2
  EXPECT_NEAR(dnp_loss(bank), -2.0, 1e-9);
}

TEST(DnpLoss, CoincidentPrototypesNearZero) {
  PrototypeBank bank{Tensor({2, 2}, {0.5, 0.5, 0.5, 0.5}), 1.0};
  EXPECT_NEAR(dnp_loss(bank), 0.0, 1e-5);
}

TEST(DnpLoss, MatchesStraightLineOracle) {
  Rng rng(67);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = 2 + static_cast<int>(rng.uniform_int(6));
    const int d = 2 + static_cast<int>(rng.uniform_int(4));
    Tensor protos({m, d});
    for (std::int64_t i = 0; i < protos.numel(); ++i) protos[i] = 3.0 * rng.normal();
    PrototypeBank bank{protos, 1.0};

    // independent scalar recomputation
    double expected = 0.0;
    for (int j = 0; j < m; ++j) {
      int best = -1;
      double best_sq = 1e300;
      for (int k = 0; k < m; ++k) {
        if (k == j) continue;
        double sq = 0.0;
        for (int t = 0; t < d; ++t) {
          const double diff = protos.at(k, t) - protos.at(j, t);
          sq += diff * diff;
        }
        if (sq < best_sq) {
          best_sq = sq;
          best = k;
        }
      }
      for (int t = 0; t < d; ++t) {
        expected += std::sqrt(std::abs(protos.at(j, t) - protos.at(best, t)) + 1e-12);
      }
    }
    expected = -expected / m;
    EXPECT_NEAR(dnp_loss(bank), expected, 1e-9);
  }
}

TEST(DfaLoss, IdenticalRowsGiveZero) {
  Tensor p({3}, {0.2, 0.5, 0.3});
  EXPECT_DOUBLE_EQ(dfa_loss(p, p), 0.0);
}

TEST(DfaLoss, HandKlValue) {
  Tensor p({2}, {0.5, 0.5});
  Tensor q({2}, {0.25, 0.75});
  // 0.5 ln 2 + 0.5 ln(2/3)
  EXPECT_NEAR(dfa_loss(p, q), 0.1438410362258904, 1e-12);
}

TEST(DfaLoss, NonNegativeOnRandomRows) {
  Rng rng(71);
  for (int trial = 0; trial < 200; ++trial) {
    const int m = 2 + static_cast<int>(rng.uniform_int(6));
    Tensor p({m}), q({m});
    double sp = 0.0, sq = 0.0;
    for (int j = 0; j < m; ++j) {
      p[j] = 0.01 + rng.uniform();
      q[j] = 0.01 + rng.uniform();
      sp += p[j];
      sq += q[j];
    }
    for (int j = 0; j < m; ++j) {
      p[j] /= sp;
      q[j] /= sq;
    }
    EXPECT_GE(dfa_loss(p, q), 0.0);
  }
}

TEST(DfaLoss, ZeroAdversarialEntryRejected) {
  Tensor p({2}, {0.5, 0.5});
  Tensor q({2}, {1.0, 0.0});
  EXPECT_THROW(dfa_loss(p, q), NumericError);
}

// ---- composite --------------------------------------------------------------

ModelParams toy_model(std::uint64_t seed) {
  return init_model({"mlp", {2}, {5}, 2}, 3, 4.0, seed);
}

Tensor random_batch(int n, Rng& rng) {
  Tensor t({n, 2});
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
  return t;
}

TEST(CompositeLoss, AllRegularizersOffIsMeanCe) {
  Rng rng(73);
  ModelParams params = toy_model(1);
  Tensor x = random_batch(4, rng);
  std::vector<int> labels{0, 1, 2, 0};
  LossWeights w{0.0, 0.0, 0.0, 4.0};
  LossBreakdown b = composite_loss(x, x, labels, params, w);
  double mean_ce = 0.0;
  Tensor probs = class_probabilities(extract_features(params, x), params.bank);
  for (int i = 0; i < 4; ++i) mean_ce += ce_loss(probs.row_copy(i), labels[static_cast<std::size_t>(i)]);
  mean_ce /= 4.0;
  EXPECT_NEAR(b.total, mean_ce, 1e-12);
}

TEST(CompositeLoss, IdenticalBranchesShareParts) {
  Rng rng(79);
  ModelParams params = toy_model(2);
  Tensor x = random_batch(5, rng);
  std::vector<int> labels{0, 1, 2, 1, 0};
  LossBreakdown b = composite_loss(x, x, labels, params, LossWeights{0.1, 0.1, 2.0, 4.0});
  EXPECT_NEAR(b.dfa, 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(b.ce_clean, b.ce_adv);
  EXPECT_DOUBLE_EQ(b.pull_clean, b.pull_adv);
}

TEST(CompositeLoss, MatchesSpreadsheetOracle) {
  Rng rng(83);
  ModelParams params = toy_model(3);
  Tensor x_clean({2, 2}, {0.4, -1.2, 0.9, 0.1});
  Tensor x_adv({2, 2}, {0.5, -1.1, 0.8, 0.2});
  std::vector<int> labels{1, 2};
  const LossWeights w{0.1, 0.1, 2.0, 4.0};
  LossBreakdown b = composite_loss(x_clean, x_adv, labels, params, w);
  const double expected = oracles::composite_value(params, x_clean, x_adv,
                                                   labels, 0.1, 0.1, 2.0);
  EXPECT_NEAR(b.total, expected, 1e-10);
}

TEST(CompositeLoss, BreakdownReassemblesTotal) {
  Rng rng(89);
  ModelParams params = toy_model(4);
  Tensor x = random_batch(6, rng);
  Tensor xa = random_batch(6, rng);
  std::vector<int> labels{0, 0, 1, 1, 2, 2};
  const LossWeights w{0.3, 0.2, 1.5, 4.0};
  LossBreakdown b = composite_loss(x, xa, labels, params, w);
  const double rebuilt =
      w.lambda_dnp * b.dnp +
      (b.ce_clean + b.pull_clean + b.ce_adv + b.pull_adv + w.lambda_dfa * b.dfa) / 2.0;
  EXPECT_NEAR(b.total, rebuilt, 1e-12);
}

TEST(CompositeLoss, AffineInEachLambda) {
  Rng rng(97);
  ModelParams params = toy_model(5);
  Tensor x = random_batch(3, rng);
  Tensor xa = random_batch(3, rng);
  std::vector<int> labels{0, 1, 2};

  auto total = [&](double dpp, double dnp, double dfa) {
    return composite_loss(x, xa, labels, params, LossWeights{dpp, dnp, dfa, 4.0}).total;
  };
  // total(lambda) along each axis is affine: f(2m) - f(m) == f(m) - f(0).
  for (int axis = 0; axis < 3; ++axis) {
    const double m = 0.7;
    auto at = [&](double v) {
      switch (axis) {
        case 0: return total(v, 0.1, 2.0);
        case 1: return total(0.1, v, 2.0);
        default: return total(0.1, 0.1, v);
      }
    };
    EXPECT_NEAR(at(2 * m) - at(m), at(m) - at(0.0), 1e-9);
  }
}

TEST(CompositeLoss, DnpMoreNegativeWhenPairMovedApart) {
  // Hold the pairing fixed; push the closest pair apart coordinate-wise.
  PrototypeBank bank{Tensor({3, 2}, {1.0, 0.0, 1.2, 0.1, -4.0, 0.0}), 1.0};
  const double before = dnp_loss(bank);
  PrototypeBank moved = bank;
  moved.prototypes.at(1, 0) = 1.6;  // pairing (0<->1) still nearest
  moved.prototypes.at(1, 1) = 0.5;
  ASSERT_EQ(nearest_negatives(bank), nearest_negatives(moved));
  EXPECT_LT(dnp_loss(moved), before);
}

TEST(CompositeLoss, TradesModeZeroesPrototypeTerms) {
  Rng rng(101);
  ModelParams params = toy_model(6);
  Tensor x = random_batch(4, rng);
  Tensor xa = random_batch(4, rng);
  std::vector<int> labels{0, 1, 2, 1};
  const LossWeights w{0.5, 0.7, 2.0, 4.0};
  CompositeOptions opts;
  opts.mode = TrainMode::kTradesLike;
  LossBreakdown b = composite_loss(x, xa, labels, params, w, opts);
  EXPECT_DOUBLE_EQ(b.pull_clean, 0.0);
  EXPECT_DOUBLE_EQ(b.pull_adv, 0.0);
  EXPECT_NEAR(b.total, (b.ce_clean + b.ce_adv + 2.0 * b.dfa) / 2.0, 1e-12);
}

TEST(CompositeLoss, AtBaselineIsMeanAdversarialCe) {
  Rng rng(103);
  ModelParams params = toy_model(7);
  Tensor x = random_batch(4, rng);
  Tensor xa = random_batch(4, rng);
  std::vector<int> labels{2, 1, 0, 1};
  CompositeOptions opts;
  opts.mode = TrainMode::kAtBaseline;
  LossBreakdown b = composite_loss(x, xa, labels, params, LossWeights{0.1, 0.1, 2.0, 4.0}, opts);
  EXPECT_DOUBLE_EQ(b.total, b.ce_adv);
  Tensor probs = class_probabilities(extract_features(params, xa), params.bank);
  double mean_ce = 0.0;
  for (int i = 0; i < 4; ++i) mean_ce += ce_loss(probs.row_copy(i), labels[static_cast<std::size_t>(i)]);
  EXPECT_NEAR(b.total, mean_ce / 4.0, 1e-12);
}

TEST(CompositeLoss, GradientMatchesFiniteDifferencesAwayFromKinks) {
  Rng rng(107);
  ModelParams params = toy_model(8);
  std::vector<int> labels{0, 1, 2};
  CompositeOptions opts;
  opts.lock_prototypes = false;
  CompositeGraph cg = build_composite(params.arch, 3, labels,
                                      LossWeights{0.1, 0.1, 2.0, 4.0}, opts,
                                      nearest_negatives(params.bank));
  NamedTensors point = composite_bindings(params, random_batch(3, rng),
                                          random_batch(3, rng));
  EXPECT_LE(grad_check(cg.graph, cg.total, point, 1e-5), 1e-4);
}

TEST(CompositeLoss, MisalignedBatchesRejected) {
  ModelParams params = toy_model(9);
  Tensor a({2, 2});
  Tensor b({3, 2});
  EXPECT_THROW(composite_loss(a, b, {0, 1}, params, LossWeights{}), ConfigError);
}

}  // namespace
