#include <cmath>
#include <filesystem>
#include <vector>

#include <gtest/gtest.h>

#include "advdpnp/checkpoint.hpp"
#include "advdpnp/model.hpp"
#include "advdpnp/rng.hpp"

namespace {

using namespace advdpnp;

const ArchitectureConfig kTinyArch{"mlp", {2}, {4}, 2};

TEST(InitModel, PrototypesOnSphere) {
  ModelParams params = init_model(kTinyArch, 10, 40.0, 123);
  for (int j = 0; j < 10; ++j) {
    EXPECT_NEAR(l2_norm(params.bank.prototypes.row(j), 2), 40.0, 1e-9);
  }
}

TEST(InitModel, DeterministicGivenSeed) {
  ModelParams a = init_model(kTinyArch, 4, 8.0, 77);
  ModelParams b = init_model(kTinyArch, 4, 8.0, 77);
  for (std::size_t i = 0; i < a.extractor.size(); ++i) {
    for (std::int64_t k = 0; k < a.extractor[i].second.numel(); ++k) {
      EXPECT_EQ(a.extractor[i].second[k], b.extractor[i].second[k]);
    }
  }
  for (std::int64_t k = 0; k < a.bank.prototypes.numel(); ++k) {
    EXPECT_EQ(a.bank.prototypes[k], b.bank.prototypes[k]);
  }
}

TEST(InitModel, PrototypeDirectionsAreIsotropic) {
  // Monte-Carlo: mean prototype vector over many seeds stays near the origin.
  const double alpha = 5.0;
  double mean_x = 0.0, mean_y = 0.0;
  const int seeds = 10000;
  for (int s = 0; s < seeds; ++s) {
    ModelParams p = init_model(kTinyArch, 10, alpha, static_cast<std::uint64_t>(s));
    for (int j = 0; j < 10; ++j) {
      mean_x += p.bank.prototypes.at(j, 0);
      mean_y += p.bank.prototypes.at(j, 1);
    }
  }
  mean_x /= seeds * 10;
  mean_y /= seeds * 10;
  EXPECT_LE(std::sqrt(mean_x * mean_x + mean_y * mean_y), 0.1 * alpha);
}

TEST(InitModel, RejectsDegenerateConfigs) {
  ArchitectureConfig bad = kTinyArch;
  bad.feature_dim = 1;
  EXPECT_THROW(init_model(bad, 3, 1.0, 0), ConfigError);
  EXPECT_THROW(init_model(kTinyArch, 1, 1.0, 0), ConfigError);
  EXPECT_THROW(init_model(kTinyArch, 3, 0.0, 0), ConfigError);
}

TEST(ExtractFeatures, IdentityNetworkPassesInputThrough) {
  ModelParams params = init_model(kTinyArch, 2, 1.0, 0);
  // hidden width 4: stack two copies of I2 vertically, then sum halves back.
  params.extractor_tensor("w0") =
      Tensor({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
  params.extractor_tensor("b0") = Tensor({4});
  params.extractor_tensor("w1") =
      Tensor({2, 4}, {0.5, 0, 0.5, 0, 0, 0.5, 0, 0.5});
  params.extractor_tensor("b1") = Tensor({2});
  Tensor batch({3, 2}, {1.0, 2.0, 0.25, 0.0, 5.0, 3.0});  // non-negative inputs
  Tensor f = extract_features(params, batch);
  for (std::int64_t i = 0; i < batch.numel(); ++i) {
    EXPECT_NEAR(f[i], batch[i], 1e-12);
  }
}

TEST(ExtractFeatures, ZeroInputZeroBiasGivesZeroFeatures) {
  ModelParams params = init_model(kTinyArch, 2, 1.0, 3);
  params.extractor_tensor("b0") = Tensor({4});
  params.extractor_tensor("b1") = Tensor({2});
  Tensor f = extract_features(params, Tensor({2, 2}));
  for (std::int64_t i = 0; i < f.numel(); ++i) EXPECT_DOUBLE_EQ(f[i], 0.0);
}

TEST(ExtractFeatures, ShapeMismatchRejected) {
  ModelParams params = init_model(kTinyArch, 2, 1.0, 3);
  EXPECT_THROW(extract_features(params, Tensor({2, 3})), ConfigError);
}

TEST(ClassProbabilities, OrthogonalFeatureGivesUniformRow) {
  PrototypeBank bank{Tensor({2, 3}, {1, 0, 0, 0, 1, 0}), 1.0};
  Tensor f({1, 3}, {0.0, 0.0, 5.0});
  Tensor p = class_probabilities(f, bank);
  EXPECT_NEAR(p.at(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(p.at(0, 1), 0.5, 1e-12);
}

TEST(ClassProbabilities, HandSoftmaxValues) {
  PrototypeBank bank{Tensor({2, 2}, {1, 0, 0, 1}), 1.0};
  Tensor f({1, 2}, {1.0, 0.0});
  Tensor p = class_probabilities(f, bank);
  const double e = std::exp(1.0);
  EXPECT_NEAR(p.at(0, 0), e / (e + 1.0), 1e-12);  // 0.7310585786300049
  EXPECT_NEAR(p.at(0, 1), 1.0 / (e + 1.0), 1e-12);
}

TEST(ClassProbabilities, JointScalingOfPrototypesAndRadiusIsInvariant) {
  Rng rng(5);
  Tensor protos({4, 3});
  for (std::int64_t i = 0; i < protos.numel(); ++i) protos[i] = rng.normal();
  PrototypeBank bank{protos, 2.0};
  bank = renormalize_prototypes(bank);
  Tensor f({2, 3});
  for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = rng.normal();

  const double k = 7.5;
  PrototypeBank scaled = bank;
  scaled.radius = k * bank.radius;
  scaled = renormalize_prototypes(scaled);  // same directions, radius k*alpha

  Tensor p1 = class_probabilities(f, bank);
  Tensor p2 = class_probabilities(f, scaled);
  for (std::int64_t i = 0; i < p1.numel(); ++i) EXPECT_NEAR(p1[i], p2[i], 1e-12);
}

TEST(ClassProbabilities, DoublingRadiusFlattensTowardUniform) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor protos({5, 4});
    for (std::int64_t i = 0; i < protos.numel(); ++i) protos[i] = rng.normal();
    PrototypeBank bank{protos, 3.0};
    bank = renormalize_prototypes(bank);
    PrototypeBank hot = bank;
    hot.radius = 6.0;  // prototypes unchanged, only the temperature moves
    Tensor f({1, 4});
    for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = 2.0 * rng.normal();
    Tensor p_cold = class_probabilities(f, bank);
    Tensor p_hot = class_probabilities(f, hot);
    double max_cold = 0.0, max_hot = 0.0;
    for (int j = 0; j < 5; ++j) {
      max_cold = std::max(max_cold, p_cold.at(0, j));
      max_hot = std::max(max_hot, p_hot.at(0, j));
    }
    EXPECT_LE(max_hot, max_cold + 1e-12);
  }
}

TEST(ClassProbabilities, ArgmaxMatchesRawInnerProducts) {
  Rng rng(15);
  Tensor protos({6, 3});
  for (std::int64_t i = 0; i < protos.numel(); ++i) protos[i] = rng.normal();
  PrototypeBank bank{protos, 4.0};
  Tensor f({8, 3});
  for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = rng.normal();
  const std::vector<int> by_probs = predict(class_probabilities(f, bank));
  for (int r = 0; r < 8; ++r) {
    int best = 0;
    double best_ip = dot(bank.prototypes.row(0), f.row(r), 3);
    for (int j = 1; j < 6; ++j) {
      const double ip = dot(bank.prototypes.row(j), f.row(r), 3);
      if (ip > best_ip) {
        best_ip = ip;
        best = j;
      }
    }
    EXPECT_EQ(by_probs[static_cast<std::size_t>(r)], best);
  }
}

TEST(ClassProbabilities, NonFiniteFeaturesRejected) {
  PrototypeBank bank{Tensor({2, 2}, {1, 0, 0, 1}), 1.0};
  Tensor f({1, 2}, {std::nan(""), 0.0});
  EXPECT_THROW(class_probabilities(f, bank), NumericError);
}

TEST(Predict, ArgmaxAndTieRule) {
  Tensor probs({3, 3}, {0.1, 0.7, 0.2,
                        0.5, 0.5, 0.0,
                        0.2, 0.3, 0.5});
  const std::vector<int> labels = predict(probs);
  EXPECT_EQ(labels[0], 1);
  EXPECT_EQ(labels[1], 0);  // exact tie -> smallest index
  EXPECT_EQ(labels[2], 2);
}

TEST(Renormalize, ScalesToRadius) {
  PrototypeBank bank{Tensor({1, 2}, {3.0, 4.0}), 40.0};
  PrototypeBank out = renormalize_prototypes(bank);
  EXPECT_DOUBLE_EQ(out.prototypes[0], 24.0);
  EXPECT_DOUBLE_EQ(out.prototypes[1], 32.0);
}

TEST(Renormalize, IdempotentAndExact) {
  Rng rng(25);
  Tensor protos({6, 4});
  for (std::int64_t i = 0; i < protos.numel(); ++i) protos[i] = rng.normal();
  PrototypeBank bank{protos, 7.0};
  PrototypeBank once = renormalize_prototypes(bank);
  for (int j = 0; j < 6; ++j) {
    EXPECT_NEAR(l2_norm(once.prototypes.row(j), 4), 7.0, 1e-9);
  }
  PrototypeBank twice = renormalize_prototypes(once);
  for (std::int64_t i = 0; i < once.prototypes.numel(); ++i) {
    EXPECT_NEAR(once.prototypes[i], twice.prototypes[i], 1e-12);
  }
}

TEST(Renormalize, ZeroNormPrototypeIsCollapse) {
  PrototypeBank bank{Tensor({2, 2}, {0.0, 0.0, 1.0, 1.0}), 1.0};
  EXPECT_THROW(renormalize_prototypes(bank), NumericError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto path = std::filesystem::temp_directory_path() / "advdpnp_ckpt_test.bin";
  ModelParams params = init_model({"mlp", {3}, {5, 4}, 2}, 4, 12.5, 999);
  save_checkpoint(path, params);
  ModelParams loaded = load_checkpoint(path);
  ASSERT_EQ(loaded.extractor.size(), params.extractor.size());
  for (std::size_t i = 0; i < params.extractor.size(); ++i) {
    EXPECT_EQ(loaded.extractor[i].first, params.extractor[i].first);
    for (std::int64_t k = 0; k < params.extractor[i].second.numel(); ++k) {
      EXPECT_EQ(loaded.extractor[i].second[k], params.extractor[i].second[k]);
    }
  }
  EXPECT_EQ(loaded.bank.radius, params.bank.radius);
  for (std::int64_t k = 0; k < params.bank.prototypes.numel(); ++k) {
    EXPECT_EQ(loaded.bank.prototypes[k], params.bank.prototypes[k]);
  }
  // Serialized twice -> identical bytes.
  EXPECT_EQ(serialize_checkpoint(params), serialize_checkpoint(loaded));
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto path = std::filesystem::temp_directory_path() / "advdpnp_bad_ckpt.bin";
  atomic_write_file(path, "NOPE----");
  EXPECT_THROW(load_checkpoint(path), ConfigError);
  ModelParams params = init_model(kTinyArch, 2, 1.0, 1);
  const std::string good = serialize_checkpoint(params);
  atomic_write_file(path, good.substr(0, good.size() - 9));  // truncated payload
  EXPECT_THROW(load_checkpoint(path), ConfigError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, SmallCnnLayoutRoundTrips) {
  ModelParams params = init_model({"small-cnn", {8, 8}, {4, 8}, 2}, 3, 6.0, 42);
  const auto path = std::filesystem::temp_directory_path() / "advdpnp_cnn_ckpt.bin";
  save_checkpoint(path, params);
  ModelParams loaded = load_checkpoint(path);
  EXPECT_EQ(serialize_checkpoint(params), serialize_checkpoint(loaded));
  std::filesystem::remove(path);
}

}  // namespace
