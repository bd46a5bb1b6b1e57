#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lift/grad_check.hpp"
#include "lift/training.hpp"
#include "test_util.hpp"

using namespace lift;
using lift::testing::random_tensor;
using lift::testing::TempDir;

namespace {

// Smooth curved trajectories: x_t = tanh(A (c + (t/T) u)).
std::vector<Tensor> curved_videos(std::size_t n, std::size_t T, std::size_t D, std::uint64_t seed) {
  const std::size_t m = 4;
  const auto A = random_tensor(Shape{D, m}, seed, 0.7);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> c(m), u(m);
    for (auto& v : c) v = normal(rng);
    for (auto& v : u) v = normal(rng);
    Tensor x(Shape{T, D});
    for (std::size_t t = 1; t <= T; ++t) {
      for (std::size_t k = 0; k < D; ++k) {
        double acc = 0;
        for (std::size_t j = 0; j < m; ++j) acc += A.at(k, j) * (c[j] + static_cast<double>(t) / T * u[j]);
        x.at(t - 1, k) = static_cast<float>(std::tanh(acc));
      }
    }
    out.push_back(std::move(x));
  }
  return out;
}

LiftConfig toy_config(std::size_t D, std::size_t d, std::size_t T) {
  LiftConfig c;
  c.feature_dim = D;
  c.latent_dim = d;
  c.layers = 2;
  c.heads = 2;
  c.frames = T;
  return c;
}

}  // namespace

TEST(LiftLoss, PerfectReconstructionWithOrthogonalTokens) {
  const auto x = random_tensor<float>(Shape{4, 3}, 1);
  Descriptor desc{Tensor(Shape{2}, {1, 0}), Tensor(Shape{2}, {0, 2})};
  const auto l = lift_loss(x, x, desc, 0.1);
  EXPECT_EQ(l.total, 0.0);
  EXPECT_EQ(l.rec, 0.0);
  EXPECT_EQ(l.orth, 0.0);
}

TEST(LiftLoss, UnitPerturbationOnOneFrame) {
  const auto x = random_tensor<float>(Shape{4, 3}, 2);
  Tensor xh = x;
  xh.at(2, 1) += 1.0f;
  Descriptor desc{Tensor(Shape{2}, {1, 0}), Tensor(Shape{2}, {0, 1})};
  EXPECT_NEAR(lift_loss(x, xh, desc, 0.1).rec, 1.0, 1e-6);
}

TEST(LiftLoss, ParallelTokensGiveOneRegardlessOfNorm) {
  const Tensor x(Shape{1, 1});
  Descriptor same{Tensor(Shape{3}, {1, 2, 3}), Tensor(Shape{3}, {1, 2, 3})};
  EXPECT_NEAR(lift_loss(x, x, same, 1.0).orth, 1.0, 1e-12);
  Descriptor scaled{Tensor(Shape{3}, {1, 2, 3}), Tensor(Shape{3}, {30, 60, 90})};
  EXPECT_NEAR(lift_loss(x, x, scaled, 1.0).orth, 1.0, 1e-12);
  Descriptor zero{Tensor(Shape{3}, {1, 2, 3}), Tensor(Shape{3})};
  EXPECT_EQ(lift_loss(x, x, zero, 1.0).orth, 0.0);
}

TEST(LiftLoss, LambdaZeroTotalEqualsReconstruction) {
  const auto x = random_tensor<float>(Shape{4, 3}, 3);
  const auto xh = random_tensor<float>(Shape{4, 3}, 4);
  Descriptor desc{random_tensor<float>(Shape{5}, 5), random_tensor<float>(Shape{5}, 6)};
  const auto l = lift_loss(x, xh, desc, 0.0);
  EXPECT_EQ(l.total, l.rec);
  EXPECT_GT(l.orth, 0.0);
}

TEST(LiftLoss, GraphMatchesValueLoss) {
  const auto c = toy_config(12, 8, 4);
  const auto p = init_params(c, 7);
  const auto x = random_tensor<float>(Shape{4, 12}, 8);
  const auto rec = forward_reconstruct(p, x);
  const auto expected = lift_loss(x, rec.frames, rec.descriptor, c.lambda_orth);
  Tape<float> tape;
  std::vector<Var> vars;
  for (const auto& t : p.tensors) vars.push_back(tape.constant(t));
  const auto g = lift_loss_graph(tape, c, vars, tape.constant(x), 1, 4);
  EXPECT_NEAR(tape.value(g.total)[0], expected.total, 1e-4 * expected.total);
  EXPECT_NEAR(tape.value(g.orth)[0], expected.orth, 1e-5);
}

TEST(LiftLoss, FullObjectiveGradientOnToyBatch) {
  const auto c = toy_config(12, 8, 4);
  std::vector<Tensor64> inputs;
  std::uint64_t seed = 100;
  for (const auto& spec : param_layout(c)) inputs.push_back(random_tensor(spec.shape, seed++, 0.5));
  const auto frames = random_tensor(Shape{2 * 4, 12}, 9);
  auto f = [&](Tape<double>& tape, std::span<const Var> vars) {
    return lift_loss_graph(tape, c, vars, tape.constant(frames), 2, 4).total;
  };
  EXPECT_LT(grad_check(f, inputs, 1e-3), 1e-4);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<Tensor> w{Tensor(Shape{1}, {1.0f})};
  AdamState state;
  adam_step(w, {Tensor(Shape{1}, {2.0f})}, state, 0.1);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  EXPECT_NEAR(w[0][0], 0.9, 1e-6);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  const auto init = random_tensor<float>(Shape{3, 4}, 10);
  std::vector<Tensor> w{init};
  AdamState state;
  for (int i = 0; i < 3; ++i) adam_step(w, {Tensor(Shape{3, 4})}, state, 0.1);
  EXPECT_TRUE(bit_equal(w[0], init));
}

TEST(Adam, DeterministicAndRejectsNonFinite) {
  auto run = [] {
    std::vector<Tensor> w{random_tensor<float>(Shape{5}, 11)};
    AdamState state;
    for (std::uint64_t s = 0; s < 20; ++s) adam_step(w, {random_tensor<float>(Shape{5}, 200 + s)}, state, 0.01);
    return w[0];
  };
  EXPECT_TRUE(bit_equal(run(), run()));

  std::vector<Tensor> w{Tensor(Shape{2})};
  AdamState state;
  const std::vector<std::string> names{"encoder.0.attn.query.weight"};
  try {
    adam_step(w, {Tensor(Shape{2}, {1.0f, NAN})}, state, 0.1, {}, &names);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.0.attn.query.weight"), std::string::npos);
  }
}

TEST(Plateau, DecreasingLossKeepsRate) {
  PlateauScheduler s(1e-3, {0.5, 2, 1e-6, 1e-4});
  for (int e = 0; e < 50; ++e) EXPECT_EQ(s.step(100.0 - e), 1e-3);
}

TEST(Plateau, ConstantLossHalvesEveryPatienceEpochs) {
  PlateauScheduler s(1.0, {0.5, 2, 1e-6, 1e-4});
  // Rate in effect after feeding epochs 1..8.
  const std::vector<double> expected{1.0, 1.0, 0.5, 0.5, 0.25, 0.25, 0.125, 0.125};
  for (std::size_t e = 0; e < expected.size(); ++e) EXPECT_EQ(s.step(3.0), expected[e]) << "epoch " << e + 1;
}

TEST(Plateau, ImprovementAtLastPatienceEpochResets) {
  PlateauScheduler s(1.0, {0.5, 2, 1e-6, 1e-4});
  s.step(3.0);
  s.step(3.0);
  EXPECT_EQ(s.step(2.0), 1.0);
  EXPECT_EQ(s.step(2.0), 1.0);
  EXPECT_EQ(s.step(2.0), 0.5);
}

TEST(Plateau, SubThresholdImprovementCountsAsPlateau) {
  PlateauScheduler s(1.0, {0.5, 2, 1e-6, 1e-4});
  s.step(1.0);
  s.step(0.99999);
  EXPECT_EQ(s.step(0.99998), 0.5);
}

TEST(Plateau, FloorAtMinimumRate) {
  PlateauScheduler s(1e-5, {0.1, 1, 1e-6, 1e-4});
  for (int e = 0; e < 10; ++e) s.step(1.0);
  EXPECT_EQ(s.lr(), 1e-6);
}

TEST(TrainConfig, DefaultsAndValidation) {
  TrainConfig c;
  EXPECT_EQ(c.epochs, 500u);
  EXPECT_EQ(c.batch_size, 128u);
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.scheduler.factor, 0.5);
  EXPECT_EQ(c.scheduler.patience, 10u);
  EXPECT_EQ(c.scheduler.min_lr, 1e-6);
  EXPECT_FALSE(c.standardize);
  EXPECT_NO_THROW(c.validate());
  c.scheduler.factor = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.data_fraction = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  const nlohmann::json j = TrainConfig{};
  EXPECT_EQ(nlohmann::json(j.get<TrainConfig>()), j);
}

TEST(Train, ReconstructionLossDropsOnSyntheticVideos) {
  const auto videos = curved_videos(32, 8, 12, 21);
  const auto lc = toy_config(12, 16, 8);
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 8;
  tc.seed = 3;
  const auto result = train_videos(videos, lc, tc);
  ASSERT_EQ(result.log.epochs.size(), 30u);
  EXPECT_LT(result.log.epochs.back().l_rec, 0.2 * result.log.epochs.front().l_rec);
  EXPECT_EQ(result.checkpoint.meta.epoch, 30u);
  EXPECT_EQ(result.log.to_csv().substr(0, 22), "epoch,l_rec,l_orth,lr\n");
}

TEST(Train, SameSeedIsBitwiseReproducible) {
  const auto videos = curved_videos(12, 4, 6, 31);
  const auto lc = toy_config(6, 8, 4);
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 5;
  tc.seed = 4;
  tc.standardize = true;
  const auto a = train_videos(videos, lc, tc);
  const auto b = train_videos(videos, lc, tc);
  ASSERT_EQ(a.log.epochs.size(), b.log.epochs.size());
  for (std::size_t e = 0; e < a.log.epochs.size(); ++e) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a.log.epochs[e].l_rec), std::bit_cast<std::uint64_t>(b.log.epochs[e].l_rec));
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a.log.epochs[e].l_orth),
              std::bit_cast<std::uint64_t>(b.log.epochs[e].l_orth));
  }
  for (std::size_t k = 0; k < a.checkpoint.tensors.size(); ++k)
    EXPECT_TRUE(bit_equal(a.checkpoint.tensors[k].value, b.checkpoint.tensors[k].value));
  EXPECT_EQ(a.checkpoint.meta, b.checkpoint.meta);
  EXPECT_EQ(a.checkpoint.meta.input_mean.size(), 6u);
}

TEST(Train, DataFractionUsesSubset) {
  const auto videos = curved_videos(20, 4, 6, 41);
  const auto lc = toy_config(6, 8, 4);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.data_fraction = 0.5;
  const auto half = train_videos(videos, lc, tc);
  tc.data_fraction = 1.0;
  const auto full = train_videos(videos, lc, tc);
  EXPECT_NE(half.log.epochs[0].l_rec, full.log.epochs[0].l_rec);
}

TEST(Train, RejectsBadInputs) {
  const auto lc = toy_config(6, 8, 4);
  EXPECT_THROW(train_videos({}, lc, TrainConfig{}), ValidationError);
  EXPECT_THROW(train_videos({Tensor(Shape{4, 5})}, lc, TrainConfig{}), DimensionError);
  EXPECT_THROW(train(Manifest{}, lc, TrainConfig{}), ValidationError);

  TempDir dir("tr");
  write_feature_file(Tensor(Shape{4, 5}), dir / "v.lft");
  const Manifest m({{"v", "v.lft", 4, 5, "", "", Split::train}}, dir.path());
  EXPECT_THROW(train(m, lc, TrainConfig{}), DimensionError);
}

TEST(Standardization, FitOnTrainAndApply) {
  const std::vector<Tensor> videos{Tensor(Shape{2, 2}, {1, 5, 3, 5}), Tensor(Shape{1, 2}, {2, 5})};
  const auto [mean, sd] = fit_standardization(videos);
  EXPECT_FLOAT_EQ(mean[0], 2.0f);
  EXPECT_FLOAT_EQ(mean[1], 5.0f);
  EXPECT_FLOAT_EQ(sd[0], std::sqrt(2.0f / 3.0f));
  EXPECT_EQ(sd[1], 1.0f);
  CheckpointMeta meta;
  meta.input_mean = mean;
  meta.input_std = sd;
  const auto z = apply_standardization(videos[0], meta);
  EXPECT_FLOAT_EQ(z.at(0, 0), -1.0f / sd[0]);
  EXPECT_EQ(z.at(1, 1), 0.0f);
}
