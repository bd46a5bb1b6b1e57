#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "lift/probes.hpp"
#include "test_util.hpp"

using namespace lift;
using lift::testing::random_tensor;
using lift::testing::TempDir;

namespace {

Tensor ramp_frames(std::size_t T, const std::vector<float>& u) {
  Tensor x({T, u.size()});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < u.size(); ++d) x.at(t, d) = static_cast<float>(t + 1) * u[d];
  return x;
}

Tensor reversed(const Tensor& x) {
  Tensor r(x.shape());
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t d = 0; d < x.cols(); ++d) r.at(t, d) = x.at(x.rows() - 1 - t, d);
  return r;
}

ProbeData blobs(std::size_t n, double centre, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  ProbeData d;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    const double c = y ? centre : -centre;
    d.features.push_back({static_cast<float>(c + noise(rng)), static_cast<float>(c + noise(rng))});
    d.labels.push_back(y);
  }
  return d;
}

ProbeSpec quick(ProbeKind kind, std::size_t epochs = 200, double lr = 1e-2) {
  ProbeSpec s = ProbeSpec::chiral(kind);
  s.epochs = epochs;
  s.learning_rate = lr;
  return s;
}

/// Sequences of noise tokens with one marked token whose second coordinate
/// carries the label.
ProbeData planted_tokens(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const std::size_t L = 10, D = 6;
  ProbeData d;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(rng() % 2);
    Tensor t({L, D});
    for (auto& v : t.data()) v = static_cast<float>(n01(rng));
    for (std::size_t r = 0; r < L; ++r) t.at(r, 1) = static_cast<float>(3.0 * n01(rng));
    const std::size_t pos = rng() % L;
    t.at(pos, 0) = 6.0f;
    t.at(pos, 1) = y ? 2.0f : -2.0f;
    d.tokens.push_back(std::move(t));
    d.labels.push_back(y);
  }
  return d;
}

ProbeData mean_pooled(const ProbeData& tokens) {
  ProbeData d;
  d.labels = tokens.labels;
  for (const auto& t : tokens.tokens) d.features.push_back(pool_descriptor(t, PoolingSpec::mean()));
  return d;
}

LiftConfig tiny_config() {
  LiftConfig c;
  c.feature_dim = 6;
  c.latent_dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.frames = 5;
  return c;
}

}  // namespace

// ---------------------------------------------------------------- pooling

TEST(Pooling, ConstantSequence) {
  const Tensor x = Tensor::full({7, 4}, 1.5f);
  EXPECT_EQ(pool_descriptor(x, PoolingSpec::mean()), pool_descriptor(x, PoolingSpec::single_frame(3)));
  const auto tw = pool_descriptor(x, PoolingSpec::time_weighted());
  ASSERT_EQ(tw.size(), 8u);
  for (std::size_t d = 0; d < 4; ++d) {
    EXPECT_EQ(tw[d], 1.5f);
    EXPECT_EQ(tw[4 + d], 0.0f);
  }
}

TEST(Pooling, TwoFrameFullConcatEqualsBothFrames) {
  const Tensor x = random_tensor<float>({2, 5}, 3);
  EXPECT_EQ(pool_descriptor(x, PoolingSpec::full_concat()), pool_descriptor(x, PoolingSpec::k_frames({1, 2})));
  EXPECT_EQ(pool_descriptor(x, PoolingSpec::full_concat()).size(), 10u);
}

TEST(Pooling, RampDynamicHalfIsPositiveMultipleAndFlipsUnderReversal) {
  const std::vector<float> u{0.6f, -0.8f, 0.0f};
  for (std::size_t T : {2u, 3u, 8u, 16u}) {
    const Tensor x = ramp_frames(T, u);
    const auto fwd = pool_descriptor(x, PoolingSpec::time_weighted());
    const auto rev = pool_descriptor(reversed(x), PoolingSpec::time_weighted());
    // sum_t w_t * t with l1-normalized centered weights
    double c = 0.0, l1 = 0.0;
    for (std::size_t t = 1; t <= T; ++t) l1 += std::abs(t - (T + 1) / 2.0);
    for (std::size_t t = 1; t <= T; ++t) c += (t - (T + 1) / 2.0) / l1 * static_cast<double>(t);
    EXPECT_GT(c, 0.0);
    for (std::size_t d = 0; d < 3; ++d) {
      EXPECT_NEAR(fwd[3 + d], c * u[d], 1e-5);
      EXPECT_EQ(rev[3 + d], -fwd[3 + d]) << T;
    }
  }
}

TEST(Pooling, ReversalNegatesDynamicHalfOnRandomSequences) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Tensor x = random_tensor<float>({1 + seed % 12, 5}, seed);
    const auto fwd = pool_descriptor(x, PoolingSpec::time_weighted());
    const auto rev = pool_descriptor(reversed(x), PoolingSpec::time_weighted());
    for (std::size_t d = 0; d < 5; ++d) EXPECT_EQ(rev[5 + d], -fwd[5 + d]);
  }
}

TEST(Pooling, MeanIsPermutationInvariant) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor x = random_tensor<float>({9, 4}, seed);
    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor y(x.shape());
    for (std::size_t t = 0; t < 9; ++t)
      for (std::size_t d = 0; d < 4; ++d) y.at(t, d) = x.at(perm[t], d);
    const auto a = pool_descriptor(x, PoolingSpec::mean());
    const auto b = pool_descriptor(y, PoolingSpec::mean());
    for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(a[d], b[d], 1e-6);
  }
}

TEST(Pooling, DimensionsAndErrors) {
  const Tensor x = random_tensor<float>({16, 3}, 1);
  EXPECT_EQ(pool_descriptor(x, PoolingSpec::single_frame(16)).size(), 3u);
  EXPECT_EQ(pool_descriptor(x, PoolingSpec::k_frames({1, 4, 9})).size(), 9u);
  EXPECT_EQ(pool_descriptor(x, PoolingSpec::full_concat()).size(), 48u);
  EXPECT_THROW(pool_descriptor(x, PoolingSpec::single_frame(0)), ValidationError);
  EXPECT_THROW(pool_descriptor(x, PoolingSpec::single_frame(17)), ValidationError);
  EXPECT_THROW(pool_descriptor(x, PoolingSpec::k_frames({2, 20})), ValidationError);
  EXPECT_THROW(pool_descriptor(x, PoolingSpec::lift_descriptor()), ValidationError);
}

TEST(Pooling, EvenlySpacedFrames) {
  EXPECT_EQ(PoolingSpec::k_frames_evenly(16, 16).indices.size(), 16u);
  EXPECT_EQ(PoolingSpec::k_frames_evenly(16, 16).indices.front(), 1u);
  EXPECT_EQ(PoolingSpec::k_frames_evenly(16, 16).indices.back(), 16u);
  for (std::size_t k : {1u, 2u, 4u, 8u}) {
    const auto idx = PoolingSpec::k_frames_evenly(k, 16).indices;
    EXPECT_EQ(idx.size(), k);
    EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
    EXPECT_NO_THROW(PoolingSpec::k_frames(idx).validate(16));
  }
  EXPECT_THROW(PoolingSpec::k_frames_evenly(0, 16), ValidationError);
  EXPECT_THROW(PoolingSpec::k_frames_evenly(17, 16), ValidationError);
}

TEST(Pooling, ParseNames) {
  EXPECT_EQ(parse_pooling("mean", 16).kind, PoolingKind::mean);
  EXPECT_EQ(parse_pooling("lift", 16).kind, PoolingKind::lift_descriptor);
  EXPECT_EQ(parse_pooling("single:4", 16).name(), "single_frame(4)");
  EXPECT_EQ(parse_pooling("frames:1,5,9", 16).name(), "k_frame_concat(1,5,9)");
  EXPECT_EQ(parse_pooling("kframes:2", 16).indices.size(), 2u);
  EXPECT_THROW(parse_pooling("median", 16), ValidationError);
  EXPECT_THROW(parse_pooling("single:x", 16), ValidationError);
  EXPECT_THROW(parse_pooling("single:30", 16), ValidationError);
}

TEST(Pooling, LiftDescriptorMatchesEncoder) {
  const LiftConfig c = tiny_config();
  const auto ckpt = Checkpoint::from_params(init_params(c, 4));
  const LiftEncoder enc = LiftEncoder::from_checkpoint(ckpt);
  std::vector<Tensor> videos;
  for (std::uint64_t s = 0; s < 70; ++s) videos.push_back(random_tensor<float>({5 + s % 3, 6}, s));
  const auto serial = pool_descriptors(videos, PoolingSpec::lift_descriptor(), &enc, 1);
  const auto parallel = pool_descriptors(videos, PoolingSpec::lift_descriptor(), &enc, 4);
  EXPECT_EQ(serial, parallel);
  for (std::size_t i : {0u, 31u, 69u}) {
    const auto single = pool_descriptor(videos[i], PoolingSpec::lift_descriptor(), &enc);
    EXPECT_EQ(single.size(), 16u);
    EXPECT_EQ(single, serial[i]);
  }
}

TEST(Pooling, ParallelPlainPoolingMatchesSerial) {
  std::vector<Tensor> videos;
  for (std::uint64_t s = 0; s < 33; ++s) videos.push_back(random_tensor<float>({8, 3}, s));
  EXPECT_EQ(pool_descriptors(videos, PoolingSpec::time_weighted(), nullptr, 1),
            pool_descriptors(videos, PoolingSpec::time_weighted(), nullptr, 4));
}

TEST(Concat, Basics) {
  const std::vector<float> x{1, 2, 3};
  EXPECT_EQ(concat_descriptors(x, {}), x);
  EXPECT_EQ(concat_descriptors({}, x), x);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const std::vector<float> a(rng() % 9, 1.0f), b(rng() % 9, 2.0f);
    const auto c = concat_descriptors(a, b);
    ASSERT_EQ(c.size(), a.size() + b.size());
    EXPECT_TRUE(std::equal(a.begin(), a.end(), c.begin()));
    EXPECT_TRUE(std::equal(b.begin(), b.end(), c.begin() + static_cast<std::ptrdiff_t>(a.size())));
  }
}

// ---------------------------------------------------------------- probes

TEST(LinearProbe, SeparableBlobs) {
  const auto train = blobs(100, 5.0, 0.5, 1);
  const Probe p = train_linear_probe(train, ProbeSpec::chiral());
  EXPECT_EQ(p.accuracy(train), 1.0);
  EXPECT_EQ(p.accuracy(blobs(100, 5.0, 0.5, 2)), 1.0);
}

TEST(LinearProbe, RandomLabelsAreAtChance) {
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01;
    auto make = [&](std::size_t n) {
      ProbeData d;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<float> f(8);
        for (auto& v : f) v = static_cast<float>(n01(rng));
        d.features.push_back(f);
        d.labels.push_back(static_cast<int>(rng() % 2));
      }
      if (std::count(d.labels.begin(), d.labels.end(), 1) == 0) d.labels[0] = 1;
      return d;
    };
    const auto train = make(200), test = make(200);
    ProbeSpec s = ProbeSpec::chiral();
    s.seed = seed;
    total += train_linear_probe(train, s).accuracy(test);
  }
  EXPECT_NEAR(total / 20.0, 0.5, 0.1);
}

TEST(LinearProbe, DuplicatedColumnKeepsPredictions) {
  const auto train = blobs(100, 5.0, 0.5, 3);
  const auto test = blobs(60, 5.0, 0.5, 4);
  auto dup = [](ProbeData d) {
    for (auto& f : d.features) f.push_back(f[0]);
    return d;
  };
  const auto a = train_linear_probe(train, ProbeSpec::chiral()).predict(test);
  const auto b = train_linear_probe(dup(train), ProbeSpec::chiral()).predict(dup(test));
  EXPECT_EQ(a, b);
}

TEST(LinearProbe, SingleClassAndShapeErrors) {
  ProbeData d = blobs(10, 5.0, 0.5, 1);
  std::fill(d.labels.begin(), d.labels.end(), 1);
  EXPECT_THROW(train_linear_probe(d, ProbeSpec::chiral()), ValidationError);
  ProbeData ragged = blobs(10, 5.0, 0.5, 1);
  ragged.features[3].push_back(1.0f);
  EXPECT_THROW(train_linear_probe(ragged, ProbeSpec::chiral()), DimensionError);
  ProbeSpec bad = ProbeSpec::chiral();
  bad.epochs = 0;
  EXPECT_THROW(train_linear_probe(blobs(10, 5.0, 0.5, 1), bad), ConfigError);
}

TEST(LinearProbe, DeterministicGivenSeed) {
  const auto train = blobs(80, 1.0, 1.0, 5);
  const Probe a = train_linear_probe(train, ProbeSpec::chiral());
  const Probe b = train_linear_probe(train, ProbeSpec::chiral());
  ASSERT_EQ(a.params().size(), b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params()[i].vec(), b.params()[i].vec());
  EXPECT_EQ(a.logits(train).vec(), b.logits(train).vec());
}

TEST(LinearProbe, StandardizationUsesTrainOnly) {
  const auto train = blobs(50, 2.0, 1.0, 6);
  auto test = blobs(50, 2.0, 1.0, 7);
  const Probe p = train_linear_probe(train, ProbeSpec::chiral());
  double m0 = 0.0;
  for (const auto& f : train.features) m0 += f[0];
  EXPECT_NEAR(p.feature_mean()[0], m0 / 50.0, 1e-5);
  const auto before = p.predict(test);
  for (auto& f : test.features) f[0] += 100.0f;  // shifting test data must not touch the model
  EXPECT_NEAR(p.feature_mean()[0], m0 / 50.0, 1e-5);
  EXPECT_NE(before, p.predict(test));
}

TEST(LinearProbe, TiesResolveToLowestLabel) {
  ProbeData d;
  d.features = {{0.0f, 0.0f}, {1.0f, -1.0f}, {2.0f, 2.0f}};
  d.labels = {0, 1, 0};
  const Probe bin = Probe::from_params(ProbeSpec::chiral(), 2, 2, 0, {Tensor({2, 1}, {1.0f, 1.0f}), Tensor({1})});
  EXPECT_EQ(bin.predict(d), (std::vector<int>{0, 0, 1}));
  const Probe multi = Probe::from_params(ProbeSpec::chiral(), 3, 2, 0,
                                         {Tensor({2, 3}, {1, 1, 0, 0, 0, 0}), Tensor({3}, {0, 0, 0})});
  EXPECT_EQ(multi.predict(d), (std::vector<int>{0, 0, 0}));
  EXPECT_THROW(Probe::from_params(ProbeSpec::chiral(), 2, 2, 0, {}), ValidationError);
}

TEST(LinearProbe, MulticlassBlobs) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> noise(0.0, 0.3);
  const double cx[3] = {0, 4, -4}, cy[3] = {4, -2, -2};
  ProbeData d;
  for (int i = 0; i < 150; ++i) {
    const int y = i % 3;
    d.features.push_back({static_cast<float>(cx[y] + noise(rng)), static_cast<float>(cy[y] + noise(rng))});
    d.labels.push_back(y);
  }
  const Probe p = train_linear_probe(d, quick(ProbeKind::linear));
  EXPECT_EQ(p.classes(), 3u);
  EXPECT_EQ(p.logits(d).cols(), 3u);
  EXPECT_EQ(p.accuracy(d), 1.0);
}

TEST(MlpProbe, SolvesXor) {
  ProbeData d;
  const float pts[4][2] = {{-1, -1}, {1, 1}, {-1, 1}, {1, -1}};
  for (int i = 0; i < 4; ++i) {
    d.features.push_back({pts[i][0], pts[i][1]});
    d.labels.push_back(i < 2 ? 0 : 1);
  }
  EXPECT_EQ(train_mlp_probe(d, quick(ProbeKind::mlp)).accuracy(d), 1.0);
  EXPECT_LE(train_linear_probe(d, quick(ProbeKind::linear)).accuracy(d), 0.75);
}

TEST(MlpProbe, DegenerateConfigTrains) {
  ProbeSpec s = quick(ProbeKind::mlp, 20);
  s.hidden = 1;
  s.dropout = 0.0;
  const auto d = blobs(20, 3.0, 0.5, 1);
  const Probe p = train_mlp_probe(d, s);
  EXPECT_EQ(p.params()[0].shape(), (Shape{2, 1}));
  EXPECT_GE(p.accuracy(d), 0.0);
  s.dropout = 1.0;
  EXPECT_THROW(train_mlp_probe(d, s), ConfigError);
}

TEST(MlpProbe, InferenceIsDeterministic) {
  const auto d = blobs(40, 1.0, 1.0, 9);
  const Probe p = train_mlp_probe(d, quick(ProbeKind::mlp, 10));
  EXPECT_EQ(p.logits(d).vec(), p.logits(d).vec());
  const Probe q = train_mlp_probe(d, quick(ProbeKind::mlp, 10));
  EXPECT_EQ(p.logits(d).vec(), q.logits(d).vec());
}

TEST(AttentiveProbe, SingleTokenPoolsToThatToken) {
  ProbeData d;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01;
  for (int i = 0; i < 30; ++i) {
    Tensor t({1, 3});
    for (auto& v : t.data()) v = static_cast<float>(n01(rng));
    t.at(0, 0) += i % 2 ? 2.0f : -2.0f;
    d.tokens.push_back(t);
    d.labels.push_back(i % 2);
  }
  ProbeSpec s = quick(ProbeKind::attentive, 30);
  s.standardize = false;
  const Probe p = train_attentive_probe(d, s);
  const Tensor z = p.logits(d);
  const auto& w = p.params()[3];
  const auto& b = p.params()[4];
  for (std::size_t i = 0; i < d.size(); ++i) {
    double expect = b[0];
    for (std::size_t c = 0; c < 3; ++c) expect += w.at(c, 0) * d.tokens[i].at(0, c);
    EXPECT_NEAR(z.at(i, 0), expect, 1e-5);
  }
}

TEST(AttentiveProbe, PlantedTokenBeatsMeanPooling) {
  const auto train = planted_tokens(200, 1), test = planted_tokens(200, 2);
  ProbeSpec s = quick(ProbeKind::attentive, 200, 2e-2);
  const double att = train_attentive_probe(train, s).accuracy(test);
  const double lin = train_linear_probe(mean_pooled(train), ProbeSpec::chiral()).accuracy(mean_pooled(test));
  EXPECT_GT(att, lin);
  EXPECT_GT(att, 0.9);
}

TEST(AttentiveProbe, TokenPermutationInvariance) {
  const auto train = planted_tokens(60, 3);
  const Probe p = train_attentive_probe(train, quick(ProbeKind::attentive, 20));
  ProbeData shuffled = train;
  std::mt19937_64 rng(4);
  for (auto& t : shuffled.tokens) {
    std::vector<std::size_t> perm(t.rows());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor u(t.shape());
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t c = 0; c < t.cols(); ++c) u.at(r, c) = t.at(perm[r], c);
    t = u;
  }
  const Tensor a = p.logits(train), b = p.logits(shuffled);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-4);
}

TEST(AttentiveProbe, VariableLengthsAndAuxiliaryVector) {
  auto d = planted_tokens(40, 5);
  d.tokens[3] = Tensor({2, 6});
  for (std::size_t i = 0; i < d.size(); ++i) d.features.push_back({static_cast<float>(d.labels[i]), 0.5f});
  const Probe p = train_attentive_probe(d, quick(ProbeKind::attentive, 200));
  EXPECT_EQ(p.params()[3].dim(0), 8u);
  EXPECT_EQ(p.accuracy(d), 1.0);
  d.tokens[0] = Tensor({0, 6});
  EXPECT_THROW(train_attentive_probe(d, quick(ProbeKind::attentive, 5)), ValidationError);
}

TEST(ConcatProbe, InformativePlusNoiseIsNoWorseThanNoise) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01;
  auto make = [&](std::size_t n, bool with_signal) {
    ProbeData d;
    for (std::size_t i = 0; i < n; ++i) {
      const int y = static_cast<int>(i % 2);
      std::vector<float> noise(16);
      for (auto& v : noise) v = static_cast<float>(n01(rng));
      const std::vector<float> informative{static_cast<float>((y ? 1.5 : -1.5) + n01(rng))};
      d.features.push_back(with_signal ? concat_descriptors(informative, noise) : noise);
      d.labels.push_back(y);
    }
    return d;
  };
  const auto tr = make(200, true), te = make(200, true);
  ProbeData tr_noise = tr, te_noise = te;
  for (auto& f : tr_noise.features) f.erase(f.begin());
  for (auto& f : te_noise.features) f.erase(f.begin());
  const double both = train_linear_probe(tr, ProbeSpec::chiral()).accuracy(te);
  const double noise = train_linear_probe(tr_noise, ProbeSpec::chiral()).accuracy(te_noise);
  EXPECT_GE(both, noise - 0.02);
}

// ---------------------------------------------------------------- tables and reports

TEST(DescriptorTable, BinaryRoundTripIsBitwise) {
  TempDir dir("desc");
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    DescriptorTable t;
    const std::size_t dim = rng() % 7, n = rng() % 20;
    for (std::size_t i = 0; i < n; ++i) {
      t.add("vid_" + std::to_string(i) + std::string(rng() % 4, 'x'),
            random_tensor<float>({dim}, rng()).vec());
    }
    save_descriptor_table(t, dir / "d.lds");
    const auto back = load_descriptor_table(dir / "d.lds");
    EXPECT_EQ(back.ids, t.ids);
    EXPECT_EQ(back.rows, t.rows);
    if (n > 0) {
      EXPECT_EQ(back.at(t.ids.back()), t.rows.back());
    }
  }
}

TEST(DescriptorTable, Errors) {
  TempDir dir("desc_err");
  DescriptorTable t;
  t.add("a", {1.0f, 2.0f});
  EXPECT_THROW(t.add("a", {1.0f, 2.0f}), ValidationError);
  EXPECT_THROW(t.add("b", {1.0f}), DimensionError);
  EXPECT_THROW(t.at("zzz"), ValidationError);
  save_descriptor_table(t, dir / "d.lds");
  std::string bytes = read_file_bytes(dir / "d.lds");
  write_file_bytes(dir / "short.lds", bytes.substr(0, bytes.size() - 1));
  EXPECT_THROW(load_descriptor_table(dir / "short.lds"), FormatError);
  bytes[0] = 'X';
  write_file_bytes(dir / "magic.lds", bytes);
  try {
    load_descriptor_table(dir / "magic.lds");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  EXPECT_THROW(load_descriptor_table(dir / "missing.lds"), IoError);
}

TEST(DescriptorTable, CsvLayout) {
  DescriptorTable t;
  t.add("a", {0.1f, -2.0f});
  t.add("b", {3.0f, 1e-8f});
  EXPECT_EQ(descriptor_table_csv(t), "video_id,f0,f1\na,0.100000001,-2\nb,3,9.99999994e-09\n");
}

namespace {

struct ToySuite {
  std::vector<ChiralGroup> groups;
  DescriptorTable table;
};

ToySuite toy_suite(std::size_t n_groups, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  ToySuite s;
  std::size_t id = 0;
  for (std::size_t g = 0; g < n_groups; ++g) {
    ChiralGroup grp{"p" + std::to_string(g), "n" + std::to_string(g), "all", {}, {}};
    for (std::size_t i = 0; i < 125; ++i) {
      const int y = static_cast<int>(i % 2);
      const std::string vid = "v" + std::to_string(id++);
      std::vector<float> f(4);
      for (auto& v : f) v = static_cast<float>(n01(rng));
      f[g % 4] += y ? 2.0f : -2.0f;
      s.table.add(vid, f);
      (i < 100 ? grp.train : grp.test).push_back({vid, y, i < 100 ? Split::train : Split::test});
    }
    s.groups.push_back(std::move(grp));
  }
  return s;
}

}  // namespace

TEST(EvaluateChiral, ReportAndMacroAverage) {
  const auto suite = toy_suite(5, 1);
  const auto report = evaluate_chiral(suite.groups, suite.table, ProbeSpec::chiral(), 1, "mean");
  ASSERT_EQ(report.groups.size(), 5u);
  double sum = 0.0;
  for (const auto& g : report.groups) {
    EXPECT_FALSE(g.skipped);
    EXPECT_GE(g.accuracy, 0.0);
    EXPECT_LE(g.accuracy, 1.0);
    EXPECT_EQ(g.n_train, 100u);
    EXPECT_EQ(g.n_test, 25u);
    sum += g.accuracy;
  }
  EXPECT_DOUBLE_EQ(report.macro_accuracy, sum / 5.0);
  EXPECT_GT(report.macro_accuracy, 0.7);
  const auto j = report.to_json();
  EXPECT_EQ(j.at("reference"), "SSv2 chiral 86.6, dim 768");
  EXPECT_EQ(j.at("descriptor_dim"), 4);
  EXPECT_EQ(j.at("probe").at("epochs"), 200);
  const std::string csv = report.to_csv();
  EXPECT_EQ(csv.rfind("group,n_train,n_test,accuracy\np0|n0|all,100,25,", 0), 0u);
  EXPECT_NE(csv.find("\nmacro,500,125,"), std::string::npos);
}

TEST(EvaluateChiral, ParallelEqualsSerial) {
  const auto suite = toy_suite(6, 2);
  const auto a = evaluate_chiral(suite.groups, suite.table, ProbeSpec::chiral(), 1);
  const auto b = evaluate_chiral(suite.groups, suite.table, ProbeSpec::chiral(), 4);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  EXPECT_EQ(a.to_csv(), b.to_csv());
}

TEST(EvaluateChiral, FailuresBecomeSkippedEntries) {
  auto suite = toy_suite(3, 3);
  for (auto& v : suite.groups[1].train) v.label = 0;
  suite.groups[2].test.clear();
  suite.groups[0].train.push_back({"unknown", 1, Split::train});
  const auto r = evaluate_chiral(suite.groups, suite.table, ProbeSpec::chiral());
  for (const auto& g : r.groups) {
    EXPECT_TRUE(g.skipped);
    EXPECT_FALSE(g.reason.empty());
  }
  EXPECT_EQ(r.macro_accuracy, 0.0);
  EXPECT_NE(r.to_csv().find(",skipped\n"), std::string::npos);
}

TEST(ProbeSpec, RecipesAndJson) {
  const auto c = ProbeSpec::chiral();
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.epochs, 200u);
  EXPECT_EQ(c.weight_decay, 1e-4);
  EXPECT_EQ(c.batch_size, 0u);
  EXPECT_TRUE(c.standardize);
  const auto s = ProbeSpec::standard(ProbeKind::mlp);
  EXPECT_EQ(s.learning_rate, 1e-5);
  EXPECT_EQ(s.epochs, 100u);
  EXPECT_TRUE(s.plateau);
  EXPECT_EQ(s.hidden, 512u);
  EXPECT_EQ(s.dropout, 0.1);
  const ProbeSpec back = nlohmann::json(s).get<ProbeSpec>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(s));
  EXPECT_THROW(parse_probe_kind("svm"), ValidationError);
}

TEST(ProbeSpec, MiniBatchWithPlateauTrains) {
  ProbeSpec s = ProbeSpec::standard();
  s.learning_rate = 1e-2;
  s.batch_size = 16;
  s.epochs = 30;
  const auto d = blobs(100, 3.0, 0.5, 1);
  EXPECT_EQ(train_linear_probe(d, s).accuracy(d), 1.0);
}
