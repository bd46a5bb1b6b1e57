#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "lift/grad_check.hpp"
#include "lift/ops.hpp"
#include "test_util.hpp"

using namespace lift;
using lift::testing::random_tensor;

namespace {

Tensor64 t2(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor64(Shape{r, c}, std::move(v)); }

// Weights for one attention layer, in AttentionWeights order.
std::vector<Tensor64> attention_weights(std::size_t d, std::uint64_t seed) {
  std::vector<Tensor64> w;
  for (int i = 0; i < 4; ++i) {
    w.push_back(random_tensor(Shape{d, d}, seed + 10 * i, 0.5));
    w.push_back(random_tensor(Shape{d}, seed + 10 * i + 1, 0.1));
  }
  return w;
}

AttentionWeights bind_attention(std::span<const Var> v) { return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]}; }

// Straight-line multi-head self-attention with explicit loops.
std::vector<std::vector<double>> brute_force_mha(const Tensor64& x, const std::vector<Tensor64>& w,
                                                 std::size_t heads) {
  const std::size_t s = x.dim(0), d = x.dim(1), hd = d / heads;
  auto project = [&](const Tensor64& W, const Tensor64& b) {
    std::vector<std::vector<double>> out(s, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t o = 0; o < d; ++o) {
        double acc = b[o];
        for (std::size_t k = 0; k < d; ++k) acc += x.at(i, k) * W.at(k, o);
        out[i][o] = acc;
      }
    return out;
  };
  const auto q = project(w[0], w[1]);
  const auto k = project(w[2], w[3]);
  const auto v = project(w[4], w[5]);
  std::vector<std::vector<double>> concat(s, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < s; ++i) {
      std::vector<double> score(s);
      double mx = -1e300;
      for (std::size_t j = 0; j < s; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < hd; ++c) dot += q[i][h * hd + c] * k[j][h * hd + c];
        score[j] = dot / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, score[j]);
      }
      double z = 0;
      for (auto& sc : score) {
        sc = std::exp(sc - mx);
        z += sc;
      }
      for (std::size_t j = 0; j < s; ++j)
        for (std::size_t c = 0; c < hd; ++c) concat[i][h * hd + c] += score[j] / z * v[j][h * hd + c];
    }
  }
  std::vector<std::vector<double>> out(s, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t o = 0; o < d; ++o) {
      double acc = w[7][o];
      for (std::size_t c = 0; c < d; ++c) acc += concat[i][c] * w[6].at(c, o);
      out[i][o] = acc;
    }
  return out;
}

}  // namespace

TEST(Matmul, IdentityAndDotProduct) {
  Tape<double> tape;
  auto eye = tape.constant(t2(2, 2, {1, 0, 0, 1}));
  auto m = tape.constant(t2(2, 2, {3, 4, 5, 6}));
  EXPECT_EQ(tape.value(matmul(tape, eye, m)).vec(), (std::vector<double>{3, 4, 5, 6}));
  auto row = tape.constant(t2(1, 2, {1, 2}));
  auto col = tape.constant(t2(2, 1, {3, 4}));
  EXPECT_EQ(tape.value(matmul(tape, row, col)).vec(), std::vector<double>{11});
}

TEST(Matmul, ShapeMismatchIsDescriptive) {
  Tape<double> tape;
  auto a = tape.constant(Tensor64(Shape{2, 3}));
  auto b = tape.constant(Tensor64(Shape{2, 3}));
  try {
    matmul(tape, a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumIsRowSumsOfRightOperand) {
  const auto a = random_tensor(Shape{5, 7}, 1);
  const auto b = random_tensor(Shape{7, 3}, 2);
  auto f = [&b](Tape<double>& t, Var x) { return sum(t, matmul(t, x, t.constant(b))); };
  EXPECT_LT(grad_check(f, a, 1e-3), 1e-4);

  Tape<double> tape;
  auto x = tape.param(a);
  tape.backward(sum(tape, matmul(tape, x, tape.constant(b))));
  const auto g = tape.grad(x);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 7; ++k) {
      const double expected = b.at(k, 0) + b.at(k, 1) + b.at(k, 2);
      EXPECT_NEAR(g.at(i, k), expected, 1e-12);
    }
}

TEST(Matmul, AssociativeInFloat) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = random_tensor<float>(Shape{4, 6}, seed, 0.5);
    const auto b = random_tensor<float>(Shape{6, 5}, seed + 100, 0.5);
    const auto c = random_tensor<float>(Shape{5, 3}, seed + 200, 0.5);
    const auto left = matmul_values(matmul_values(a, b), c);
    const auto right = matmul_values(a, matmul_values(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) EXPECT_NEAR(left[i], right[i], 1e-4);
  }
}

TEST(Matmul, RowResultsIndependentOfBatch) {
  const auto a = random_tensor<float>(Shape{9, 33}, 7);
  const auto w = random_tensor<float>(Shape{33, 17}, 8);
  const auto full = matmul_values(a, w);
  for (std::size_t r = 0; r < 9; ++r) {
    Tensor row(Shape{1, 33}, std::vector<float>(a.row(r).begin(), a.row(r).end()));
    const auto single = matmul_values(row, w);
    EXPECT_EQ(std::vector<float>(full.row(r).begin(), full.row(r).end()), single.vec());
  }
}

TEST(LayerNorm, ConstantRowCollapsesToBias) {
  Tape<double> tape;
  auto x = tape.constant(t2(1, 3, {5, 5, 5}));
  auto g = tape.constant(Tensor64::full(Shape{3}, 1.0));
  auto b = tape.constant(Tensor64(Shape{3}));
  EXPECT_EQ(tape.value(layer_norm(tape, x, g, b)).vec(), (std::vector<double>{0, 0, 0}));
}

TEST(LayerNorm, NormalizedRowUnchangedWithoutEps) {
  Tape<double> tape;
  auto x = tape.constant(t2(1, 2, {1, -1}));
  auto g = tape.constant(Tensor64::full(Shape{2}, 1.0));
  auto b = tape.constant(Tensor64(Shape{2}));
  const auto y = tape.value(layer_norm(tape, x, g, b, 0.0));
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], -1.0);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  const std::vector<Tensor64> in{random_tensor(Shape{4, 8}, 3), random_tensor(Shape{8}, 4),
                                 random_tensor(Shape{8}, 5)};
  const auto weights = random_tensor(Shape{4, 8}, 6);
  auto f = [&weights](Tape<double>& t, std::span<const Var> v) {
    return sum(t, mul(t, layer_norm(t, v[0], v[1], v[2]), t.constant(weights)));
  };
  EXPECT_LT(grad_check(f, in, 1e-3), 1e-6);
}

TEST(LayerNorm, ZeroWidthRejected) {
  Tape<double> tape;
  auto x = tape.constant(Tensor64(Shape{2, 0}));
  auto g = tape.constant(Tensor64(Shape{0}));
  EXPECT_THROW(layer_norm(tape, x, g, g), DimensionError);
}

TEST(Gelu, KnownValuesAndMonotone) {
  EXPECT_EQ(gelu_scalar(0.0), 0.0);
  EXPECT_NEAR(gelu_scalar(10.0), 10.0, 1e-6);
  double prev = gelu_scalar(0.0);
  for (double x = 0.01; x < 8.0; x += 0.01) {
    const double y = gelu_scalar(x);
    EXPECT_GE(y, prev);
    prev = y;
  }
}

TEST(Gelu, GradientAtHalf) {
  auto f = [](Tape<double>& t, Var x) { return sum(t, gelu(t, x)); };
  EXPECT_LT(grad_check(f, Tensor64(Shape{1}, {0.5}), 1e-3), 1e-6);
  EXPECT_LT(grad_check(f, random_tensor(Shape{3, 4}, 9, 2.0), 1e-3), 1e-6);
}

TEST(Attention, SingleTokenIsProjectedValue) {
  const std::size_t d = 8;
  const auto w = attention_weights(d, 11);
  const auto x = random_tensor(Shape{1, d}, 12);
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : w) vars.push_back(tape.constant(t));
  const Var xv = tape.constant(x);
  const auto out = tape.value(multi_head_attention(tape, xv, xv, xv, bind_attention(vars), 2));
  const auto expected = tape.value(linear(tape, linear(tape, xv, vars[4], vars[5]), vars[6], vars[7]));
  for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(out[i], expected[i], 1e-12);
}

TEST(Attention, IdenticalTokensGiveIdenticalRows) {
  const std::size_t d = 8;
  const auto w = attention_weights(d, 21);
  const auto row = random_tensor(Shape{1, d}, 22);
  Tensor64 x(Shape{2, d});
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < d; ++c) x.at(r, c) = row[c];
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : w) vars.push_back(tape.constant(t));
  const Var xv = tape.constant(x);
  const auto out = tape.value(multi_head_attention(tape, xv, xv, xv, bind_attention(vars), 4));
  for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(out.at(0, c), out.at(1, c));
}

TEST(Attention, MatchesBruteForceLoops) {
  const std::size_t d = 8, heads = 2;
  const auto w = attention_weights(d, 31);
  const auto x = random_tensor(Shape{3, d}, 32);
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : w) vars.push_back(tape.constant(t));
  const Var xv = tape.constant(x);
  const auto out = tape.value(multi_head_attention(tape, xv, xv, xv, bind_attention(vars), heads));
  const auto oracle = brute_force_mha(x, w, heads);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.at(i, c), oracle[i][c], 1e-12);
}

TEST(Attention, HeadsMustDivideWidth) {
  const auto w = attention_weights(6, 41);
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : w) vars.push_back(tape.constant(t));
  const Var xv = tape.constant(random_tensor(Shape{2, 6}, 42));
  EXPECT_THROW(multi_head_attention(tape, xv, xv, xv, bind_attention(vars), 4), ConfigError);
}

TEST(Attention, BlocksAreIndependent) {
  const std::size_t d = 8;
  const auto w = attention_weights(d, 51);
  const auto x = random_tensor(Shape{6, d}, 52);
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : w) vars.push_back(tape.constant(t));
  const auto joint = tape.value(multi_head_attention(tape, tape.constant(x), tape.constant(x), tape.constant(x),
                                                     bind_attention(vars), 2, 2));
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor64 part(Shape{3, d});
    std::copy(x.data().begin() + b * 3 * d, x.data().begin() + (b + 1) * 3 * d, part.data().begin());
    const Var pv = tape.constant(part);
    const auto alone = tape.value(multi_head_attention(tape, pv, pv, pv, bind_attention(vars), 2));
    for (std::size_t i = 0; i < alone.size(); ++i) EXPECT_EQ(alone[i], joint[b * 3 * d + i]);
  }
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  const std::size_t d = 8;
  std::vector<Tensor64> in = attention_weights(d, 61);
  in.push_back(random_tensor(Shape{8, d}, 62));
  const auto proj = random_tensor(Shape{8, d}, 63);
  auto f = [&proj](Tape<double>& t, std::span<const Var> v) {
    const Var y = multi_head_attention(t, v[8], v[8], v[8], bind_attention(v), 2, 2);
    return sum(t, mul(t, y, t.constant(proj)));
  };
  EXPECT_LT(grad_check(f, in, 1e-3), 1e-4);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  const auto x = random_tensor<float>(Shape{6, 9}, 71, 3.0);
  const auto p = softmax_rows_values(x);
  Tensor shifted = x;
  for (std::size_t r = 0; r < 6; ++r)
    for (auto& v : shifted.row(r)) v += static_cast<float>(r) * 7.5f - 11.0f;
  const auto q = softmax_rows_values(shifted);
  for (std::size_t r = 0; r < 6; ++r) {
    double total = 0;
    for (float v : p.row(r)) total += v;
    EXPECT_NEAR(total, 1.0, 1e-6);
    for (std::size_t c = 0; c < 9; ++c) EXPECT_NEAR(p.at(r, c), q.at(r, c), 1e-6);
  }
}

TEST(GradCheck, QuadraticIsExact) {
  auto f = [](Tape<double>& t, Var x) { return squared_error(t, x, t.constant(Tensor64(Shape{3}))); };
  const Tensor64 x(Shape{3}, {1, 2, 3});
  EXPECT_LT(grad_check(f, x, 1e-3), 1e-8);
  const auto g = analytic_gradients([&f](Tape<double>& t, std::span<const Var> v) { return f(t, v[0]); }, {x});
  EXPECT_EQ(g[0].vec(), (std::vector<double>{2, 4, 6}));
}

TEST(GradCheck, ConstantFunctionHasZeroGradient) {
  auto f = [](Tape<double>& t, std::span<const Var>) { return t.constant(Tensor64::scalar(4.0)); };
  const auto g = analytic_gradients(f, {Tensor64(Shape{4}, {1, 2, 3, 4})});
  EXPECT_EQ(g[0].vec(), std::vector<double>(4, 0.0));
  EXPECT_EQ(grad_check(f, {Tensor64(Shape{4}, {1, 2, 3, 4})}), 0.0);
}

TEST(GradCheck, NonFiniteValueRejected) {
  auto f = [](Tape<double>& t, Var x) { return sum(t, scale(t, x, std::numeric_limits<double>::infinity())); };
  EXPECT_THROW(grad_check(f, Tensor64(Shape{1}, {1.0})), ValidationError);
}

// Every primitive against central differences on random inputs.
TEST(GradCheck, AllPrimitives) {
  const auto w34 = random_tensor(Shape{3, 4}, 80);
  auto weighted = [&w34](Tape<double>& t, Var y) { return sum(t, mul(t, y, t.constant(w34))); };
  struct Case {
    const char* name;
    ScalarGraph f;
    std::vector<Tensor64> inputs;
  };
  std::vector<int> labels{1, 0, 1};
  const std::vector<Case> cases{
      {"add", [&](Tape<double>& t, std::span<const Var> v) { return weighted(t, add(t, v[0], v[1])); },
       {random_tensor(Shape{3, 4}, 81), random_tensor(Shape{3, 4}, 82)}},
      {"sub", [&](Tape<double>& t, std::span<const Var> v) { return weighted(t, sub(t, v[0], v[1])); },
       {random_tensor(Shape{3, 4}, 83), random_tensor(Shape{3, 4}, 84)}},
      {"mul", [&](Tape<double>& t, std::span<const Var> v) { return weighted(t, mul(t, v[0], v[1])); },
       {random_tensor(Shape{3, 4}, 85), random_tensor(Shape{3, 4}, 86)}},
      {"scale", [&](Tape<double>& t, std::span<const Var> v) { return weighted(t, scale(t, v[0], -1.7)); },
       {random_tensor(Shape{3, 4}, 87)}},
      {"add_bias", [&](Tape<double>& t, std::span<const Var> v) { return weighted(t, add_bias(t, v[0], v[1])); },
       {random_tensor(Shape{3, 4}, 88), random_tensor(Shape{4}, 89)}},
      {"relu", [&](Tape<double>& t, std::span<const Var> v) { return weighted(t, relu(t, v[0])); },
       {Tensor64(Shape{3, 4}, {0.5, -0.3, 1.2, -2, 0.7, 0.9, -0.4, 0.1, 2, -1, 0.3, -0.8})}},
      {"abs", [&](Tape<double>& t, std::span<const Var> v) { return weighted(t, abs(t, v[0])); },
       {Tensor64(Shape{3, 4}, {0.5, -0.3, 1.2, -2, 0.7, 0.9, -0.4, 0.1, 2, -1, 0.3, -0.8})}},
      {"softmax", [&](Tape<double>& t, std::span<const Var> v) { return weighted(t, softmax_rows(t, v[0])); },
       {random_tensor(Shape{3, 4}, 90)}},
      {"concat_rows",
       [&](Tape<double>& t, std::span<const Var> v) { return weighted(t, concat_rows(t, v[0], v[1])); },
       {random_tensor(Shape{1, 4}, 91), random_tensor(Shape{2, 4}, 92)}},
      {"concat_cols",
       [&](Tape<double>& t, std::span<const Var> v) { return weighted(t, concat_cols(t, v[0], v[1])); },
       {random_tensor(Shape{3, 1}, 93), random_tensor(Shape{3, 3}, 94)}},
      {"gather_rows",
       [&](Tape<double>& t, std::span<const Var> v) { return weighted(t, gather_rows(t, v[0], {1, 0, 1})); },
       {random_tensor(Shape{2, 4}, 95)}},
      {"row_cosine",
       [&](Tape<double>& t, std::span<const Var> v) {
         return sum(t, mul(t, row_cosine(t, v[0], v[1]), t.constant(Tensor64(Shape{3}, {1.0, -2.0, 0.5}))));
       },
       {random_tensor(Shape{3, 4}, 96), random_tensor(Shape{3, 4}, 97)}},
      {"line_points",
       [&](Tape<double>& t, std::span<const Var> v) {
         return sum(t, mul(t, line_points(t, v[0], v[1], 3), t.constant(random_tensor(Shape{6, 4}, 98))));
       },
       {random_tensor(Shape{2, 4}, 99), random_tensor(Shape{2, 4}, 100)}},
      {"scaled_dot_attention",
       [&](Tape<double>& t, std::span<const Var> v) {
         return sum(t, mul(t, scaled_dot_attention(t, v[0], v[1], v[2], 2, 2),
                           t.constant(random_tensor(Shape{6, 4}, 101))));
       },
       {random_tensor(Shape{6, 4}, 102), random_tensor(Shape{6, 4}, 103), random_tensor(Shape{6, 4}, 104)}},
      {"bce_with_logits",
       [&](Tape<double>& t, std::span<const Var> v) { return bce_with_logits(t, v[0], labels); },
       {random_tensor(Shape{3}, 105, 2.0)}},
      {"softmax_cross_entropy",
       [&](Tape<double>& t, std::span<const Var> v) { return softmax_cross_entropy(t, v[0], {2, 0, 3}); },
       {random_tensor(Shape{3, 4}, 106)}},
      {"attention_pool",
       [&](Tape<double>& t, std::span<const Var> v) {
         return sum(t, mul(t, attention_pool(t, v[0], v[1], v[2], {0, 2, 5}),
                           t.constant(random_tensor(Shape{2, 3}, 107))));
       },
       {random_tensor(Shape{5, 4}, 108), random_tensor(Shape{5, 3}, 109), random_tensor(Shape{4}, 110)}},
      {"squared_error",
       [&](Tape<double>& t, std::span<const Var> v) { return squared_error(t, v[0], v[1]); },
       {random_tensor(Shape{3, 4}, 111), random_tensor(Shape{3, 4}, 112)}},
  };
  for (const auto& c : cases) {
    EXPECT_LT(grad_check(c.f, c.inputs, 1e-3), 1e-4) << c.name;
  }
}

TEST(Tape, UnusedInputsGetExactlyZeroGradient) {
  Tape<double> tape;
  auto a = tape.param(random_tensor(Shape{2, 2}, 120));
  auto unused = tape.param(random_tensor(Shape{3}, 121));
  tape.backward(sum(tape, a));
  EXPECT_EQ(tape.grad(unused).vec(), std::vector<double>(3, 0.0));
}

TEST(Tape, BackwardVisitsEachNodeOnce) {
  Tape<double> tape;
  auto a = tape.param(random_tensor(Shape{2, 2}, 122));
  auto b = add(tape, a, a);      // 1
  auto c = mul(tape, b, a);      // 2
  auto d = sum(tape, add(tape, c, b));  // 3, 4
  tape.backward(d);
  EXPECT_EQ(tape.backward_visits(), 4u);
  // d/da of sum(2a*a + 2a) = 4a + 2
  const auto g = tape.grad(a);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g[i], 4 * tape.value(a)[i] + 2);
}

TEST(Tensor, CheckedConstructionRejectsNonFinite) {
  EXPECT_THROW(Tensor::checked(Shape{2}, {1.0f, std::nanf("")}), ValidationError);
  EXPECT_THROW(Tensor::checked(Shape{2}, {1.0f, INFINITY}), ValidationError);
  EXPECT_THROW(Tensor(Shape{2, 2}, {1.0f}), DimensionError);
  EXPECT_NO_THROW(Tensor::checked(Shape{1, 2}, {1.0f, 2.0f}));
}
