// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "forge/diagnostics.hpp"

#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "forge/error.hpp"

namespace forge {
namespace {

const Tokenizer& Chars() {
  static const Tokenizer tok = Tokenizer::build(TokenizerMode::chars);
  return tok;
}

ModelConfig ThreeLayers() {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = 64;
  c.vocab_size = 99;
  c.seed = 2;
  return c;
}

// All-zero weights keep the residual stream at zero until block `block`
// (0-based) adds c * e0 through its MLP output bias; the answer's output
// column is e0, every other column is zero.
Model PointMassModel(Index block, TokenId answer) {
  Model m(ThreeLayers());
  m.parameters().setZero();
  m.segment_view("final_norm.gain").setOnes();
  m.segment_view("layers." + std::to_string(block) + ".mlp.out.bias")(0, 0) = 3.0;
  m.segment_view("output.weight")(0, answer) = 1.0;
  return m;
}

double Sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

TEST(TopKTest, TiesRankLowerIdFirst) {
  Vector v(5);
  v << 1.0, 2.0, 2.0, 0.5, 2.0;
  EXPECT_TRUE(in_top_k(v, 1, 1));
  EXPECT_FALSE(in_top_k(v, 2, 1));
  EXPECT_TRUE(in_top_k(v, 2, 2));
  EXPECT_FALSE(in_top_k(v, 4, 2));
  EXPECT_TRUE(in_top_k(v, 0, 4));
  EXPECT_FALSE(in_top_k(v, 3, 4));
  EXPECT_TRUE(in_top_k(v, 3, 5));
}

TEST(LogitLensTest, ConstructedPointMass) {
  const TokenId x = Chars().encode("x").front();
  const auto d = gen_kvr(40, 8, 8, 1);
  Dataset answers = d;
  for (auto& e : answers.examples) e.response = "x" + e.response.substr(1);
  for (Index block = 0; block < 3; ++block) {
    const auto h = logit_lens(PointMassModel(block, x), Chars(), answers, 1);
    ASSERT_EQ(h.per_layer_frequency.size(), 4u);
    EXPECT_EQ(h.coverage, 1.0);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_EQ(h.per_layer_frequency[i], i == static_cast<std::size_t>(block) + 1 ? 1.0 : 0.0) << block;
    }
  }
}

TEST(LogitLensTest, NeverHitGivesZeros) {
  // Every probe point ranks id 0 first, so with k=1 no answer is found.
  Model m(ThreeLayers());
  m.parameters().setZero();
  const auto h = logit_lens(m, Chars(), gen_kvr(30, 8, 8, 4), 1);
  EXPECT_EQ(h.coverage, 0.0);
  EXPECT_EQ(Sum(h.per_layer_frequency), 0.0);
  for (auto n : h.first_hits) EXPECT_EQ(n, 0u);
}

TEST(LogitLensTest, NormalizedWheneverCovered) {
  const auto d = gen_kvr(60, 8, 8, 5);
  for (std::uint64_t seed : {1, 2, 3}) {
    ModelConfig c = ThreeLayers();
    c.seed = seed;
    const auto m = init_model(c);
    for (std::size_t k : {1, 5, 20, 99}) {
      const auto h = logit_lens(m, Chars(), d, k);
      if (h.coverage > 0) {
        EXPECT_NEAR(Sum(h.per_layer_frequency), 1.0, 1e-9);
      } else {
        EXPECT_EQ(Sum(h.per_layer_frequency), 0.0);
      }
      if (k == 99) EXPECT_EQ(h.coverage, 1.0);
    }
  }
}

TEST(LogitLensTest, Errors) {
  const auto m = init_model(ThreeLayers());
  const Dataset empty{"e", DatasetKind::factoid, {}, 0};
  try {
    logit_lens(m, Chars(), empty, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::empty_dataset);
  }
  EXPECT_THROW(logit_lens(m, Chars(), gen_kvr(3, 8, 8, 1), 0), Error);
}

TEST(AlignmentTest, SelfAlignmentIsOne) {
  const auto m = init_model(ThreeLayers());
  const auto d = gen_kvr(40, 8, 8, 6);
  const auto a = grad_alignment(m, Chars(), d, d, 16, 3);
  EXPECT_NEAR(a.cosine, 1.0, 1e-9);
  EXPECT_NEAR(a.dot, a.norm_a * a.norm_a, 1e-9 * a.dot);
  EXPECT_NEAR(a.dot, a.cosine * a.norm_a * a.norm_b, 1e-9 * std::abs(a.dot));
}

TEST(AlignmentTest, ScaleInvariantCosine) {
  const auto m = init_model(ThreeLayers());
  const TransformerObjective f(m, Chars());
  const Vector ga = f.gradient(gen_kvr(10, 8, 8, 1));
  const Vector gb = f.gradient(gen_kvr(10, 8, 8, 2));
  const auto base = alignment(ga, gb);
  const auto scaled = alignment(ga, (7.5 * gb).eval());
  EXPECT_NEAR(base.cosine, scaled.cosine, 1e-12);
  EXPECT_LE(std::abs(base.cosine), 1.0);
  // Repeating every example leaves the mean loss, and so its gradient, unchanged.
  const Dataset once = gen_kvr(10, 8, 8, 2);
  Dataset twice = once;
  twice.examples.insert(twice.examples.end(), once.examples.begin(), once.examples.end());
  EXPECT_NEAR(alignment(ga, f.gradient(twice)).cosine, base.cosine, 1e-9);
}

TEST(AlignmentTest, SingleParameterClosedForm) {
  // f(t; c) = h (t - c)^2 / 2, so grad = h (t - mean c).
  Matrix h(1, 1);
  h << 2.0;
  Vector theta(1);
  theta << 0.5;
  const QuadraticObjective f(h, theta);
  const std::vector<Vector> da{Vector::Constant(1, 1.5)};
  const std::vector<Vector> db{Vector::Constant(1, -1.0), Vector::Constant(1, 0.0)};
  const auto a = alignment(f.gradient(da), f.gradient(db));
  EXPECT_NEAR(a.dot, (2.0 * (0.5 - 1.5)) * (2.0 * (0.5 + 0.5)), 1e-15);
  EXPECT_EQ(a.cosine, -1.0);
}

TEST(AlignmentTest, DegenerateAndSizeErrors) {
  const Vector zero = Vector::Zero(4);
  const Vector one = Vector::Ones(4);
  try {
    alignment(zero, one);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::degenerate_gradient);
  }
  const auto m = init_model(ThreeLayers());
  EXPECT_THROW(grad_alignment(m, Chars(), gen_kvr(5, 8, 8, 1), gen_kvr(20, 8, 8, 2), 10), Error);
}

struct Quadratic {
  QuadraticObjective f;
  std::vector<Vector> a, b, m;
};

Quadratic MakeQuadratic() {
  Matrix h(3, 3);
  h << 3.0, 0.5, 0.0, 0.5, 2.0, 0.3, 0.0, 0.3, 1.0;
  Vector theta(3);
  theta << 0.2, -0.4, 1.0;
  auto pt = [](double x, double y, double z) { return (Vector(3) << x, y, z).finished(); };
  return {QuadraticObjective(h, theta),
          {pt(1.0, 0.0, 0.5), pt(0.5, -1.0, 1.5)},
          {pt(-1.0, 1.0, 0.0), pt(-0.5, 0.5, 2.0), pt(0.0, 2.0, 1.0)},
          {pt(0.8, -0.6, 1.2)}};
}

TEST(Delta2Test, ZeroWithoutMixingData) {
  const auto q = MakeQuadratic();
  const auto e = delta2_estimate(q.f, q.a, q.b, std::nullopt, 0.1);
  EXPECT_EQ(e.delta2, 0.0);
  EXPECT_EQ(e.mixed, e.plain);

  const auto m = init_model(ThreeLayers());
  const auto est = delta2_estimate(m, Chars(), gen_kvr(20, 8, 8, 1), gen_kvr(20, 8, 8, 2), nullptr, 3e-4, 8, 1);
  EXPECT_EQ(est.delta2, 0.0);
  const Dataset empty{"e", DatasetKind::mix_random, {}, 0};
  EXPECT_EQ(delta2_estimate(m, Chars(), gen_kvr(20, 8, 8, 1), gen_kvr(20, 8, 8, 2), &empty, 3e-4, 8, 1).delta2,
            0.0);
}

TEST(Delta2Test, DefinitionAndAntisymmetry) {
  const auto q = MakeQuadratic();
  const double eta = 0.05;
  const auto e = delta2_estimate(q.f, q.a, q.b, q.m, eta);
  const Vector ga = q.f.gradient(q.a);
  const double mixed = q.f.gradient(q.f.unite(q.b, q.m)).dot(ga);
  const double plain = q.f.gradient(q.b).dot(ga);
  EXPECT_NEAR(e.delta2, eta * (mixed - plain), 1e-12);
  EXPECT_NEAR(e.delta2, eta * (e.mixed - e.plain), 1e-12 * std::abs(e.delta2));
  // Swapping which gradient plays the plain role negates delta2.
  const double swapped = eta * (plain - mixed);
  EXPECT_NEAR(swapped, -e.delta2, 1e-15);
}

TEST(Delta2Test, OneStepErrorIsSecondOrder) {
  const auto q = MakeQuadratic();
  const auto train = q.f.unite(q.b, q.m);
  double previous = 0.0;
  for (double eta : {0.1, 0.05, 0.025, 0.0125}) {
    const auto c = one_step_change(q.f, train, q.a, eta);
    const Vector g = q.f.gradient(train);
    const double residual = c.actual - c.predicted;
    EXPECT_NEAR(residual, 0.5 * eta * eta * g.dot(q.f.hessian() * g), 1e-12);
    if (previous > 0.0) EXPECT_GE(previous / std::abs(residual), 3.5);
    previous = std::abs(residual);
  }
}

TEST(Delta2Test, MitigationSignCondition) {
  // With a mean loss, grad(B u M) = (|B| gB + |M| gM) / (|B| + |M|), so
  // delta2 > 0 exactly when gM . gA > gB . gA.
  auto q = MakeQuadratic();
  const Vector ga = q.f.gradient(q.a);
  const double b_term = q.f.gradient(q.b).dot(ga);
  auto pt = [](double x, double y, double z) { return (Vector(3) << x, y, z).finished(); };
  for (const auto& m : {pt(0.8, -0.6, 1.2), pt(-2.0, 2.0, -1.0), pt(0.0, 0.0, 0.0), pt(3.0, -3.0, 4.0)}) {
    const std::vector<Vector> dm{m};
    const auto e = delta2_estimate(q.f, q.a, q.b, dm, 0.1);
    const double m_term = q.f.gradient(dm).dot(ga);
    EXPECT_EQ(e.delta2 > 0.0, m_term > b_term);
    EXPECT_NEAR(e.delta2, 0.1 * (m_term - b_term) * 1.0 / 4.0, 1e-12);
  }
}

TEST(Delta2Test, TransformerOneStepTracksFirstOrder) {
  const auto m = init_model(ThreeLayers());
  const TransformerObjective f(m, Chars());
  const auto train = gen_kvr(8, 8, 8, 1);
  const auto eval = gen_kvr(8, 8, 8, 2);
  const auto big = one_step_change(f, train, eval, 1e-3);
  const auto small = one_step_change(f, train, eval, 5e-4);
  EXPECT_GT(std::abs(big.actual - big.predicted) / std::abs(small.actual - small.predicted), 3.0);
}

TEST(Delta2Test, ModelLevelSubsampleKeepsProportion) {
  const auto m = init_model(ThreeLayers());
  const auto a = gen_kvr(30, 8, 8, 1);
  const auto b = gen_kvr(40, 8, 8, 2);
  const std::vector<std::string> words{"ab", "cd"};
  const auto mix = gen_random_word_sequences(80, 2, words, 3);
  const auto e1 = delta2_estimate(m, Chars(), a, b, &mix, 1e-3, 10, 5);
  const auto e2 = delta2_estimate(m, Chars(), a, b, &mix, 1e-3, 10, 5);
  EXPECT_EQ(e1.delta2, e2.delta2);
  EXPECT_NE(e1.delta2, 0.0);
  EXPECT_NEAR(e1.delta2, e1.eta * (e1.mixed - e1.plain), 1e-12);
  EXPECT_THROW(delta2_estimate(m, Chars(), a, b, &mix, 0.0, 10, 5), Error);
}

}  // namespace
}  // namespace forge
