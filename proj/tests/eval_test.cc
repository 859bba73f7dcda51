// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "forge/eval.hpp"

#include <map>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "forge/corpus.hpp"
#include "forge/error.hpp"
#include "forge/training.hpp"

namespace forge {
namespace {

ModelConfig SmallConfig() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 32;
  c.n_heads = 2;
  c.d_ff = 64;
  c.max_seq_len = 48;
  c.vocab_size = 99;
  c.seed = 3;
  return c;
}

// Every position emits the same logits: the final norm collapses the stream to
// its bias e0, and row 0 of the output matrix holds the scores.
Model ConstantModel(const Tokenizer& tok, const std::map<std::string, double>& scores,
                    double eos_score = 0.0) {
  Model m(SmallConfig());
  m.parameters().setZero();
  m.segment_view("final_norm.bias")(0, 0) = 1.0;
  auto out = m.segment_view("output.weight");
  out(0, kEos) = eos_score;
  for (const auto& [symbol, s] : scores) out(0, tok.encode(symbol).at(0)) = s;
  return m;
}

Dataset Pairs(std::vector<std::pair<std::string, std::string>> rows) {
  Dataset d{"pairs", DatasetKind::factoid, {}, 0};
  for (auto& [p, r] : rows) d.examples.push_back({p, r, Triple{p, "is", r}, {}});
  return d;
}

const Tokenizer& Chars() {
  static const Tokenizer tok = Tokenizer::build(TokenizerMode::chars);
  return tok;
}

TEST(EvalTest, MatchesTrimsButKeepsCase) {
  EXPECT_TRUE(matches("  abc \t", "abc"));
  EXPECT_TRUE(matches("abc", " abc "));
  EXPECT_FALSE(matches("Abc", "abc"));
  EXPECT_FALSE(matches("ab c", "abc"));
  EXPECT_TRUE(matches("   ", ""));
}

TEST(EvalTest, GreedyStopsAtEos) {
  const auto m = ConstantModel(Chars(), {{"x", 1.0}}, 2.0);
  EXPECT_EQ(predict(m, Chars(), "hello", 10), "");
}

TEST(EvalTest, GreedyRespectsBudgetAndContext) {
  const auto m = ConstantModel(Chars(), {{"x", 1.0}});
  EXPECT_EQ(predict(m, Chars(), "hi", 5), "xxxxx");
  // BOS h i SEP fills 4 of 48 positions; the last emitted token is never fed back.
  EXPECT_EQ(predict(m, Chars(), "hi", 1000).size(), 45u);
}

TEST(EvalTest, TiesGoToLowestId) {
  const auto m = ConstantModel(Chars(), {{"q", 1.0}, {"b", 1.0}});
  EXPECT_EQ(predict(m, Chars(), "z", 3), "bbb");
}

TEST(EvalTest, BatchMatchesSingle) {
  const auto m = init_model(SmallConfig());
  const std::vector<std::string> prompts{"a", "The value of key k is?", "", "xyz"};
  const std::vector<std::size_t> budgets{3, 12, 5, 0};
  const auto batch = predict_batch(m, Chars(), prompts, budgets);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    EXPECT_EQ(batch[i], predict(m, Chars(), prompts[i], budgets[i]));
  }
}

TEST(EvalTest, ExactMatchOnConstantModel) {
  const auto m = ConstantModel(Chars(), {{"x", 1.0}}, 0.5);
  // Budget is |response| + slack, so a model that never stops only matches
  // when it runs out exactly at the response length; here it never does.
  const auto d = Pairs({{"p1", "xx"}, {"p2", "y"}});
  const auto r = exact_match(m, Chars(), d);
  EXPECT_EQ(r.accuracy, 0.0);
  ASSERT_EQ(r.per_example.size(), 2u);
  EXPECT_EQ(r.per_example[0].prediction, std::string(2 + kDecodeSlack, 'x'));
  EXPECT_EQ(r.per_example[0].target, "xx");

  const auto eos = ConstantModel(Chars(), {}, 5.0);
  const auto blank = Pairs({{"p", " "}, {"q", "a"}});
  EXPECT_EQ(exact_match(eos, Chars(), blank).accuracy, 0.5);
}

TEST(EvalTest, TrailingSpacesStillMatch) {
  // Emits spaces forever: trimmed to "" which equals a blank target.
  const auto m = ConstantModel(Chars(), {{" ", 1.0}});
  const auto d = Pairs({{"p", "  "}, {"q", "z"}});
  const auto r = exact_match(m, Chars(), d);
  EXPECT_TRUE(r.per_example[0].correct);
  EXPECT_FALSE(r.per_example[1].correct);
  EXPECT_EQ(correctness(m, Chars(), d), (std::vector<bool>{true, false}));
}

TEST(EvalTest, EmptyDatasetIsAnError) {
  const auto m = init_model(SmallConfig());
  const Dataset empty{"e", DatasetKind::factoid, {}, 0};
  EXPECT_THROW(exact_match(m, Chars(), empty), Error);
}

class TrainedEvalTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    seen_ = new Dataset(gen_kvr(8, 4, 3, 21, "seen"));
    const Dataset* ex[] = {seen_};
    unseen_ = new Dataset(gen_kvr_disjoint(8, 4, 3, 22, ex, "unseen"));
    ModelConfig c = SmallConfig();
    model_ = new Model(init_model(c));
    StageSpec stage{"seen", StrategySpec::none(), {StopMode::accuracy_target, 1.0, 300}, {}};
    stage.optimizer.learning_rate = 3e-3;
    stage.optimizer.batch_size = 4;
    result_ = new StageResult(train_stage(*model_, Chars(), *seen_, stage));
  }
  static void TearDownTestSuite() {
    delete seen_;
    delete unseen_;
    delete model_;
    delete result_;
  }
  static Dataset* seen_;
  static Dataset* unseen_;
  static Model* model_;
  static StageResult* result_;
};
Dataset* TrainedEvalTest::seen_ = nullptr;
Dataset* TrainedEvalTest::unseen_ = nullptr;
Model* TrainedEvalTest::model_ = nullptr;
StageResult* TrainedEvalTest::result_ = nullptr;

TEST_F(TrainedEvalTest, MemorizesSmallSet) {
  EXPECT_EQ(result_->stop_reason, "accuracy_target");
  EXPECT_EQ(exact_match(*model_, Chars(), *seen_).accuracy, 1.0);
}

TEST_F(TrainedEvalTest, FastPathAgreesWithDecoding) {
  Dataset both = *seen_;
  both.examples.insert(both.examples.end(), unseen_->examples.begin(), unseen_->examples.end());
  // A few near misses with edge whitespace and a truncated target.
  both.examples.push_back({seen_->examples[0].prompt, " " + seen_->examples[0].response, {}, {}});
  both.examples.push_back({seen_->examples[1].prompt, seen_->examples[1].response.substr(1), {}, {}});
  both.examples.push_back({seen_->examples[2].prompt, seen_->examples[2].response + "  ", {}, {}});
  const auto report = exact_match(*model_, Chars(), both);
  const auto fast = correctness(*model_, Chars(), both);
  ASSERT_EQ(fast.size(), report.per_example.size());
  for (std::size_t i = 0; i < fast.size(); ++i) {
    EXPECT_EQ(fast[i], report.per_example[i].correct) << i;
  }
  EXPECT_DOUBLE_EQ(accuracy(*model_, Chars(), both), report.accuracy);
}

TEST_F(TrainedEvalTest, FilterPartitions) {
  Dataset both = *seen_;
  both.examples.insert(both.examples.end(), unseen_->examples.begin(), unseen_->examples.end());
  const auto unfamiliar = filter_unfamiliar(*model_, Chars(), both);
  const auto report = exact_match(*model_, Chars(), both);
  std::size_t wrong = 0;
  for (const auto& o : report.per_example) wrong += !o.correct;
  EXPECT_EQ(unfamiliar.size(), wrong);
  EXPECT_GE(unfamiliar.size(), unseen_->size() - 1);
  for (const auto& ex : unfamiliar.examples) {
    EXPECT_FALSE(matches(predict(*model_, Chars(), ex.prompt, ex.response.size() + kDecodeSlack),
                         ex.response));
  }
  EXPECT_THROW(filter_unfamiliar(*model_, Chars(), gen_arithmetic_nonfactoid(3, 5, 1)), Error);
}

}  // namespace
}  // namespace forge
