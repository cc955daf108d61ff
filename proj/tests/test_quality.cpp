#include <gtest/gtest.h>

#include "sop/errors.hpp"
#include "sop/quality.hpp"
#include "test_support.hpp"

using namespace sop;
using sop::testing::tiny_model;

TEST(RepetitionLoop, Examples) {
  EXPECT_TRUE(has_repetition_loop(TokenSeq{5, 5, 5}));
  EXPECT_FALSE(has_repetition_loop(TokenSeq{5, 5, 6}));
  EXPECT_TRUE(has_repetition_loop(TokenSeq{4, 5, 4, 5}));
  EXPECT_TRUE(has_repetition_loop(TokenSeq{7, 4, 5, 6, 4, 5, 6}));
  EXPECT_FALSE(has_repetition_loop(TokenSeq{4, 5, 6, 7, 4, 5}));
  EXPECT_FALSE(has_repetition_loop(TokenSeq{}));
}

TEST(QualityProxy, DegenerateOutputsScoreZero) {
  const auto m = tiny_model(12, 1);
  const TokenSeq prompt{1, 4, 5, 6};
  const QualityRubric rubric{1e9, -1.0, 3};
  EXPECT_EQ(quality_proxy(m, prompt, TokenSeq{}, rubric), 0.0);
  EXPECT_EQ(quality_proxy(m, prompt, TokenSeq{7, 8, 2}, rubric), 0.0);
  // Generous thresholds: fluency and relevance pass, the loop criterion fails.
  EXPECT_NEAR(quality_proxy(m, prompt, TokenSeq{7, 7, 7}, rubric), 2.0 / 3.0, 1e-12);
  EXPECT_EQ(quality_proxy(m, prompt, TokenSeq{7, 8, 9}, rubric), 1.0);
  const auto d = quality_detail(m, prompt, TokenSeq{7, 8, 9}, QualityRubric{0.5, 1.1, 3});
  EXPECT_EQ(d.score, 1.0 / 3.0);
  EXPECT_TRUE(d.no_loop);
}

TEST(QualityProxy, BaseOutputNeverBelowEmpty) {
  const auto m = tiny_model(12, 2);
  std::mt19937_64 rng(3);
  const auto rubric = calibrate_rubric(m, {{1, 4, 5}, {1, 6, 7}, {1, 8}}, 6);
  for (int i = 0; i < 20; ++i) {
    TokenSeq p{1};
    const auto body = sop::testing::random_tokens(rng, m.vocab(), 3);
    p.insert(p.end(), body.begin(), body.end());
    EXPECT_GE(quality_proxy(m, p, generate_greedy(m, p, 6), rubric), quality_proxy(m, p, TokenSeq{}, rubric));
  }
}

TEST(QualityRubric, CalibrationAndJson) {
  const auto m = tiny_model(12, 4);
  const std::vector<TokenSeq> prompts{{1, 4, 5}, {1, 6, 7}, {1, 8, 9}, {1, 10}};
  const auto r = calibrate_rubric(m, prompts, 5, 100.0);
  double worst = 0;
  for (const auto& p : prompts) {
    auto joined = p;
    const auto y = generate_greedy(m, p, 5);
    joined.insert(joined.end(), y.begin(), y.end());
    worst = std::max(worst, perplexity(m, joined));
  }
  EXPECT_EQ(r.fluency_ppl, worst);
  EXPECT_EQ(QualityRubric::from_json(r.to_json()), r);
  EXPECT_THROW(QualityRubric::from_json(json{{"relevance", 0.3}}), SchemaError);
  EXPECT_THROW(calibrate_rubric(m, {}, 5), ConfigError);
}
