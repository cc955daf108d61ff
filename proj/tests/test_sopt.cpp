#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "sop/errors.hpp"
#include "sop/sopt.hpp"
#include "test_support.hpp"

using namespace sop;
using sop::testing::random_tokens;
using sop::testing::tiny_model;

namespace {

RestrictionSet rset_of(const Vocab& v, std::vector<TokenSeq> terms) {
  RestrictionSet r;
  for (auto& t : terms) r.add(RestrictedTerm{decode(t, v), t, ""});
  return r;
}

std::vector<PromptCase> cases_for(const Model& m, std::mt19937_64& rng, int n, int max_new) {
  std::vector<PromptCase> out;
  for (int i = 0; i < n; ++i) {
    TokenSeq p{m.vocab().bos()};
    const auto body = random_tokens(rng, m.vocab(), 3);
    p.insert(p.end(), body.begin(), body.end());
    out.push_back(make_case(m, p, max_new));
  }
  return out;
}

OptConfig small_cfg(std::uint64_t seed) {
  OptConfig c;
  c.iterations = 5;
  c.batch = 12;
  c.topk = 6;
  c.suffix_len = 3;
  c.early_stop_drop = 10.0;  // never triggers
  c.seed = seed;
  c.loss.max_new = 4;
  return c;
}

TokenSeq ordinary_ids(const Vocab& v) {
  TokenSeq out;
  for (TokenId t = 0; t < v.size(); ++t)
    if (!v.is_special(t)) out.push_back(t);
  return out;
}

}  // namespace

TEST(ProposeTopk, ZeroGradientTakesLowestIds) {
  const GradMatrix g{2, 3, std::vector<double>(6, 0.0)};
  std::vector<double> emb(10 * 3);
  std::iota(emb.begin(), emb.end(), 1.0);
  const auto sets = propose_topk(g, emb, 10, 4);
  ASSERT_EQ(sets.positions.size(), 2u);
  for (const auto& x : sets.positions) EXPECT_EQ(x, (TokenSeq{0, 1, 2, 3}));
}

TEST(ProposeTopk, FullWidthIsPermutation) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  GradMatrix g{3, 2, {}};
  for (int i = 0; i < 6; ++i) g.data.push_back(n01(rng));
  std::vector<double> emb(8);
  for (auto& x : emb) x = n01(rng);
  const auto sets = propose_topk(g, emb, 4, 4);
  for (auto x : sets.positions) {
    std::sort(x.begin(), x.end());
    EXPECT_EQ(x, (TokenSeq{0, 1, 2, 3}));
  }
  // k above the vocabulary is capped.
  EXPECT_EQ(propose_topk(g, emb, 4, 9).positions[0].size(), 4u);
}

TEST(ProposeTopk, HandComputedOrdering) {
  // E rows: v0=(1,0) v1=(0,1) v2=(1,1) v3=(-1,0); grad=(-1, 0.5).
  // Scores -(g.E[v]): v0=1, v1=-0.5, v2=0.5, v3=-1.
  const GradMatrix g{1, 2, {-1.0, 0.5}};
  const std::vector<double> emb{1, 0, 0, 1, 1, 1, -1, 0};
  EXPECT_EQ(propose_topk(g, emb, 4, 4).positions[0], (TokenSeq{0, 2, 1, 3}));
  EXPECT_EQ(propose_topk(g, emb, 4, 2).positions[0], (TokenSeq{0, 2}));
  const TokenId excluded[] = {0};
  EXPECT_EQ(propose_topk(g, emb, 4, 2, excluded).positions[0], (TokenSeq{2, 1}));
  // Ties go to the lowest id.
  const std::vector<double> tied{1, 0, 1, 0, 0, 0, 1, 0};
  EXPECT_EQ(propose_topk(g, tied, 4, 4).positions[0], (TokenSeq{0, 1, 3, 2}));
}

TEST(ProposeTopk, ModelVariantSkipsSpecials) {
  const auto m = tiny_model(10, 2);
  const GradMatrix g{2, m.dim(), std::vector<double>(2 * m.dim(), 0.0)};
  const auto sets = propose_topk(g, m, m.vocab_size());
  for (const auto& x : sets.positions) {
    EXPECT_EQ(static_cast<int>(x.size()), m.vocab_size() - 4);
    for (TokenId t : x) EXPECT_FALSE(m.vocab().is_special(t));
  }
}

TEST(SampleCandidates, Structure) {
  std::mt19937_64 rng(1);
  const auto one = sample_candidates(TokenSeq{7}, CandidateSets{{{5}}}, 1, rng);
  EXPECT_EQ(one, (std::vector<TokenSeq>{{5}, {7}}));

  const TokenSeq delta{4, 5, 6, 7};
  const CandidateSets sets{{{8, 9}, {10, 11}, {4, 12}, {13}}};
  std::mt19937_64 a(42), b(42);
  const auto ca = sample_candidates(delta, sets, 200, a);
  EXPECT_EQ(ca, sample_candidates(delta, sets, 200, b));
  ASSERT_EQ(ca.size(), 201u);
  EXPECT_EQ(ca.back(), delta);
  std::set<int> touched;
  for (const auto& c : ca) {
    int diff = 0;
    for (std::size_t j = 0; j < delta.size(); ++j)
      if (c[j] != delta[j]) {
        ++diff;
        touched.insert(static_cast<int>(j));
        const auto& xs = sets.positions[j];
        EXPECT_NE(std::find(xs.begin(), xs.end(), c[j]), xs.end());
      }
    EXPECT_LE(diff, 1);
  }
  EXPECT_EQ(touched.size(), 4u);
  EXPECT_THROW(sample_candidates(delta, CandidateSets{{{1}}}, 3, a), ConfigError);
}

TEST(ScoreCandidates, SerialAndParallelAgreeBitwise) {
  std::mt19937_64 rng(5);
  const auto m = tiny_model(14, 8);
  auto spec = LossSpec{};
  spec.rset = rset_of(m.vocab(), {{5, 6}, {9}});
  spec.max_new = 4;
  const SuffixScorer scorer(m, cases_for(m, rng, 3, 4), spec);
  std::vector<TokenSeq> cands;
  for (int i = 0; i < 40; ++i) cands.push_back(random_tokens(rng, m.vocab(), 3));
  const auto s = score_candidates(scorer, cands, ExecPolicy::serial);
  const auto p = score_candidates(scorer, cands, ExecPolicy::parallel);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    EXPECT_EQ(s[i].l_total, p[i].l_total);
    EXPECT_EQ(s[i].per_prompt[0].output, p[i].per_prompt[0].output);
  }
}

TEST(GcgStep, NeverIncreasesLoss) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = tiny_model(12, 500 + trial % 10);
    auto cfg = small_cfg(trial);
    cfg.loss.rset = rset_of(m.vocab(), {random_tokens(rng, m.vocab(), 2)});
    const SuffixScorer scorer(m, cases_for(m, rng, 2, 4), cfg.loss);
    const auto delta = random_tokens(rng, m.vocab(), 3);
    const double before = scorer.score_batch(delta).l_total;
    const auto step = gcg_step(scorer, delta, cfg, rng);
    EXPECT_LE(step.loss.l_total, before);
    EXPECT_EQ(step.loss.l_total, scorer.score_batch(step.suffix).l_total);
  }
}

TEST(GcgStep, SingleCandidateWidthKeepsOrImproves) {
  // With one-token candidate sets equal to delta itself, the step is the identity.
  std::mt19937_64 rng(10);
  const auto m = tiny_model(12, 4);
  auto spec = LossSpec{};
  spec.max_new = 4;
  spec.rset = rset_of(m.vocab(), {{6}});
  const SuffixScorer scorer(m, cases_for(m, rng, 2, 4), spec);
  const TokenSeq delta{5, 7};
  const auto cands = sample_candidates(delta, CandidateSets{{{5}, {7}}}, 8, rng);
  for (const auto& c : cands) EXPECT_EQ(c, delta);
  const auto losses = score_candidates(scorer, cands, ExecPolicy::serial);
  for (const auto& l : losses) EXPECT_EQ(l.l_total, losses.back().l_total);
}

TEST(InitialSuffix, TruncatesAndPads) {
  const auto vocab = Vocab::with_specials({"please", "exclude", "words", ":", "giant", "panda", "apple", "."});
  RestrictionSet r;
  r.add(make_term("giant panda", vocab));
  r.add(make_term("apple", vocab));
  EXPECT_EQ(decode(initial_suffix(vocab, r, 7), vocab), "please exclude words : giant panda apple");
  EXPECT_EQ(decode(initial_suffix(vocab, r, 3), vocab), "please exclude words");
  EXPECT_EQ(decode(initial_suffix(vocab, r, 9), vocab), "please exclude words : giant panda apple . .");
  EXPECT_EQ(instruction_text(r), "please exclude words : giant panda apple");
}

TEST(OptimizeSuffix, TraceDeterminismAndDescent) {
  std::mt19937_64 rng(11);
  const auto m = tiny_model(14, 21);
  const auto cases = cases_for(m, rng, 3, 4);
  const auto r = rset_of(m.vocab(), {{5, 6}, {9}});
  auto cfg = small_cfg(3);
  const auto a = optimize_suffix(m, cases, r, cfg, QualityRubric{});
  const auto b = optimize_suffix(m, cases, r, cfg, QualityRubric{});
  EXPECT_EQ(a.content_hash(), b.content_hash());
  EXPECT_EQ(a.content_json().dump(), b.content_json().dump());
  ASSERT_EQ(a.trace.size(), 5u);
  EXPECT_LE(a.trace.front().loss, a.initial.loss);
  for (std::size_t i = 1; i < a.trace.size(); ++i) EXPECT_LE(a.trace[i].loss, a.trace[i - 1].loss);
  EXPECT_EQ(static_cast<int>(a.suffix.size()), cfg.suffix_len);
  const SuffixScorer scorer(m, cases, [&] {
    auto s = cfg.loss;
    s.rset = r;
    return s;
  }());
  EXPECT_EQ(scorer.score_batch(a.suffix).l_total, a.trace.back().loss);

  auto serial = cfg;
  serial.exec = ExecPolicy::serial;
  const auto c = optimize_suffix(m, cases, r, serial, QualityRubric{});
  EXPECT_EQ(c.suffix, a.suffix);
  EXPECT_EQ(c.trace, a.trace);

  cfg.iterations = 1;
  EXPECT_EQ(optimize_suffix(m, cases, r, cfg, QualityRubric{}).trace.size(), 1u);
  EXPECT_THROW(optimize_suffix(m, {}, r, cfg, QualityRubric{}), ConfigError);
  cfg.iterations = 0;
  EXPECT_THROW(optimize_suffix(m, cases, r, cfg, QualityRubric{}), ConfigError);
}

TEST(OptimizeSuffix, ArtifactJsonRoundTrip) {
  std::mt19937_64 rng(12);
  const auto m = tiny_model(12, 22);
  const auto cases = cases_for(m, rng, 2, 4);
  auto cfg = small_cfg(1);
  cfg.iterations = 2;
  const auto a = optimize_suffix(m, cases, rset_of(m.vocab(), {{6}}), cfg, QualityRubric{});
  const auto j = a.to_json();
  for (const char* f : {"suffix_ids", "suffix_text", "init_ids", "trace", "config", "model_hash", "rset_fingerprint",
                        "seconds"})
    EXPECT_TRUE(j.contains(f)) << f;
  const auto back = SuffixArtifact::from_json(json::parse(j.dump()));
  EXPECT_EQ(back.content_hash(), a.content_hash());
  auto broken = j;
  broken.erase("model_hash");
  try {
    SuffixArtifact::from_json(broken);
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_EQ(e.field(), "model_hash");
  }
}

TEST(OptimizeSuffix, EmptyRestrictionSetIsFlagged) {
  std::mt19937_64 rng(13);
  const auto m = tiny_model(12, 23);
  auto cfg = small_cfg(1);
  cfg.iterations = 1;
  const auto a = optimize_suffix(m, cases_for(m, rng, 2, 4), RestrictionSet{}, cfg, QualityRubric{});
  EXPECT_TRUE(a.quality_only);
  EXPECT_EQ(a.trace.front().l_res, 0.0);
}

TEST(OptimizeSuffix, EarlyStopKeepsPreviousSuffix) {
  std::mt19937_64 rng(14);
  const auto m = tiny_model(12, 24);
  const auto cases = cases_for(m, rng, 2, 4);
  auto cfg = small_cfg(2);
  cfg.early_stop_drop = 0.0;
  // A rubric no output can satisfy except by relevance makes quality brittle;
  // whatever happens, an early stop must leave the last accepted suffix in place.
  const auto a = optimize_suffix(m, cases, rset_of(m.vocab(), {{6}}), cfg, QualityRubric{1e9, 0.0, 1});
  if (a.early_stopped) {
    EXPECT_LT(a.trace.size(), 5u);
    if (a.trace.empty()) EXPECT_EQ(a.suffix, a.init);
    for (const auto& e : a.trace) EXPECT_GE(e.quality, a.initial.quality);
  }
}

TEST(BruteForce, CountsAndBounds) {
  std::mt19937_64 rng(15);
  const auto m = tiny_model(8, 30);
  auto spec = LossSpec{};
  spec.max_new = 4;
  spec.rset = rset_of(m.vocab(), {{5}});
  const SuffixScorer scorer(m, cases_for(m, rng, 2, 4), spec);
  const auto r1 = brute_force_optimum(scorer, 1, {6, 4, 5});
  EXPECT_EQ(r1.evaluated, 3);
  for (TokenId t : {4, 5, 6}) EXPECT_LE(r1.loss, scorer.score_batch(TokenSeq{t}).l_total);
  const auto r2 = brute_force_optimum(scorer, 2, ordinary_ids(m.vocab()));
  EXPECT_EQ(r2.evaluated, 64);
  EXPECT_EQ(r2.loss, scorer.score_batch(r2.suffix).l_total);
  EXPECT_EQ(brute_force_optimum(scorer, 2, ordinary_ids(m.vocab()), ExecPolicy::serial).suffix, r2.suffix);
  EXPECT_THROW(brute_force_optimum(scorer, 6, ordinary_ids(m.vocab())), ConfigError);
}

TEST(BruteForce, OptimizerNeverBeatsOracleAndUsuallyMatches) {
  int close = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::mt19937_64 rng(1000 + trial);
    const auto m = tiny_model(8, 700 + trial);
    auto cfg = small_cfg(trial);
    cfg.suffix_len = 2;
    cfg.topk = 8;
    cfg.batch = 16;
    cfg.iterations = 20;
    const auto r = rset_of(m.vocab(), {random_tokens(rng, m.vocab(), 1), random_tokens(rng, m.vocab(), 2)});
    const auto cases = cases_for(m, rng, 1 + trial % 3, 4);
    auto spec = cfg.loss;
    spec.rset = r;
    const SuffixScorer scorer(m, cases, spec);
    const auto best = brute_force_optimum(scorer, 2, ordinary_ids(m.vocab()));
    const auto art = optimize_suffix(m, cases, r, cfg, QualityRubric{});
    const double got = art.trace.empty() ? art.initial.loss : art.trace.back().loss;
    EXPECT_GE(got, best.loss);
    if (got - best.loss <= 0.05 * std::abs(best.loss)) ++close;
  }
  EXPECT_GE(close, 16);
}

TEST(OptimizeSoft, DescentAndProjection) {
  std::mt19937_64 rng(16);
  const auto m = tiny_model(12, 40);
  const auto cases = cases_for(m, rng, 2, 4);
  const auto r = rset_of(m.vocab(), {{6, 7}});
  auto cfg = small_cfg(0);
  const auto still = optimize_soft(m, cases, r, cfg, 0.0, 3);
  EXPECT_EQ(still.rows, SoftSuffix::from_tokens(m, still.init));
  EXPECT_EQ(still.projected, still.init);
  const auto tiny = optimize_soft(m, cases, r, cfg, 1e-6, 1);
  ASSERT_EQ(tiny.trace.size(), 2u);
  EXPECT_LE(tiny.trace[1], tiny.trace[0] + 1e-8);
  const auto run = optimize_soft(m, cases, r, cfg, 0.5, 15);
  ASSERT_EQ(run.trace.size(), 16u);
  for (std::size_t i = 1; i < run.trace.size(); ++i) EXPECT_LE(run.trace[i], run.trace[i - 1]);
  EXPECT_LT(run.trace.back(), run.trace.front());
  EXPECT_EQ(static_cast<int>(run.projected.size()), cfg.suffix_len);
  for (TokenId t : run.projected) EXPECT_FALSE(m.vocab().is_special(t));
  EXPECT_EQ(optimize_soft(m, cases, r, cfg, 0.5, 15).content_hash(), run.content_hash());
  const auto back = SoftArtifact::from_json(json::parse(run.to_json().dump()));
  EXPECT_EQ(back.content_hash(), run.content_hash());
}

TEST(FiniteDiffGrad, ConstantAndLinear) {
  const std::vector<double> rows{0.1, -0.2, 0.3, 0.4, 0.5, -0.6};
  const auto zero = finite_diff_grad([](std::span<const double>) { return 3.0; }, rows, 2, 0, 3, 1e-4);
  for (double v : zero.data) EXPECT_EQ(v, 0.0);
  const std::vector<double> a{1.5, -2.0, 0.25, 4.0, -1.0, 0.5};
  const auto lin = finite_diff_grad(
      [&](std::span<const double> x) {
        double s = 0;
        for (std::size_t i = 0; i < x.size(); ++i) s += a[i] * x[i];
        return s;
      },
      rows, 2, 1, 3, 1e-4);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(lin.data[i], a[2 + i], 1e-9);
  EXPECT_THROW(finite_diff_grad([](std::span<const double>) { return 0.0; }, rows, 2, 0, 1, 1.0), ConfigError);
}

TEST(FiniteDiffGrad, MatchesAnalyticGradient) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    const auto m = tiny_model(12, 800 + trial);
    LossSpec spec;
    spec.rset = rset_of(m.vocab(), {random_tokens(rng, m.vocab(), 2)});
    TokenSeq input{1};
    const auto body = random_tokens(rng, m.vocab(), 5);
    input.insert(input.end(), body.begin(), body.end());
    const auto y = generate_greedy(m, TokenSeq(input.begin(), input.end() - 2), 4);
    const auto an = input_embedding_grad(m, input, 4, 6, y, spec);
    const auto fd = finite_diff_grad(m, input, 4, 6, y, spec, 1e-4);
    double scale = 0;
    for (double v : an.grad.data) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < fd.data.size(); ++i)
      EXPECT_NEAR(fd.data[i], an.grad.data[i], 1e-4 * std::max(std::abs(an.grad.data[i]), 1e-3 * scale) + 1e-9);
  }
}
