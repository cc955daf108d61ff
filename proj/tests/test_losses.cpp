#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sop/errors.hpp"
#include "sop/kernels.hpp"
#include "sop/losses.hpp"
#include "test_support.hpp"

using namespace sop;
using sop::testing::random_tokens;
using sop::testing::tiny_model;
using sop::testing::uniform_model;

namespace {

TokenSeq cat(TokenSeq a, const TokenSeq& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Log-probabilities of every next token from one full reference forward pass.
std::vector<std::vector<double>> logprobs_full(const Model& m, const TokenSeq& seq) {
  const auto c = forward(m, embed_tokens(m, seq), 0);
  std::vector<std::vector<double>> out;
  const int V = m.vocab_size();
  for (std::size_t i = 0; i < seq.size(); ++i) {
    std::vector<double> z(c.logits.begin() + i * V, c.logits.begin() + (i + 1) * V);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0;
    for (double x : z) s += std::exp(x - mx);
    for (auto& x : z) x -= mx + std::log(s);
    out.push_back(z);
  }
  return out;
}

RestrictionSet rset_of(const Vocab& v, std::vector<TokenSeq> terms) {
  RestrictionSet r;
  for (auto& t : terms) r.add(RestrictedTerm{decode(t, v), t, ""});
  return r;
}

LossSpec spec_with(RestrictionSet r, LossWeights w = {}) {
  LossSpec s;
  s.rset = std::move(r);
  s.weights = w;
  s.max_new = 5;
  return s;
}

}  // namespace

TEST(RestrictionLossAt, Examples) {
  const auto u = uniform_model(8);
  const double V = u.vocab_size();
  const TokenSeq input{1, 5, 6}, y{7, 8, 9};
  EXPECT_EQ(restriction_loss_at(u, input, y, 1, RestrictionSet{}, 1e-6), 0.0);
  const auto r = rset_of(u.vocab(), {{5, 6}});
  EXPECT_NEAR(restriction_loss_at(u, input, y, 2, r, 1e-6), 2 * std::log(1 / V), 1e-9);
  // p(r_i) = 1/V = eps / 10: both tokens hit the floor.
  const double eps = 10.0 / V;
  EXPECT_NEAR(restriction_loss_at(u, input, y, 1, r, eps), 2 * std::log(eps), 1e-12);
  EXPECT_THROW(restriction_loss_at(u, input, y, 0, r, 1e-6), LengthError);
  EXPECT_THROW(restriction_loss_at(u, input, y, 4, r, 1e-6), LengthError);
}

TEST(RestrictionLoss, AveragesPositions) {
  const auto m = tiny_model(12, 3);
  const auto r = rset_of(m.vocab(), {{5, 6}, {9}});
  const TokenSeq x{1, 4, 7}, delta{8, 10}, y{11, 5, 10};
  const auto input = cat(x, delta);
  EXPECT_DOUBLE_EQ(restriction_loss(m, x, delta, TokenSeq{11}, r, 1e-6),
                   restriction_loss_at(m, input, TokenSeq{11}, 1, r, 1e-6));
  // Oracle: per-position sums from a single full forward pass, averaged by hand.
  const auto lp = logprobs_full(m, cat(input, y));
  double expect = 0;
  for (int t = 0; t < 3; ++t) {
    const auto& row = lp[input.size() - 1 + t];
    expect += std::max(row[5], std::log(1e-6)) + std::max(row[6], std::log(1e-6)) + std::max(row[9], std::log(1e-6));
  }
  expect /= 3;
  EXPECT_NEAR(restriction_loss(m, x, delta, y, r, 1e-6), expect, 1e-12);
  const auto u = uniform_model(8);
  EXPECT_NEAR(restriction_loss(u, x, delta, y, r, 1e-6), restriction_loss_at(u, input, y, 2, r, 1e-6), 1e-12);
  EXPECT_THROW(restriction_loss(m, x, delta, TokenSeq{}, r, 1e-6), LengthError);
}

TEST(RestrictionLoss, Bounded) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const auto m = tiny_model(12, 100 + trial);
    const auto r = rset_of(m.vocab(), {random_tokens(rng, m.vocab(), 2), random_tokens(rng, m.vocab(), 1)});
    const double eps = trial % 2 ? 1e-6 : 0.05;
    const auto x = random_tokens(rng, m.vocab(), 3);
    const auto y = random_tokens(rng, m.vocab(), 4);
    const double l = restriction_loss(m, x, TokenSeq{}, y, r, eps);
    EXPECT_LE(l, 0.0);
    EXPECT_GE(l, static_cast<double>(r.token_count()) * std::log(eps) - 1e-12);
  }
}

TEST(QualityLoss, Examples) {
  const auto u = uniform_model(8);
  EXPECT_NEAR(quality_loss(u, TokenSeq{1, 4}, TokenSeq{}, TokenSeq{5, 6, 7}), 3 * std::log(u.vocab_size()), 1e-9);
  const auto m = tiny_model(12, 5);
  const TokenSeq x{1, 4, 5}, delta{6}, y{7, 8, 9, 10};
  const auto lp = logprobs_full(m, cat(cat(x, delta), y));
  double expect = 0;
  for (std::size_t t = 0; t < y.size(); ++t) expect -= lp[x.size() + delta.size() - 1 + t][y[t]];
  EXPECT_NEAR(quality_loss(m, x, delta, y), expect, 1e-12);
}

TEST(QualityLoss, NearZeroForSharpModelOnOwnOutput) {
  // Scaling the final norm gain makes the model nearly deterministic.
  const auto base = tiny_model(12, 6);
  std::vector<double> p(base.params().begin(), base.params().end());
  for (int i = 0; i < base.dim(); ++i) p[base.layout().lnf_g + i] = 200.0;
  const Model sharp(base.vocab(), base.config(), p);
  const TokenSeq x{1, 4, 5};
  const auto y = generate_greedy(sharp, x, 5);
  EXPECT_LT(quality_loss(sharp, x, TokenSeq{}, y), 0.05);
}

TEST(QualityLoss, EmptySuffixMatchesOwnNll) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = tiny_model(12, 40 + trial);
    const auto x = cat(TokenSeq{1}, random_tokens(rng, m.vocab(), 3));
    const auto y = generate_greedy(m, x, 5);
    const auto full = cat(x, y);
    const double ppl = perplexity(m, full);
    // perplexity covers the prompt tokens too; subtract their NLL.
    const auto lp = logprobs_full(m, full);
    double prompt_nll = 0;
    for (std::size_t i = 0; i + 1 < x.size(); ++i) prompt_nll -= lp[i][x[i + 1]];
    const double own = std::log(ppl) * static_cast<double>(full.size() - 1) - prompt_nll;
    EXPECT_NEAR(quality_loss(m, x, TokenSeq{}, y), own, 1e-9);
  }
}

TEST(SemanticLoss, Examples) {
  auto vocab = Vocab::synthetic(6);
  auto base = Model::init(vocab, sop::testing::tiny_config(vocab.size(), 4), 1);
  std::vector<double> p(base.params().begin(), base.params().end());
  auto set_row = [&](TokenId id, std::vector<double> row) {
    std::copy(row.begin(), row.end(), p.begin() + static_cast<std::ptrdiff_t>(base.layout().tok_emb + id * 4));
  };
  set_row(4, {1, 0, 0, 0});
  set_row(5, {0, 1, 0, 0});
  set_row(6, {-1, 0, 0, 0});
  const Model m(vocab, base.config(), p);
  EXPECT_NEAR(semantic_loss(m, TokenSeq{1, 4, 5}, TokenSeq{4, 5}).value, 0.0, 1e-12);
  EXPECT_NEAR(semantic_loss(m, TokenSeq{1, 4}, TokenSeq{5, 2}).value, 1.0, 1e-12);
  EXPECT_NEAR(semantic_loss(m, TokenSeq{4}, TokenSeq{6}).value, 2.0, 1e-12);
  const auto empty = semantic_loss(m, TokenSeq{4}, TokenSeq{2});
  EXPECT_EQ(empty.value, 1.0);
  EXPECT_TRUE(empty.degenerate);
}

TEST(SemanticLoss, InRange) {
  std::mt19937_64 rng(2);
  const auto m = tiny_model(20, 9);
  for (int trial = 0; trial < 100; ++trial) {
    const double v = semantic_loss(m, random_tokens(rng, m.vocab(), 3), random_tokens(rng, m.vocab(), 4)).value;
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 2.0);
  }
}

TEST(TotalLoss, WeightsCombineExactly) {
  const auto m = tiny_model(12, 13);
  const TokenSeq x{1, 4, 5}, delta{7, 8};
  const auto y = generate_greedy(m, x, 5);
  const auto r = rset_of(m.vocab(), {{9, 10}, {11}});
  EXPECT_EQ(total_loss(m, x, delta, y, spec_with(r, {0, 0, 0})).l_total, 0.0);
  const auto only_res = total_loss(m, x, delta, y, spec_with(r, {1, 0, 0}));
  EXPECT_EQ(only_res.l_total, only_res.l_res);
  const auto all = total_loss(m, x, delta, y, spec_with(r));
  const double l_res = restriction_loss(m, x, delta, y, r, 1e-6);
  const double l_qual = quality_loss(m, x, delta, y);
  const double l_sem = semantic_loss(m, x, generate_greedy(m, cat(x, delta), 5)).value;
  EXPECT_NEAR(all.l_total, l_res + l_qual + l_sem, 1e-12);
}

TEST(TotalLoss, DecompositionHoldsForRandomWeights) {
  const std::vector<double> choices{0, 0.5, 1, 2};
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> pick(0, 3);
  const auto m = tiny_model(12, 14);
  const TokenSeq x{1, 4, 5}, delta{6};
  const auto y = generate_greedy(m, x, 5);
  const auto r = rset_of(m.vocab(), {{9}});
  for (int trial = 0; trial < 40; ++trial) {
    LossWeights w{choices[pick(rng)], choices[pick(rng)], choices[pick(rng)]};
    const auto b = total_loss(m, x, delta, y, spec_with(r, w));
    EXPECT_EQ(b.l_total, w.res * b.l_res + w.qual * b.l_qual + w.sem * b.l_sem);
  }
}

TEST(BatchTotalLoss, MeanOverPrompts) {
  const auto m = tiny_model(12, 15);
  const auto r = rset_of(m.vocab(), {{9, 10}});
  const auto spec = spec_with(r);
  std::vector<PromptCase> cases{make_case(m, {1, 4, 5}, 5), make_case(m, {1, 6}, 5), make_case(m, {1, 7, 8, 11}, 5)};
  const TokenSeq delta{12, 13};
  const auto one = batch_total_loss(m, std::span(cases).first(1), delta, spec);
  EXPECT_DOUBLE_EQ(one.l_total, total_loss(m, cases[0].prompt, delta, cases[0].base_output, spec).l_total);
  const auto three = batch_total_loss(m, cases, delta, spec);
  double expect = 0;
  for (const auto& c : cases) expect += total_loss(m, c.prompt, delta, c.base_output, spec).l_total;
  EXPECT_NEAR(three.l_total, expect / 3, 1e-12);
  auto doubled = cases;
  doubled.insert(doubled.end(), cases.begin(), cases.end());
  EXPECT_NEAR(batch_total_loss(m, doubled, delta, spec).l_total, three.l_total, 1e-12);
  EXPECT_THROW(batch_total_loss(m, std::span<const PromptCase>{}, delta, spec), ConfigError);
}

TEST(SuffixScorer, AgreesWithReference) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 25; ++trial) {
    const auto m = tiny_model(14, 200 + trial);
    const auto r = rset_of(m.vocab(), {random_tokens(rng, m.vocab(), 2)});
    auto spec = spec_with(r);
    std::vector<PromptCase> cases;
    for (int i = 0; i < 3; ++i) cases.push_back(make_case(m, cat({1}, random_tokens(rng, m.vocab(), 3)), spec.max_new));
    const SuffixScorer scorer(m, cases, spec);
    const auto delta = random_tokens(rng, m.vocab(), 1 + trial % 3);
    const auto fast = scorer.score_batch(delta);
    const auto ref = batch_total_loss(m, cases, delta, spec);
    EXPECT_NEAR(fast.l_total, ref.l_total, 1e-10);
    for (std::size_t i = 0; i < cases.size(); ++i) {
      EXPECT_EQ(fast.per_prompt[i].output, ref.per_prompt[i].output);
      EXPECT_NEAR(fast.per_prompt[i].l_res, ref.per_prompt[i].l_res, 1e-10);
      EXPECT_NEAR(fast.per_prompt[i].l_qual, ref.per_prompt[i].l_qual, 1e-10);
    }
    // The unsuffixed prompt reproduces its own base output.
    const auto plain = scorer.score(0, TokenSeq{});
    EXPECT_EQ(plain.output, cases[0].base_output);
  }
}

TEST(SuffixScorer, AnchoredScoringIsExact) {
  std::mt19937_64 rng(47);
  const auto m = tiny_model(14, 77);
  const auto r = rset_of(m.vocab(), {random_tokens(rng, m.vocab(), 1), random_tokens(rng, m.vocab(), 2)});
  const auto spec = spec_with(r);
  std::vector<PromptCase> cases;
  for (int i = 0; i < 3; ++i) cases.push_back(make_case(m, cat({1}, random_tokens(rng, m.vocab(), 3)), spec.max_new));
  const SuffixScorer scorer(m, cases, spec);
  const TokenSeq base = random_tokens(rng, m.vocab(), 4);
  const auto anchor = scorer.make_anchor(base);
  std::vector<TokenSeq> suffixes{base, {}, {base[0]}, {base[0], base[1]}, random_tokens(rng, m.vocab(), 4),
                                 cat(base, {base[0]})};
  for (int j = 0; j < 4; ++j) {
    auto edit = base;
    edit[j] = edit[j] == 5 ? 6 : 5;
    suffixes.push_back(edit);
  }
  Decoder dec(m);
  for (const auto& s : suffixes) {
    const auto a = scorer.score_batch(s, anchor, dec);
    const auto b = scorer.score_batch(s);
    EXPECT_EQ(a.l_total, b.l_total);
    for (std::size_t i = 0; i < cases.size(); ++i) EXPECT_EQ(a.per_prompt[i].output, b.per_prompt[i].output);
  }
}

namespace {

// Central differences on the decoder-path loss; independent of backward().
GradMatrix central_diff(const Model& m, const TokenSeq& input, int b, int e, const TokenSeq& y, const LossSpec& spec,
                        double h) {
  auto rows = embed_tokens(m, input);
  const int d = m.dim();
  GradMatrix g{e - b, d, std::vector<double>(static_cast<std::size_t>(e - b) * d)};
  for (int r = b; r < e; ++r) {
    for (int c = 0; c < d; ++c) {
      double& x = rows[static_cast<std::size_t>(r) * d + c];
      const double keep = x;
      x = keep + h;
      const double fp = differentiable_loss(m, rows, y, spec);
      x = keep - h;
      const double fm = differentiable_loss(m, rows, y, spec);
      x = keep;
      g.data[static_cast<std::size_t>(r - b) * d + c] = (fp - fm) / (2 * h);
    }
  }
  return g;
}

}  // namespace

TEST(InputEmbeddingGrad, MatchesFiniteDifferences) {
  std::mt19937_64 rng(77);
  const std::vector<double> choices{0, 0.5, 1, 2};
  std::uniform_int_distribution<int> pick(0, 3);
  double worst = 0;
  for (int trial = 0; trial < 8; ++trial) {
    const auto m = tiny_model(14, 300 + trial);
    auto spec = spec_with(rset_of(m.vocab(), {random_tokens(rng, m.vocab(), 2), random_tokens(rng, m.vocab(), 1)}),
                          {choices[pick(rng)], choices[pick(rng)] + 0.5, 1});
    const auto x = cat({1}, random_tokens(rng, m.vocab(), 3));
    const auto delta = random_tokens(rng, m.vocab(), 2);
    const auto input = cat(x, delta);
    const auto y = generate_greedy(m, x, 4);
    const auto an = input_embedding_grad(m, input, static_cast<int>(x.size()), static_cast<int>(input.size()), y, spec);
    const auto fd = central_diff(m, input, static_cast<int>(x.size()), static_cast<int>(input.size()), y, spec, 1e-4);
    double scale = 0;
    for (double v : an.grad.data) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < fd.data.size(); ++i) {
      const double err = std::abs(an.grad.data[i] - fd.data[i]) / std::max({std::abs(an.grad.data[i]), std::abs(fd.data[i]), 1e-3 * scale, 1e-8});
      worst = std::max(worst, err);
    }
    EXPECT_NEAR(an.value, differentiable_loss(m, embed_tokens(m, input), y, spec), 1e-10);
  }
  EXPECT_LT(worst, 1e-4) << "max relative error " << worst;
}

TEST(InputEmbeddingGrad, EdgeCases) {
  const auto m = tiny_model(14, 3);
  const TokenSeq input{1, 4, 5, 6}, y{7, 8};
  auto spec = spec_with(rset_of(m.vocab(), {{9}}), {0, 0, 1});
  const auto zero = input_embedding_grad(m, input, 2, 4, y, spec);
  for (double v : zero.grad.data) EXPECT_EQ(v, 0.0);
  spec.weights = {};
  const auto a = input_embedding_grad(m, input, 2, 4, y, spec);
  const auto b = input_embedding_grad(m, input, 2, 4, y, spec);
  EXPECT_EQ(a.grad.data, b.grad.data);
  for (double v : a.grad.data) EXPECT_TRUE(std::isfinite(v));
  EXPECT_THROW(input_embedding_grad(m, input, 2, 5, y, spec), LengthError);
  spec.include_semantic_in_grad = true;
  EXPECT_THROW(input_embedding_grad(m, input, 2, 4, y, spec), ConfigError);
}
