// Serial vs OpenMP candidate scoring, and full-recompute vs cached decoding.

#include <benchmark/benchmark.h>

#include <random>

#include "sop/losses.hpp"
#include "sop/sopt.hpp"

using namespace sop;

namespace {

Model bench_model(int dim) {
  auto vocab = Vocab::synthetic(60);
  ModelConfig c;
  c.vocab_size = vocab.size();
  c.embed_dim = dim;
  c.n_heads = 2;
  c.n_layers = 2;
  c.mlp_hidden = 4 * dim;
  c.context_len = 48;
  return Model::init(vocab, c, 7);
}

TokenSeq random_body(std::mt19937_64& rng, int n) {
  std::uniform_int_distribution<int> pick(4, 63);
  TokenSeq out;
  for (int i = 0; i < n; ++i) out.push_back(pick(rng));
  return out;
}

void score(benchmark::State& state, ExecPolicy exec) {
  const auto m = bench_model(32);
  std::mt19937_64 rng(1);
  std::vector<PromptCase> cases;
  for (int i = 0; i < 6; ++i) {
    TokenSeq p{m.vocab().bos()};
    const auto body = random_body(rng, 10);
    p.insert(p.end(), body.begin(), body.end());
    cases.push_back(make_case(m, p, 10));
  }
  LossSpec spec;
  spec.max_new = 10;
  spec.rset.add(RestrictedTerm{"w1", {5}, ""});
  const SuffixScorer scorer(m, cases, spec);
  std::vector<TokenSeq> cands;
  for (int i = 0; i < static_cast<int>(state.range(0)); ++i) cands.push_back(random_body(rng, 8));
  for (auto _ : state) benchmark::DoNotOptimize(score_candidates(scorer, cands, exec));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_ScoreSerial(benchmark::State& state) { score(state, ExecPolicy::serial); }
void BM_ScoreParallel(benchmark::State& state) { score(state, ExecPolicy::parallel); }

// Greedy generation of 16 tokens by re-running the full forward pass each step.
void BM_GenerateFullForward(benchmark::State& state) {
  const auto m = bench_model(static_cast<int>(state.range(0)));
  std::mt19937_64 rng(2);
  TokenSeq seq{m.vocab().bos()};
  const auto body = random_body(rng, 12);
  seq.insert(seq.end(), body.begin(), body.end());
  for (auto _ : state) {
    auto s = seq;
    for (int t = 0; t < 16; ++t) {
      const auto c = forward(m, embed_tokens(m, s), static_cast<int>(s.size()) - 1);
      s.push_back(argmax_token(c.logits));
    }
    benchmark::DoNotOptimize(s);
  }
}

void BM_GenerateCached(benchmark::State& state) {
  const auto m = bench_model(static_cast<int>(state.range(0)));
  std::mt19937_64 rng(2);
  TokenSeq seq{m.vocab().bos()};
  const auto body = random_body(rng, 12);
  seq.insert(seq.end(), body.begin(), body.end());
  for (auto _ : state) {
    Decoder dec(m);
    dec.append_tokens(seq);
    TokenSeq out;
    for (int t = 0; t < 16; ++t) {
      out.push_back(argmax_token(dec.last_logits()));
      dec.append_tokens(std::span<const TokenId>(&out.back(), 1));
    }
    benchmark::DoNotOptimize(out);
  }
}

}  // namespace

BENCHMARK(BM_ScoreSerial)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ScoreParallel)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_GenerateFullForward)->Arg(32)->Arg(64)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_GenerateCached)->Arg(32)->Arg(64)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
