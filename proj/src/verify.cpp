#include "sop/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>

#include "sop/errors.hpp"
#include "sop/losses.hpp"
#include "sop/sopt.hpp"

namespace sop {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Model small_model(int n_words, std::uint64_t seed, int dim = 16) {
  auto vocab = Vocab::synthetic(n_words);
  ModelConfig c;
  c.vocab_size = vocab.size();
  c.embed_dim = dim;
  c.n_heads = 2;
  c.n_layers = 2;
  c.mlp_hidden = 4 * dim;
  c.context_len = 32;
  return Model::init(vocab, c, seed);
}

// Zero token embeddings make every logit zero, so each next-token distribution is uniform.
Model uniform_model(int n_words) {
  const auto base = small_model(n_words, 1);
  std::vector<double> p(base.params().begin(), base.params().end());
  std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(base.layout().tok_emb),
              static_cast<std::size_t>(base.vocab_size()) * base.dim(), 0.0);
  return Model(base.vocab(), base.config(), p);
}

TokenSeq random_tokens(std::mt19937_64& rng, const Vocab& vocab, int n) {
  std::uniform_int_distribution<int> pick(4, vocab.size() - 1);
  TokenSeq out;
  for (int i = 0; i < n; ++i) out.push_back(pick(rng));
  return out;
}

RestrictionSet random_rset(std::mt19937_64& rng, const Vocab& vocab, int max_terms, int max_len) {
  std::uniform_int_distribution<int> nt(1, max_terms), nl(1, max_len);
  RestrictionSet r;
  const int k = nt(rng);
  std::set<TokenSeq> seen;
  for (int i = 0; i < k; ++i) {
    const auto toks = random_tokens(rng, vocab, nl(rng));
    if (seen.insert(toks).second) r.add(RestrictedTerm{decode(toks, vocab), toks, ""});
  }
  return r;
}

TokenSeq with_bos(const Vocab& vocab, const TokenSeq& body) {
  TokenSeq p{vocab.bos()};
  p.insert(p.end(), body.begin(), body.end());
  return p;
}

TokenSeq ordinary_ids(const Vocab& v) {
  TokenSeq out;
  for (TokenId t = 0; t < v.size(); ++t)
    if (!v.is_special(t)) out.push_back(t);
  return out;
}

}  // namespace

CheckResult check_gradients(int instances, std::uint64_t seed, double h, double tol) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> w(0.0, 2.0);
  double worst = 0;
  for (int i = 0; i < instances; ++i) {
    const auto m = small_model(10 + i % 6, seed * 1000 + i);
    LossSpec spec;
    spec.rset = random_rset(rng, m.vocab(), 3, 2);
    spec.weights = {w(rng), w(rng), 0.0};
    const auto x = with_bos(m.vocab(), random_tokens(rng, m.vocab(), 2 + i % 3));
    const int d = 1 + i % 3;
    auto input = x;
    const auto delta = random_tokens(rng, m.vocab(), d);
    input.insert(input.end(), delta.begin(), delta.end());
    const auto y = generate_greedy(m, x, 4);
    const int b = static_cast<int>(x.size()), e = static_cast<int>(input.size());
    const auto an = input_embedding_grad(m, input, b, e, y, spec);
    const auto fd = finite_diff_grad(m, input, b, e, y, spec, h);
    double scale = 0;
    for (double v : an.grad.data) scale = std::max(scale, std::abs(v));
    for (std::size_t k = 0; k < fd.data.size(); ++k) {
      const double denom = std::max({std::abs(an.grad.data[k]), std::abs(fd.data[k]), 1e-3 * scale, 1e-8});
      worst = std::max(worst, std::abs(an.grad.data[k] - fd.data[k]) / denom);
    }
  }
  CheckResult r;
  r.name = "gradient oracle";
  r.passed = worst < tol;
  r.detail = std::to_string(instances) + " instances, max relative error " + fmt("%.3g", worst);
  r.tolerance = "< " + fmt("%.0e", tol) + " (central differences, h=" + fmt("%.0e", h) + ")";
  r.seconds = since(t0);
  return r;
}

CheckResult check_loss_identities(std::uint64_t seed, int instances) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> w(0.0, 3.0);
  std::string failure;
  double worst_closed_form = 0;
  for (int i = 0; i < instances && failure.empty(); ++i) {
    const auto m = small_model(12, seed + 17 * i);
    LossSpec spec;
    spec.rset = random_rset(rng, m.vocab(), 3, 3);
    spec.weights = {w(rng), w(rng), w(rng)};
    spec.max_new = 5;
    const auto prompt = with_bos(m.vocab(), random_tokens(rng, m.vocab(), 3));
    const auto suffix = random_tokens(rng, m.vocab(), 2);
    const auto y = generate_greedy(m, prompt, 5);
    const auto b = total_loss(m, prompt, suffix, y, spec);
    if (b.l_total != combine(spec.weights, b.l_res, b.l_qual, b.l_sem)) failure = "weighted sum mismatch";
    const double lower = static_cast<double>(spec.rset.token_count()) * std::log(spec.floor_eps);
    if (!(b.l_res <= 0.0 && b.l_res >= lower)) failure = "restriction loss outside its bounds";

    const auto u = uniform_model(8 + i % 5);
    const double V = u.vocab_size();
    const auto ur = random_rset(rng, u.vocab(), 3, 3);
    const auto up = with_bos(u.vocab(), random_tokens(rng, u.vocab(), 3));
    const auto uy = random_tokens(rng, u.vocab(), 1 + i % 4);
    const double expect_res = static_cast<double>(ur.token_count()) * std::log(1.0 / V);
    for (int t = 1; t <= static_cast<int>(uy.size()); ++t)
      worst_closed_form = std::max(worst_closed_form, std::abs(restriction_loss_at(u, up, uy, t, ur, 1e-6) - expect_res));
    worst_closed_form =
        std::max(worst_closed_form, std::abs(quality_loss(u, up, {}, uy) - static_cast<double>(uy.size()) * std::log(V)));
  }
  if (failure.empty() && worst_closed_form > 1e-9) failure = "uniform-model closed form off by " + fmt("%.3g", worst_closed_form);
  CheckResult r;
  r.name = "loss identities";
  r.passed = failure.empty();
  r.detail = failure.empty() ? std::to_string(instances) + " instances, closed-form error " + fmt("%.3g", worst_closed_form)
                             : failure;
  r.tolerance = "exact weighted sum; bounds; closed forms within 1e-9";
  r.seconds = since(t0);
  return r;
}

CheckResult check_oracle_equivalence(int trials, std::uint64_t seed, int min_close, double rel) {
  const auto t0 = Clock::now();
  int close = 0, beaten = 0;
  for (int trial = 0; trial < trials; ++trial) {
    std::mt19937_64 rng(seed * 7919 + trial);
    const auto m = small_model(8, seed * 131 + trial);
    OptConfig cfg;
    cfg.iterations = 20;
    cfg.batch = 16;
    cfg.topk = 8;
    cfg.suffix_len = 2;
    cfg.early_stop_drop = 10.0;
    cfg.seed = trial;
    cfg.loss.max_new = 4;
    const auto rset = random_rset(rng, m.vocab(), 2, 2);
    std::vector<PromptCase> cases;
    for (int i = 0; i < 1 + trial % 3; ++i)
      cases.push_back(make_case(m, with_bos(m.vocab(), random_tokens(rng, m.vocab(), 3)), cfg.loss.max_new));
    auto spec = cfg.loss;
    spec.rset = rset;
    const SuffixScorer scorer(m, cases, spec);
    const auto best = brute_force_optimum(scorer, cfg.suffix_len, ordinary_ids(m.vocab()));
    const auto art = optimize_suffix(m, cases, rset, cfg, QualityRubric{});
    const double got = art.trace.empty() ? art.initial.loss : art.trace.back().loss;
    if (got < best.loss) ++beaten;
    if (got - best.loss <= rel * std::abs(best.loss)) ++close;
  }
  CheckResult r;
  r.name = "oracle equivalence";
  r.passed = close >= min_close && beaten == 0;
  r.detail = std::to_string(close) + "/" + std::to_string(trials) + " within tolerance, oracle beaten " +
             std::to_string(beaten) + " times";
  r.tolerance = ">= " + std::to_string(min_close) + " within " + fmt("%.0f", rel * 100) + "% relative; never below the optimum";
  r.seconds = since(t0);
  return r;
}

CheckResult check_descent_determinism(int runs, std::uint64_t seed) {
  const auto t0 = Clock::now();
  std::string failure;
  for (int i = 0; i < runs && failure.empty(); ++i) {
    std::mt19937_64 rng(seed + i);
    const auto m = small_model(16, seed * 31 + i, 16);
    OptConfig cfg;
    cfg.iterations = 6;
    cfg.batch = 16;
    cfg.topk = 8;
    cfg.suffix_len = 3;
    cfg.seed = seed + i;
    cfg.loss.max_new = 4;
    cfg.exec = i % 2 ? ExecPolicy::serial : ExecPolicy::parallel;
    const auto rset = random_rset(rng, m.vocab(), 3, 2);
    std::vector<PromptCase> cases;
    for (int k = 0; k < 3; ++k)
      cases.push_back(make_case(m, with_bos(m.vocab(), random_tokens(rng, m.vocab(), 4)), cfg.loss.max_new));
    const auto a = optimize_suffix(m, cases, rset, cfg, QualityRubric{});
    const auto b = optimize_suffix(m, cases, rset, cfg, QualityRubric{});
    if (a.content_json().dump() != b.content_json().dump()) failure = "repeated suffix runs differ";
    double prev = a.initial.loss;
    for (const auto& e : a.trace) {
      if (e.loss > prev) failure = "suffix trace increases at iteration " + std::to_string(e.iter);
      prev = e.loss;
    }
    const auto s1 = optimize_soft(m, cases, rset, cfg, 0.5, 6);
    const auto s2 = optimize_soft(m, cases, rset, cfg, 0.5, 6);
    if (s1.content_json().dump() != s2.content_json().dump()) failure = "repeated soft runs differ";
    for (std::size_t k = 1; k < s1.trace.size(); ++k)
      if (s1.trace[k] > s1.trace[k - 1]) failure = "soft trace increases at step " + std::to_string(k);
  }
  CheckResult r;
  r.name = "descent and determinism";
  r.passed = failure.empty();
  r.detail = failure.empty() ? std::to_string(runs) + " seeded runs, traces non-increasing, repeats identical" : failure;
  r.tolerance = "exact";
  r.seconds = since(t0);
  return r;
}

CheckResult check_model_file(const std::string& path) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.name = "model file";
  r.tolerance = "stored hash equals recomputed hash";
  try {
    const auto m = load_model(path);
    r.passed = true;
    r.detail = path + " hash " + m.hash();
  } catch (const Error& e) {
    r.detail = e.what();
  }
  r.seconds = since(t0);
  return r;
}

}  // namespace sop
