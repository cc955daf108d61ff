#include "sop/sopt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <map>
#include <numeric>

#include <spdlog/spdlog.h>

#include "sop/errors.hpp"
#include "sop/hash.hpp"
#include "sop/kernels.hpp"

namespace sop {

namespace {

const char* exec_name(ExecPolicy e) { return e == ExecPolicy::serial ? "serial" : "parallel"; }

template <class T>
T field(const json& j, const char* name) {
  if (!j.contains(name)) throw SchemaError(name, "missing field");
  try {
    return j.at(name).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError(name, e.what());
  }
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void OptConfig::validate() const {
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (topk < 1) throw ConfigError("topk must be >= 1");
  if (suffix_len < 1) throw ConfigError("suffix_len must be >= 1");
  if (early_stop_drop < 0) throw ConfigError("early_stop_drop must be >= 0");
  loss.validate();
}

json OptConfig::to_json() const {
  return json{{"iterations", iterations},
              {"batch", batch},
              {"topk", topk},
              {"suffix_len", suffix_len},
              {"early_stop_drop", early_stop_drop},
              {"seed", seed},
              {"weights", loss.weights.to_json()},
              {"floor_eps", loss.floor_eps},
              {"max_new", loss.max_new},
              {"exec", exec_name(exec)}};
}

OptConfig OptConfig::from_json(const json& j) {
  OptConfig c;
  c.iterations = field<int>(j, "iterations");
  c.batch = field<int>(j, "batch");
  c.topk = field<int>(j, "topk");
  c.suffix_len = field<int>(j, "suffix_len");
  c.early_stop_drop = field<double>(j, "early_stop_drop");
  c.seed = field<std::uint64_t>(j, "seed");
  c.loss.weights = LossWeights::from_json(field<json>(j, "weights"));
  c.loss.floor_eps = field<double>(j, "floor_eps");
  c.loss.max_new = field<int>(j, "max_new");
  const auto exec = j.value("exec", std::string("parallel"));
  if (exec != "serial" && exec != "parallel") throw SchemaError("exec", "expected serial or parallel");
  c.exec = exec == "serial" ? ExecPolicy::serial : ExecPolicy::parallel;
  c.validate();
  return c;
}

CandidateSets propose_topk(const GradMatrix& grad, std::span<const double> embedding, int vocab_size, int k,
                           std::span<const TokenId> excluded) {
  const int d = grad.cols;
  if (embedding.size() != static_cast<std::size_t>(vocab_size) * d)
    throw ConfigError("embedding shape does not match gradient width");
  if (k < 1) throw ConfigError("k must be >= 1");
  std::vector<char> skip(vocab_size, 0);
  for (TokenId t : excluded)
    if (t >= 0 && t < vocab_size) skip[t] = 1;
  std::vector<TokenId> eligible;
  for (TokenId v = 0; v < vocab_size; ++v)
    if (!skip[v]) eligible.push_back(v);
  if (eligible.empty()) throw ConfigError("no eligible candidate tokens");
  if (k > static_cast<int>(eligible.size())) {
    spdlog::warn("top-k {} exceeds {} eligible tokens; capping", k, eligible.size());
    k = static_cast<int>(eligible.size());
  }

  CandidateSets out;
  std::vector<double> score(vocab_size);
  for (int j = 0; j < grad.rows; ++j) {
    const double* g = grad.data.data() + static_cast<std::size_t>(j) * d;
    for (TokenId v : eligible) score[v] = -kernels::dot(g, embedding.data() + static_cast<std::size_t>(v) * d, d);
    auto ids = eligible;
    std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](TokenId a, TokenId b) {
      return score[a] != score[b] ? score[a] > score[b] : a < b;
    });
    ids.resize(k);
    out.positions.push_back(std::move(ids));
  }
  return out;
}

CandidateSets propose_topk(const GradMatrix& grad, const Model& model, int k) {
  const auto& vocab = model.vocab();
  const TokenId specials[] = {vocab.pad(), vocab.bos(), vocab.eos(), vocab.unk()};
  const std::span<const double> emb(model.at(model.layout().tok_emb),
                                    static_cast<std::size_t>(model.vocab_size()) * model.dim());
  return propose_topk(grad, emb, model.vocab_size(), k, specials);
}

std::vector<TokenSeq> sample_candidates(std::span<const TokenId> delta, const CandidateSets& sets, int batch,
                                        std::mt19937_64& rng) {
  const int d = static_cast<int>(delta.size());
  if (d < 1 || static_cast<int>(sets.positions.size()) != d)
    throw ConfigError("candidate sets must cover every suffix position");
  for (const auto& x : sets.positions)
    if (x.empty()) throw ConfigError("empty candidate set");
  std::vector<TokenSeq> out;
  out.reserve(static_cast<std::size_t>(batch) + 1);
  std::uniform_int_distribution<int> pos(0, d - 1);
  for (int b = 0; b < batch; ++b) {
    const int j = pos(rng);
    const auto& xs = sets.positions[j];
    std::uniform_int_distribution<std::size_t> pick(0, xs.size() - 1);
    TokenSeq c(delta.begin(), delta.end());
    c[j] = xs[pick(rng)];
    out.push_back(std::move(c));
  }
  out.emplace_back(delta.begin(), delta.end());
  return out;
}

std::vector<BatchLoss> score_candidates(const SuffixScorer& scorer, const std::vector<TokenSeq>& candidates,
                                        ExecPolicy exec) {
  std::vector<BatchLoss> out(candidates.size());
  if (candidates.empty()) return out;
  // Sampling repeats some edits; each distinct suffix is scored once.
  std::map<TokenSeq, std::size_t> first;
  std::vector<std::size_t> unique, source(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto [it, fresh] = first.emplace(candidates[i], i);
    if (fresh) unique.push_back(i);
    source[i] = it->second;
  }
  // Candidates are mostly one-token edits of a common suffix; anchoring on the
  // last one lets each skip the rows before its first difference.
  const auto anchor = scorer.make_anchor(candidates.back());
  const auto n = static_cast<long>(unique.size());
  if (exec == ExecPolicy::serial) {
    Decoder dec(scorer.model());
    for (long u = 0; u < n; ++u) out[unique[u]] = scorer.score_batch(candidates[unique[u]], anchor, dec);
  } else {
    std::exception_ptr failure;
#pragma omp parallel
    {
      Decoder dec(scorer.model());
#pragma omp for schedule(dynamic)
      for (long u = 0; u < n; ++u) {
        try {
          out[unique[u]] = scorer.score_batch(candidates[unique[u]], anchor, dec);
        } catch (...) {
#pragma omp critical(sop_score_failure)
          if (!failure) failure = std::current_exception();
        }
      }
    }
    if (failure) std::rethrow_exception(failure);
  }
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (source[i] != i) out[i] = out[source[i]];
  return out;
}

DiffLoss summed_suffix_grad(const SuffixScorer& scorer, std::span<const TokenId> delta) {
  const auto& model = scorer.model();
  const auto rows = embed_tokens(model, delta);
  DiffLoss total;
  total.grad = GradMatrix{static_cast<int>(delta.size()), model.dim(), std::vector<double>(rows.size(), 0.0)};
  for (const auto& c : scorer.cases()) {
    const auto g = suffix_rows_grad(model, c.prompt, rows, c.base_output, scorer.spec());
    total.value += g.value;
    for (std::size_t i = 0; i < rows.size(); ++i) total.grad.data[i] += g.grad.data[i];
  }
  return total;
}

StepResult gcg_step(const SuffixScorer& scorer, std::span<const TokenId> delta, const OptConfig& cfg,
                    std::mt19937_64& rng) {
  const auto grad = summed_suffix_grad(scorer, delta);
  const auto sets = propose_topk(grad.grad, scorer.model(), cfg.topk);
  auto candidates = sample_candidates(delta, sets, cfg.batch, rng);
  auto losses = score_candidates(scorer, candidates, cfg.exec);
  std::size_t best = 0;
  for (std::size_t i = 1; i < losses.size(); ++i)
    if (losses[i].l_total < losses[best].l_total) best = i;
  return StepResult{std::move(candidates[best]), std::move(losses[best]), static_cast<int>(best)};
}

json TraceEntry::to_json() const {
  return json{{"iter", iter}, {"loss", loss}, {"l_res", l_res}, {"l_qual", l_qual}, {"l_sem", l_sem},
              {"quality", quality}};
}

TraceEntry TraceEntry::from_json(const json& j) {
  TraceEntry e;
  e.iter = field<int>(j, "iter");
  e.loss = field<double>(j, "loss");
  e.l_res = field<double>(j, "l_res");
  e.l_qual = field<double>(j, "l_qual");
  e.l_sem = field<double>(j, "l_sem");
  e.quality = j.value("quality", 0.0);
  return e;
}

json SuffixArtifact::content_json() const {
  json trace_j = json::array();
  for (const auto& e : trace) trace_j.push_back(e.to_json());
  return json{{"suffix_ids", suffix},
              {"suffix_text", suffix_text},
              {"init_ids", init},
              {"initial", initial.to_json()},
              {"trace", trace_j},
              {"config", config.to_json()},
              {"terms", terms},
              {"model_hash", model_hash},
              {"rset_fingerprint", rset_fingerprint},
              {"early_stopped", early_stopped},
              {"quality_only", quality_only}};
}

json SuffixArtifact::to_json() const {
  auto j = content_json();
  j["seconds"] = seconds;
  return j;
}

SuffixArtifact SuffixArtifact::from_json(const json& j) {
  SuffixArtifact a;
  a.suffix = field<TokenSeq>(j, "suffix_ids");
  a.suffix_text = field<std::string>(j, "suffix_text");
  a.init = field<TokenSeq>(j, "init_ids");
  if (j.contains("initial")) a.initial = TraceEntry::from_json(j.at("initial"));
  for (const auto& e : field<json>(j, "trace")) a.trace.push_back(TraceEntry::from_json(e));
  a.config = OptConfig::from_json(field<json>(j, "config"));
  a.terms = j.value("terms", std::vector<std::string>{});
  a.model_hash = field<std::string>(j, "model_hash");
  a.rset_fingerprint = field<std::string>(j, "rset_fingerprint");
  a.early_stopped = j.value("early_stopped", false);
  a.quality_only = j.value("quality_only", false);
  a.seconds = j.value("seconds", 0.0);
  if (a.suffix.empty()) throw SchemaError("suffix_ids", "suffix must be non-empty");
  return a;
}

std::string SuffixArtifact::content_hash() const { return hash_hex(content_json().dump()); }

std::string instruction_text(const RestrictionSet& rset) {
  std::string s = "please exclude words :";
  for (const auto& t : rset.terms()) s += " " + t.surface;
  return s;
}

TokenSeq initial_suffix(const Vocab& vocab, const RestrictionSet& rset, int d) {
  if (d < 1) throw ConfigError("suffix length must be >= 1");
  // Pad with the sentence-final period when present, else the first ordinary word.
  TokenId filler = vocab.find(".").value_or(-1);
  if (filler < 0)
    for (TokenId v = 0; v < vocab.size(); ++v)
      if (!vocab.is_special(v)) {
        filler = v;
        break;
      }
  auto tokens = encode(instruction_text(rset), vocab);
  tokens.resize(std::min<std::size_t>(tokens.size(), d));
  // Out-of-vocabulary instruction words would be <unk>, which the optimizer never proposes.
  std::replace(tokens.begin(), tokens.end(), vocab.unk(), filler);
  while (static_cast<int>(tokens.size()) < d) tokens.push_back(filler);
  return tokens;
}

namespace {

TraceEntry entry_of(int iter, const BatchLoss& b, double quality) {
  return TraceEntry{iter, b.l_total, b.l_res, b.l_qual, b.l_sem, quality};
}

double mean_quality(const Model& model, const std::vector<PromptCase>& cases, const BatchLoss& b,
                    const QualityRubric& rubric) {
  double q = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) q += quality_proxy(model, cases[i].prompt, b.per_prompt[i].output, rubric);
  return q / static_cast<double>(cases.size());
}

std::vector<std::string> term_surfaces(const RestrictionSet& rset) {
  std::vector<std::string> out;
  for (const auto& t : rset.terms()) out.push_back(t.surface);
  return out;
}

}  // namespace

SuffixArtifact optimize_suffix(const Model& model, const std::vector<PromptCase>& cases, const RestrictionSet& rset,
                               const OptConfig& cfg, const QualityRubric& rubric, const TraceSink& sink) {
  cfg.validate();
  if (cases.empty()) throw ConfigError("optimization needs at least one prompt");
  const auto t0 = std::chrono::steady_clock::now();
  SuffixArtifact art;
  art.config = cfg;
  art.quality_only = rset.size() == 0;
  if (art.quality_only) spdlog::warn("empty restriction set: optimizing quality terms only");
  art.terms = term_surfaces(rset);
  art.model_hash = model.hash();
  art.rset_fingerprint = rset.fingerprint();

  LossSpec spec = cfg.loss;
  spec.rset = rset;
  const SuffixScorer scorer(model, cases, spec);
  std::mt19937_64 rng(cfg.seed);

  art.init = initial_suffix(model.vocab(), rset, cfg.suffix_len);
  TokenSeq delta = art.init;
  const auto init_loss = scorer.score_batch(delta);
  const double q0 = mean_quality(model, cases, init_loss, rubric);
  art.initial = entry_of(0, init_loss, q0);

  for (int it = 1; it <= cfg.iterations; ++it) {
    auto step = gcg_step(scorer, delta, cfg, rng);
    const double q = mean_quality(model, cases, step.loss, rubric);
    if (q < q0 - cfg.early_stop_drop) {
      // Keep the last suffix whose quality stayed within the allowed drop.
      art.early_stopped = true;
      break;
    }
    delta = std::move(step.suffix);
    art.trace.push_back(entry_of(it, step.loss, q));
    if (sink) sink(art.trace.back());
  }
  art.suffix = delta;
  art.suffix_text = decode(delta, model.vocab());
  art.seconds = elapsed_since(t0);
  return art;
}

json SoftArtifact::content_json() const {
  return json{{"rows", rows.rows},
              {"dim", rows.dim},
              {"data", rows.data},
              {"projected_ids", projected},
              {"init_ids", init},
              {"trace", trace},
              {"lr_trace", lr_trace},
              {"config", config.to_json()},
              {"lr", lr},
              {"steps", steps},
              {"terms", terms},
              {"model_hash", model_hash},
              {"rset_fingerprint", rset_fingerprint},
              {"aborted", aborted},
              {"abort_reason", abort_reason}};
}

json SoftArtifact::to_json() const {
  auto j = content_json();
  j["seconds"] = seconds;
  return j;
}

SoftArtifact SoftArtifact::from_json(const json& j) {
  SoftArtifact a;
  a.rows.rows = field<int>(j, "rows");
  a.rows.dim = field<int>(j, "dim");
  a.rows.data = field<std::vector<double>>(j, "data");
  if (a.rows.data.size() != static_cast<std::size_t>(a.rows.rows) * a.rows.dim)
    throw SchemaError("data", "size does not match rows x dim");
  a.projected = field<TokenSeq>(j, "projected_ids");
  a.init = field<TokenSeq>(j, "init_ids");
  a.trace = field<std::vector<double>>(j, "trace");
  a.lr_trace = j.value("lr_trace", std::vector<double>{});
  a.config = OptConfig::from_json(field<json>(j, "config"));
  a.lr = field<double>(j, "lr");
  a.steps = field<int>(j, "steps");
  a.terms = j.value("terms", std::vector<std::string>{});
  a.model_hash = field<std::string>(j, "model_hash");
  a.rset_fingerprint = field<std::string>(j, "rset_fingerprint");
  a.aborted = j.value("aborted", false);
  a.abort_reason = j.value("abort_reason", std::string{});
  a.seconds = j.value("seconds", 0.0);
  return a;
}

std::string SoftArtifact::content_hash() const { return hash_hex(content_json().dump()); }

TokenSeq project_rows(const Model& model, const SoftSuffix& rows) {
  if (rows.dim != model.dim()) throw ConfigError("soft rows do not match embed_dim");
  const int d = model.dim();
  const auto& vocab = model.vocab();
  std::vector<double> norms(model.vocab_size());
  for (TokenId v = 0; v < model.vocab_size(); ++v)
    norms[v] = std::sqrt(kernels::dot(model.embedding(v), model.embedding(v), d));
  TokenSeq out;
  for (int r = 0; r < rows.rows; ++r) {
    const double* x = rows.data.data() + static_cast<std::size_t>(r) * d;
    const double xn = std::sqrt(kernels::dot(x, x, d));
    TokenId best = -1;
    double best_cos = -2;
    for (TokenId v = 0; v < model.vocab_size(); ++v) {
      if (vocab.is_special(v)) continue;
      const double denom = xn * norms[v];
      const double c = denom > 0 ? kernels::dot(x, model.embedding(v), d) / denom : 0.0;
      if (c > best_cos) {
        best_cos = c;
        best = v;
      }
    }
    out.push_back(best);
  }
  return out;
}

SoftArtifact optimize_soft(const Model& model, const std::vector<PromptCase>& cases, const RestrictionSet& rset,
                           const OptConfig& cfg, double lr, int steps) {
  cfg.validate();
  if (cases.empty()) throw ConfigError("optimization needs at least one prompt");
  if (lr < 0 || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  const auto t0 = std::chrono::steady_clock::now();
  SoftArtifact art;
  art.config = cfg;
  art.lr = lr;
  art.steps = steps;
  art.terms = term_surfaces(rset);
  art.model_hash = model.hash();
  art.rset_fingerprint = rset.fingerprint();

  LossSpec spec = cfg.loss;
  spec.rset = rset;
  const SuffixScorer scorer(model, cases, spec);
  art.init = initial_suffix(model.vocab(), rset, cfg.suffix_len);
  art.rows = SoftSuffix::from_tokens(model, art.init);
  const double n = static_cast<double>(cases.size());

  Decoder dec(model);
  auto value_of = [&](std::span<const double> rows) {
    double v = 0;
    for (std::size_t i = 0; i < cases.size(); ++i) v += scorer.differentiable_loss_rows(i, rows, dec);
    return v / n;
  };

  double current = value_of(art.rows.data);
  art.trace.push_back(current);
  for (int s = 0; s < steps; ++s) {
    std::vector<double> grad(art.rows.data.size(), 0.0);
    for (const auto& c : cases) {
      const auto g = suffix_rows_grad(model, c.prompt, art.rows.data, c.base_output, spec);
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g.grad.data[i] / n;
    }
    if (!std::all_of(grad.begin(), grad.end(), [](double x) { return std::isfinite(x); })) {
      art.aborted = true;
      art.abort_reason = "non-finite gradient at step " + std::to_string(s + 1);
      break;
    }
    double step_lr = lr;
    bool moved = false;
    for (int tries = 0; tries < 30 && step_lr > 0; ++tries, step_lr *= 0.5) {
      auto trial = art.rows.data;
      for (std::size_t i = 0; i < trial.size(); ++i) trial[i] -= step_lr * grad[i];
      const double v = value_of(trial);
      if (std::isfinite(v) && v <= current) {
        art.rows.data = std::move(trial);
        current = v;
        moved = true;
        break;
      }
    }
    art.lr_trace.push_back(moved ? step_lr : 0.0);
    art.trace.push_back(current);
  }
  art.projected = project_rows(model, art.rows);
  art.seconds = elapsed_since(t0);
  return art;
}

BruteForceResult brute_force_optimum(const SuffixScorer& scorer, int d, std::vector<TokenId> subset, ExecPolicy exec) {
  if (d < 1) throw ConfigError("suffix length must be >= 1");
  std::sort(subset.begin(), subset.end());
  subset.erase(std::unique(subset.begin(), subset.end()), subset.end());
  if (subset.empty()) throw ConfigError("empty vocabulary subset");
  double space = 1;
  for (int i = 0; i < d; ++i) space *= static_cast<double>(subset.size());
  if (space > 1e5) throw ConfigError("brute-force search space exceeds 1e5 suffixes");
  const auto total = static_cast<long long>(space);

  BruteForceResult best;
  best.loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> digits(d, 0);
  constexpr long long chunk = 2048;
  for (long long start = 0; start < total; start += chunk) {
    std::vector<TokenSeq> batch;
    for (long long i = start; i < std::min(total, start + chunk); ++i) {
      TokenSeq s(d);
      for (int p = 0; p < d; ++p) s[p] = subset[digits[p]];
      batch.push_back(std::move(s));
      for (int p = d - 1; p >= 0; --p) {
        if (++digits[p] < subset.size()) break;
        digits[p] = 0;
      }
    }
    const auto losses = score_candidates(scorer, batch, exec);
    for (std::size_t i = 0; i < batch.size(); ++i)
      if (losses[i].l_total < best.loss) {
        best.loss = losses[i].l_total;
        best.suffix = batch[i];
      }
    best.evaluated += static_cast<long long>(batch.size());
  }
  return best;
}

GradMatrix finite_diff_grad(const std::function<double(std::span<const double>)>& f, std::vector<double> rows,
                            int dim, int span_begin, int span_end, double h) {
  if (!(h >= 1e-6 && h <= 1e-2)) throw ConfigError("finite-difference step must lie in [1e-6, 1e-2]");
  if (dim < 1 || rows.size() % dim != 0) throw ConfigError("rows do not match dim");
  const int n = static_cast<int>(rows.size() / dim);
  if (span_begin < 0 || span_begin >= span_end || span_end > n) throw LengthError("span outside input");
  GradMatrix g{span_end - span_begin, dim, std::vector<double>(static_cast<std::size_t>(span_end - span_begin) * dim)};
  for (int r = span_begin; r < span_end; ++r)
    for (int c = 0; c < dim; ++c) {
      double& x = rows[static_cast<std::size_t>(r) * dim + c];
      const double keep = x;
      x = keep + h;
      const double fp = f(rows);
      x = keep - h;
      const double fm = f(rows);
      x = keep;
      g.data[static_cast<std::size_t>(r - span_begin) * dim + c] = (fp - fm) / (2 * h);
    }
  return g;
}

GradMatrix finite_diff_grad(const Model& model, std::span<const TokenId> input, int span_begin, int span_end,
                            std::span<const TokenId> y_ref, const LossSpec& spec, double h) {
  const TokenSeq y(y_ref.begin(), y_ref.end());
  return finite_diff_grad([&](std::span<const double> rows) { return differentiable_loss(model, rows, y, spec); },
                          embed_tokens(model, input), model.dim(), span_begin, span_end, h);
}

}  // namespace sop
