#include "sop/losses.hpp"

#include <algorithm>
#include <cmath>

#include "sop/errors.hpp"
#include "sop/kernels.hpp"

namespace sop {

LossWeights LossWeights::from_json(const json& j) {
  LossWeights w;
  w.res = j.value("res", w.res);
  w.qual = j.value("qual", w.qual);
  w.sem = j.value("sem", w.sem);
  return w;
}

void LossSpec::validate() const {
  if (weights.res < 0 || weights.qual < 0 || weights.sem < 0) throw ConfigError("loss weights must be non-negative");
  if (!(floor_eps > 0.0 && floor_eps < 1.0)) throw ConfigError("floor_eps must lie in (0, 1)");
  if (max_new < 1) throw ConfigError("max_new must be >= 1");
}

PromptCase make_case(const Model& model, TokenSeq prompt, int max_new) {
  auto y = generate_greedy(model, prompt, max_new);
  return PromptCase{std::move(prompt), std::move(y)};
}

json LossBreakdown::to_json() const {
  return json{{"l_res", l_res}, {"l_qual", l_qual}, {"l_sem", l_sem}, {"l_total", l_total}};
}

double combine(const LossWeights& w, double l_res, double l_qual, double l_sem) {
  return w.res * l_res + w.qual * l_qual + w.sem * l_sem;
}

namespace {

// log-softmax of z into logp; returns nothing.
void log_softmax(const double* z, int V, double* logp) {
  const double mx = *std::max_element(z, z + V);
  double sum = 0;
  for (int v = 0; v < V; ++v) sum += std::exp(z[v] - mx);
  const double lse = mx + std::log(sum);
  for (int v = 0; v < V; ++v) logp[v] = z[v] - lse;
}

double restriction_term(const double* logp, const RestrictionSet& rset, double log_eps) {
  double s = 0;
  for (const auto& term : rset.terms())
    for (TokenId r : term.tokens) s += std::max(logp[r], log_eps);
  return s;
}

std::vector<TokenId> concat(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<TokenId> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

std::vector<TokenId> content_tokens(const Vocab& vocab, std::span<const TokenId> seq) {
  std::vector<TokenId> out;
  for (TokenId t : seq)
    if (!vocab.is_special(t)) out.push_back(t);
  return out;
}

void check_y(std::span<const TokenId> y) {
  if (y.empty()) throw LengthError("reference output must be non-empty");
}

}  // namespace

double restriction_loss_at(const Model& model, std::span<const TokenId> input, std::span<const TokenId> y_ref, int t,
                           const RestrictionSet& rset, double eps) {
  if (t < 1 || t > static_cast<int>(y_ref.size()))
    throw LengthError("position " + std::to_string(t) + " outside [1, " + std::to_string(y_ref.size()) + "]");
  if (rset.empty()) return 0.0;
  auto ctx = concat(input, y_ref.first(t - 1));
  const auto p = next_token_dist(model, ctx);
  const double log_eps = std::log(eps);
  double s = 0;
  for (const auto& term : rset.terms())
    for (TokenId r : term.tokens) s += std::max(std::log(p[r]), log_eps);
  return s;
}

double restriction_loss(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> suffix,
                        std::span<const TokenId> y_ref, const RestrictionSet& rset, double eps) {
  check_y(y_ref);
  const auto input = concat(prompt, suffix);
  double s = 0;
  const int T = static_cast<int>(y_ref.size());
  for (int t = 1; t <= T; ++t) s += restriction_loss_at(model, input, y_ref, t, rset, eps);
  return s / T;
}

double quality_loss(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> suffix,
                    std::span<const TokenId> y_base) {
  check_y(y_base);
  auto ctx = concat(prompt, suffix);
  double s = 0;
  for (TokenId y : y_base) {
    const auto p = next_token_dist(model, ctx);
    s -= std::log(p[y]);
    ctx.push_back(y);
  }
  return s;
}

SemanticLoss semantic_loss(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> output) {
  const auto x = content_tokens(model.vocab(), prompt);
  const auto y = content_tokens(model.vocab(), output);
  if (x.empty()) throw LengthError("semantic loss needs a non-empty prompt");
  if (y.empty()) return SemanticLoss{1.0, true};
  const auto ex = sentence_embed(model, x);
  const auto ey = sentence_embed(model, y);
  return SemanticLoss{1.0 - cosine_similarity(ex, ey), false};
}

LossBreakdown total_loss(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> suffix,
                         std::span<const TokenId> y_base, const LossSpec& spec) {
  spec.validate();
  check_y(y_base);
  LossBreakdown b;
  const auto input = concat(prompt, suffix);
  const int T = static_cast<int>(y_base.size());
  for (int t = 1; t <= T; ++t)
    b.per_position.push_back(restriction_loss_at(model, input, y_base, t, spec.rset, spec.floor_eps));
  double s = 0;
  for (double v : b.per_position) s += v;
  b.l_res = s / T;
  b.l_qual = quality_loss(model, prompt, suffix, y_base);
  b.output = generate_greedy(model, input, spec.max_new);
  const auto sem = semantic_loss(model, prompt, b.output);
  b.l_sem = sem.value;
  b.degenerate_output = sem.degenerate;
  b.l_total = combine(spec.weights, b.l_res, b.l_qual, b.l_sem);
  return b;
}

namespace {

BatchLoss mean_of(std::vector<LossBreakdown> parts) {
  BatchLoss out;
  const double n = static_cast<double>(parts.size());
  for (const auto& p : parts) {
    out.l_res += p.l_res;
    out.l_qual += p.l_qual;
    out.l_sem += p.l_sem;
    out.l_total += p.l_total;
  }
  out.l_res /= n;
  out.l_qual /= n;
  out.l_sem /= n;
  out.l_total /= n;
  out.per_prompt = std::move(parts);
  return out;
}

}  // namespace

BatchLoss batch_total_loss(const Model& model, std::span<const PromptCase> cases, std::span<const TokenId> suffix,
                           const LossSpec& spec) {
  if (cases.empty()) throw ConfigError("batch loss needs at least one prompt");
  std::vector<LossBreakdown> parts;
  for (const auto& c : cases) parts.push_back(total_loss(model, c.prompt, suffix, c.base_output, spec));
  return mean_of(std::move(parts));
}

// ---- fast scorer ------------------------------------------------------------------

SuffixScorer::SuffixScorer(const Model& model, std::vector<PromptCase> cases, LossSpec spec)
    : model_(&model), cases_(std::move(cases)), spec_(std::move(spec)) {
  spec_.validate();
  if (cases_.empty()) throw ConfigError("scorer needs at least one prompt");
  prefixes_.reserve(cases_.size());
  for (const auto& c : cases_) {
    if (c.prompt.empty()) throw LengthError("prompt must be non-empty");
    check_y(c.base_output);
    prefixes_.emplace_back(model);
    prefixes_.back().append_tokens(c.prompt);
  }
}

namespace {

struct ForcedPass {
  std::vector<double> logits;  // T x V
  double l_res = 0;
  double l_qual = 0;
  std::vector<double> per_position;
};

// Appends suffix rows then teacher-forces y; decoder ends holding base + T - 1 rows.
ForcedPass forced_pass(const Model& model, Decoder& dec, std::span<const double> suffix_rows,
                       std::span<const TokenId> y, const LossSpec& spec, bool keep_per_position) {
  const int V = model.vocab_size();
  const int d = model.dim();
  const int T = static_cast<int>(y.size());
  const int n_suffix = static_cast<int>(suffix_rows.size() / d);
  if (dec.length() + n_suffix + T - 1 > model.context_len()) throw LengthError("suffixed input exceeds context_len");
  if (n_suffix > 0) dec.append_rows(suffix_rows.data(), n_suffix);
  ForcedPass f;
  f.logits.resize(static_cast<std::size_t>(T) * V);
  std::copy(dec.last_logits().begin(), dec.last_logits().end(), f.logits.begin());
  if (T > 1) dec.append_tokens(y.first(T - 1), f.logits.data() + V);
  std::vector<double> logp(V);
  const double log_eps = std::log(spec.floor_eps);
  double res = 0;
  for (int t = 0; t < T; ++t) {
    log_softmax(f.logits.data() + static_cast<std::size_t>(t) * V, V, logp.data());
    const double r = restriction_term(logp.data(), spec.rset, log_eps);
    if (keep_per_position) f.per_position.push_back(r);
    res += r;
    f.l_qual -= logp[y[t]];
  }
  f.l_res = res / T;
  return f;
}

}  // namespace

LossBreakdown SuffixScorer::score_rows(std::size_t i, std::span<const double> suffix_rows, Decoder& dec) const {
  dec.copy_from(prefixes_.at(i));
  return finish_rows(i, suffix_rows, dec);
}

LossBreakdown SuffixScorer::finish_rows(std::size_t i, std::span<const double> suffix_rows, Decoder& dec) const {
  const auto& c = cases_[i];
  const auto& y = c.base_output;
  const int V = model_->vocab_size();
  const int T = static_cast<int>(y.size());
  const int max_new = spec_.max_new;
  const int n_suffix = static_cast<int>(suffix_rows.size() / model_->dim());
  if (dec.length() + n_suffix + max_new > model_->context_len())
    throw LengthError("prompt plus suffix plus generation exceeds context_len");
  const int base_len = dec.length() + n_suffix;
  auto f = forced_pass(*model_, dec, suffix_rows, y, spec_, true);

  LossBreakdown b;
  b.l_res = f.l_res;
  b.l_qual = f.l_qual;
  b.per_position = std::move(f.per_position);

  // Greedy continuation; teacher-forced rows are reused while it tracks y.
  const TokenId eos = model_->vocab().eos();
  int s = 0;
  while (true) {
    const double* row = f.logits.data() + static_cast<std::size_t>(s) * V;
    const TokenId g = argmax_token(std::span<const double>(row, V));
    b.output.push_back(g);
    if (g == eos || static_cast<int>(b.output.size()) == max_new) break;
    if (g == y[s] && s + 1 < T) {
      ++s;
      continue;
    }
    dec.truncate(base_len + s);
    const TokenId one[1] = {g};
    dec.append_tokens(one);
    auto rest = greedy_continue(*model_, dec, max_new - static_cast<int>(b.output.size()));
    b.output.insert(b.output.end(), rest.begin(), rest.end());
    break;
  }
  const auto sem = semantic_loss(*model_, c.prompt, b.output);
  b.l_sem = sem.value;
  b.degenerate_output = sem.degenerate;
  b.l_total = combine(spec_.weights, b.l_res, b.l_qual, b.l_sem);
  return b;
}

LossBreakdown SuffixScorer::score(std::size_t i, std::span<const TokenId> suffix) const {
  Decoder dec(*model_);
  const auto rows = embed_tokens(*model_, suffix);
  return score_rows(i, rows, dec);
}

BatchLoss SuffixScorer::score_batch(std::span<const TokenId> suffix, Decoder& scratch) const {
  return score_batch_rows(embed_tokens(*model_, suffix), scratch);
}

BatchLoss SuffixScorer::score_batch(std::span<const TokenId> suffix) const {
  Decoder dec(*model_);
  return score_batch(suffix, dec);
}

BatchLoss SuffixScorer::score_batch_rows(std::span<const double> suffix_rows, Decoder& scratch) const {
  std::vector<LossBreakdown> parts;
  parts.reserve(cases_.size());
  for (std::size_t i = 0; i < cases_.size(); ++i) parts.push_back(score_rows(i, suffix_rows, scratch));
  return mean_of(std::move(parts));
}

SuffixScorer::Anchor SuffixScorer::make_anchor(std::span<const TokenId> suffix) const {
  Anchor a;
  a.suffix.assign(suffix.begin(), suffix.end());
  const auto rows = embed_tokens(*model_, suffix);
  a.decoders.reserve(cases_.size());
  for (const auto& p : prefixes_) {
    a.decoders.push_back(p);
    if (!suffix.empty()) a.decoders.back().append_rows(rows.data(), static_cast<int>(suffix.size()));
  }
  return a;
}

BatchLoss SuffixScorer::score_batch(std::span<const TokenId> suffix, const Anchor& anchor, Decoder& scratch) const {
  if (anchor.decoders.size() != cases_.size()) throw ConfigError("anchor built for a different scorer");
  const auto n = std::min(suffix.size(), anchor.suffix.size());
  std::size_t shared = 0;
  while (shared < n && suffix[shared] == anchor.suffix[shared]) ++shared;
  // A truncated decoder has no valid last logits, so at least one row must follow it.
  const bool whole = shared == anchor.suffix.size();
  if (!whole && shared == suffix.size()) {
    if (shared == 0) return score_batch(suffix, scratch);
    --shared;
  }
  const auto tail = embed_tokens(*model_, suffix.subspan(shared));
  std::vector<LossBreakdown> parts;
  parts.reserve(cases_.size());
  for (std::size_t i = 0; i < cases_.size(); ++i) {
    scratch.copy_from(anchor.decoders[i]);
    if (!whole) scratch.truncate(prefixes_[i].length() + static_cast<int>(shared));
    parts.push_back(finish_rows(i, tail, scratch));
  }
  return mean_of(std::move(parts));
}

double SuffixScorer::differentiable_loss_rows(std::size_t i, std::span<const double> suffix_rows, Decoder& dec) const {
  dec.copy_from(prefixes_.at(i));
  const auto f = forced_pass(*model_, dec, suffix_rows, cases_[i].base_output, spec_, false);
  return spec_.weights.res * f.l_res + spec_.weights.qual * f.l_qual;
}

double differentiable_loss(const Model& model, std::span<const double> input_rows, std::span<const TokenId> y_ref,
                           const LossSpec& spec) {
  check_y(y_ref);
  if (input_rows.empty()) throw LengthError("input must be non-empty");
  Decoder dec(model);
  const int d = model.dim();
  // First row goes in on its own so forced_pass sees the remaining rows as the suffix.
  dec.append_rows(input_rows.data(), 1);
  const auto f = forced_pass(model, dec, input_rows.subspan(d), y_ref, spec, false);
  return spec.weights.res * f.l_res + spec.weights.qual * f.l_qual;
}

// ---- gradients --------------------------------------------------------------------

namespace {

DiffLoss grad_from_rows(const Model& model, std::vector<double> rows, int n_in, int span_begin, int span_end,
                        std::span<const TokenId> y, const LossSpec& spec) {
  spec.validate();
  if (spec.include_semantic_in_grad)
    throw ConfigError("semantic loss has no gradient path; include_semantic_in_grad must be false");
  check_y(y);
  if (n_in < 1) throw LengthError("input must be non-empty");
  if (span_begin < 0 || span_end > n_in || span_begin > span_end)
    throw LengthError("suffix span [" + std::to_string(span_begin) + ", " + std::to_string(span_end) +
                      ") outside input of length " + std::to_string(n_in));
  const int d = model.dim();
  const int V = model.vocab_size();
  const int T = static_cast<int>(y.size());
  const auto tail = embed_tokens(model, y.first(T - 1));
  rows.insert(rows.end(), tail.begin(), tail.end());
  const int n = n_in + T - 1;
  const auto cache = forward(model, rows, n_in - 1);

  const double log_eps = std::log(spec.floor_eps);
  const double w_res = spec.weights.res / T;
  const double w_qual = spec.weights.qual;
  std::vector<double> dlogits(static_cast<std::size_t>(T) * V, 0.0);
  std::vector<double> logp(V), p(V);
  double res = 0, qual = 0;
  for (int t = 0; t < T; ++t) {
    log_softmax(cache.logits.data() + static_cast<std::size_t>(t) * V, V, logp.data());
    for (int v = 0; v < V; ++v) p[v] = std::exp(logp[v]);
    double* dz = dlogits.data() + static_cast<std::size_t>(t) * V;
    for (const auto& term : spec.rset.terms()) {
      for (TokenId r : term.tokens) {
        if (logp[r] > log_eps) {
          res += logp[r];
          // d log p_r / dz = onehot(r) - p
          for (int v = 0; v < V; ++v) dz[v] -= w_res * p[v];
          dz[r] += w_res;
        } else {
          res += log_eps;
        }
      }
    }
    qual -= logp[y[t]];
    for (int v = 0; v < V; ++v) dz[v] += w_qual * p[v];
    dz[y[t]] -= w_qual;
  }
  DiffLoss out;
  out.value = spec.weights.res * (res / T) + spec.weights.qual * qual;
  out.grad.rows = span_end - span_begin;
  out.grad.cols = d;
  out.grad.data.assign(static_cast<std::size_t>(out.grad.rows) * d, 0.0);
  if (spec.weights.res == 0.0 && spec.weights.qual == 0.0) return out;
  std::vector<double> drows(static_cast<std::size_t>(n) * d);
  backward(model, cache, dlogits, drows, {});
  std::copy(drows.begin() + static_cast<std::ptrdiff_t>(span_begin) * d,
            drows.begin() + static_cast<std::ptrdiff_t>(span_end) * d, out.grad.data.begin());
  return out;
}

}  // namespace

DiffLoss input_embedding_grad(const Model& model, std::span<const TokenId> input, int span_begin, int span_end,
                              std::span<const TokenId> y_ref, const LossSpec& spec) {
  return grad_from_rows(model, embed_tokens(model, input), static_cast<int>(input.size()), span_begin, span_end, y_ref,
                        spec);
}

DiffLoss suffix_rows_grad(const Model& model, std::span<const TokenId> prompt, std::span<const double> suffix_rows,
                          std::span<const TokenId> y_ref, const LossSpec& spec) {
  const int d = model.dim();
  if (suffix_rows.size() % d != 0) throw ConfigError("suffix rows do not match embed_dim");
  auto rows = embed_tokens(model, prompt);
  rows.insert(rows.end(), suffix_rows.begin(), suffix_rows.end());
  const int n_prompt = static_cast<int>(prompt.size());
  const int n_suffix = static_cast<int>(suffix_rows.size() / d);
  return grad_from_rows(model, std::move(rows), n_prompt + n_suffix, n_prompt, n_prompt + n_suffix, y_ref, spec);
}

}  // namespace sop
