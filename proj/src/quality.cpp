#include "sop/quality.hpp"

#include <algorithm>
#include <cmath>

#include "sop/errors.hpp"

namespace sop {

json QualityRubric::to_json() const {
  return json{{"fluency_ppl", fluency_ppl}, {"relevance", relevance}, {"min_content", min_content}};
}

QualityRubric QualityRubric::from_json(const json& j) {
  QualityRubric r;
  for (const char* f : {"fluency_ppl", "relevance"})
    if (!j.contains(f)) throw SchemaError(f, "quality rubric missing field");
  r.fluency_ppl = j.at("fluency_ppl").get<double>();
  r.relevance = j.at("relevance").get<double>();
  r.min_content = j.value("min_content", 3);
  return r;
}

bool has_repetition_loop(std::span<const TokenId> s) {
  const std::size_t n = s.size();
  for (std::size_t i = 0; i + 2 < n; ++i)
    if (s[i] == s[i + 1] && s[i] == s[i + 2]) return true;
  for (std::size_t len = 2; len <= 3; ++len)
    for (std::size_t i = 0; i + 2 * len <= n; ++i)
      if (std::equal(s.begin() + i, s.begin() + i + len, s.begin() + i + len)) return true;
  return false;
}

QualityDetail quality_detail(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> output,
                             const QualityRubric& rubric) {
  const auto& vocab = model.vocab();
  TokenSeq content;
  for (TokenId t : output)
    if (!vocab.is_special(t)) content.push_back(t);
  QualityDetail d;
  if (static_cast<int>(content.size()) < rubric.min_content) return d;
  TokenSeq joined(prompt.begin(), prompt.end());
  joined.insert(joined.end(), output.begin(), output.end());
  d.ppl = perplexity(model, joined);
  TokenSeq prompt_content;
  for (TokenId t : prompt)
    if (!vocab.is_special(t)) prompt_content.push_back(t);
  if (prompt_content.empty()) throw LengthError("prompt has no content tokens");
  d.cosine = cosine_similarity(sentence_embed(model, prompt_content), sentence_embed(model, content));
  d.fluent = d.ppl <= rubric.fluency_ppl;
  d.relevant = d.cosine >= rubric.relevance;
  d.no_loop = !has_repetition_loop(content);
  d.score = (d.fluent + d.relevant + d.no_loop) / 3.0;
  return d;
}

double quality_proxy(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> output,
                     const QualityRubric& rubric) {
  return quality_detail(model, prompt, output, rubric).score;
}

QualityRubric calibrate_rubric(const Model& model, const std::vector<TokenSeq>& prompts, int max_new, double percentile,
                               double relevance) {
  if (prompts.empty()) throw ConfigError("calibration needs at least one prompt");
  if (percentile < 0 || percentile > 100) throw ConfigError("percentile must lie in [0, 100]");
  std::vector<double> ppls;
  for (const auto& p : prompts) {
    auto joined = p;
    const auto y = generate_greedy(model, p, max_new);
    joined.insert(joined.end(), y.begin(), y.end());
    ppls.push_back(perplexity(model, joined));
  }
  std::sort(ppls.begin(), ppls.end());
  // Nearest-rank percentile.
  const auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * static_cast<double>(ppls.size())));
  QualityRubric r;
  r.fluency_ppl = ppls[std::clamp<std::size_t>(rank, 1, ppls.size()) - 1];
  r.relevance = relevance;
  return r;
}

}  // namespace sop
