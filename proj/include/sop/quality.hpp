#pragma once

// Rubric-based quality proxy: a 0..3 rating normalized to [0, 1].

#include <span>
#include <vector>

#include "sop/tokencore.hpp"
#include "sop/toylm.hpp"

namespace sop {

struct QualityRubric {
  double fluency_ppl = 50.0;  // perplexity ceiling for the fluency point
  double relevance = 0.3;     // cosine floor for the relevance point
  int min_content = 3;

  json to_json() const;
  static QualityRubric from_json(const json& j);
  bool operator==(const QualityRubric&) const = default;
};

// True when some n-gram (n <= 3) is immediately repeated; single tokens
// count only when they occur three times in a row.
bool has_repetition_loop(std::span<const TokenId> content);

struct QualityDetail {
  double score = 0;
  bool fluent = false;
  bool relevant = false;
  bool no_loop = false;
  double ppl = 0;
  double cosine = 0;
};

QualityDetail quality_detail(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> output,
                             const QualityRubric& rubric);
double quality_proxy(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> output,
                     const QualityRubric& rubric);

// Fluency ceiling = the given percentile of base-output perplexities on `prompts`.
QualityRubric calibrate_rubric(const Model& model, const std::vector<TokenSeq>& prompts, int max_new,
                               double percentile = 90.0, double relevance = 0.3);

}  // namespace sop
