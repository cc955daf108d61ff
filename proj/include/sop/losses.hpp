#pragma once

// Restriction, quality and semantic losses and their weighted combination.
//
// All restriction/quality terms are teacher-forced on the cached base output
// y = f(x): position t conditions on x (+) suffix (+) y_<t, and T = |y|.

#include <span>
#include <vector>

#include "sop/tokencore.hpp"
#include "sop/toylm.hpp"

namespace sop {

struct LossWeights {
  double res = 1.0;
  double qual = 1.0;
  double sem = 1.0;

  json to_json() const { return json{{"res", res}, {"qual", qual}, {"sem", sem}}; }
  static LossWeights from_json(const json& j);
  bool operator==(const LossWeights&) const = default;
};

struct LossSpec {
  LossWeights weights;
  RestrictionSet rset;
  double floor_eps = 1e-6;
  bool include_semantic_in_grad = false;
  // Generation budget for base outputs and suffixed outputs.
  int max_new = 10;

  void validate() const;
};

// A prompt together with its cached base output y = greedy(prompt).
struct PromptCase {
  TokenSeq prompt;
  TokenSeq base_output;
};

PromptCase make_case(const Model& model, TokenSeq prompt, int max_new);

struct LossBreakdown {
  double l_res = 0;
  double l_qual = 0;
  double l_sem = 0;
  double l_total = 0;
  std::vector<double> per_position;  // restriction term at t = 1..T
  bool degenerate_output = false;
  TokenSeq output;  // greedy output with the suffix applied

  json to_json() const;
};

double combine(const LossWeights& w, double l_res, double l_qual, double l_sem);

// Restriction term at 1-based position t of y_ref, conditioned on input (+) y_ref_<t.
double restriction_loss_at(const Model& model, std::span<const TokenId> input, std::span<const TokenId> y_ref, int t,
                           const RestrictionSet& rset, double eps);
// Mean of restriction_loss_at over t = 1..|y_ref|.
double restriction_loss(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> suffix,
                        std::span<const TokenId> y_ref, const RestrictionSet& rset, double eps);
// -log p(y_base | prompt (+) suffix).
double quality_loss(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> suffix,
                    std::span<const TokenId> y_base);

struct SemanticLoss {
  double value = 1.0;
  bool degenerate = false;
};
// 1 - cos(e(prompt), e(output)); special tokens are ignored. An output with no
// content tokens yields 1.0 and sets `degenerate`.
SemanticLoss semantic_loss(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> output);

// Reference evaluation of every component for one prompt.
LossBreakdown total_loss(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> suffix,
                         std::span<const TokenId> y_base, const LossSpec& spec);

struct BatchLoss {
  double l_res = 0, l_qual = 0, l_sem = 0, l_total = 0;  // means over prompts
  std::vector<LossBreakdown> per_prompt;
};

BatchLoss batch_total_loss(const Model& model, std::span<const PromptCase> cases, std::span<const TokenId> suffix,
                           const LossSpec& spec);

// Fast path: scores suffixes (token or embedding rows) against a fixed set of
// prompts, reusing each prompt's cached decoder prefix. Results agree with
// total_loss()/batch_total_loss() to rounding.
class SuffixScorer {
 public:
  SuffixScorer(const Model& model, std::vector<PromptCase> cases, LossSpec spec);

  const Model& model() const { return *model_; }
  const std::vector<PromptCase>& cases() const { return cases_; }
  const LossSpec& spec() const { return spec_; }

  LossBreakdown score_rows(std::size_t case_index, std::span<const double> suffix_rows, Decoder& scratch) const;
  LossBreakdown score(std::size_t case_index, std::span<const TokenId> suffix) const;

  BatchLoss score_batch(std::span<const TokenId> suffix, Decoder& scratch) const;
  BatchLoss score_batch(std::span<const TokenId> suffix) const;
  BatchLoss score_batch_rows(std::span<const double> suffix_rows, Decoder& scratch) const;

  // lambda_res * L_res + lambda_qual * L_qual only (the differentiable part).
  double differentiable_loss_rows(std::size_t case_index, std::span<const double> suffix_rows, Decoder& scratch) const;

  // Per-prompt decoders already holding `suffix`. Scoring a suffix through an
  // anchor skips the rows it shares with the anchor's leading tokens; the
  // result is identical to score_batch without one.
  struct Anchor {
    TokenSeq suffix;
    std::vector<Decoder> decoders;
  };
  Anchor make_anchor(std::span<const TokenId> suffix) const;
  BatchLoss score_batch(std::span<const TokenId> suffix, const Anchor& anchor, Decoder& scratch) const;

 private:
  // Appends suffix_rows to a decoder already holding the prompt (and possibly
  // earlier suffix rows), then teacher-forces and generates.
  LossBreakdown finish_rows(std::size_t case_index, std::span<const double> suffix_rows, Decoder& dec) const;

  const Model* model_;
  std::vector<PromptCase> cases_;
  LossSpec spec_;
  std::vector<Decoder> prefixes_;
};

struct GradMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

// Value and exact gradient of lambda_res * L_res + lambda_qual * L_qual with
// respect to the input-embedding rows in [span_begin, span_end) of `input`,
// teacher-forced on y_ref. Throws if the spec asks for the semantic term.
struct DiffLoss {
  double value = 0;
  GradMatrix grad;
};
DiffLoss input_embedding_grad(const Model& model, std::span<const TokenId> input, int span_begin, int span_end,
                              std::span<const TokenId> y_ref, const LossSpec& spec);
// Same, for prompt (+) soft rows; gradient is taken over the soft rows.
DiffLoss suffix_rows_grad(const Model& model, std::span<const TokenId> prompt, std::span<const double> suffix_rows,
                          std::span<const TokenId> y_ref, const LossSpec& spec);
// Differentiable loss for explicit input rows (n_in x d); forward-only, decoder path.
double differentiable_loss(const Model& model, std::span<const double> input_rows, std::span<const TokenId> y_ref,
                           const LossSpec& spec);

}  // namespace sop
