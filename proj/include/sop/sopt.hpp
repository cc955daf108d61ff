#pragma once

// Suffix optimizers: batched greedy coordinate gradient over discrete suffix
// tokens, gradient descent over soft suffix rows, and the verification
// oracles (exhaustive search, finite differences).

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sop/losses.hpp"
#include "sop/quality.hpp"
#include "sop/tokencore.hpp"
#include "sop/toylm.hpp"

namespace sop {

// How independent candidate evaluations are executed. Both produce
// bitwise-identical results; the serial path is the reference.
enum class ExecPolicy { serial, parallel };

struct OptConfig {
  int iterations = 20;
  int batch = 64;
  int topk = 32;
  int suffix_len = 8;
  double early_stop_drop = 0.1;
  std::uint64_t seed = 0;
  LossSpec loss;
  ExecPolicy exec = ExecPolicy::parallel;

  void validate() const;
  // The restriction set is not serialized; artifacts carry its fingerprint.
  json to_json() const;
  static OptConfig from_json(const json& j);
};

struct CandidateSets {
  std::vector<std::vector<TokenId>> positions;
};

// For each row j of grad, the k ids v maximizing -(grad_j . E[v]), lowest id
// first on ties. Ids in `excluded` are never proposed. k is capped at the
// number of eligible ids.
CandidateSets propose_topk(const GradMatrix& grad, std::span<const double> embedding, int vocab_size, int k,
                           std::span<const TokenId> excluded = {});
// Same with the model's embedding; special tokens are excluded.
CandidateSets propose_topk(const GradMatrix& grad, const Model& model, int k);

// B one-position mutations of delta followed by delta itself.
std::vector<TokenSeq> sample_candidates(std::span<const TokenId> delta, const CandidateSets& sets, int batch,
                                        std::mt19937_64& rng);

// Scores every candidate suffix against the scorer's prompts.
std::vector<BatchLoss> score_candidates(const SuffixScorer& scorer, const std::vector<TokenSeq>& candidates,
                                        ExecPolicy exec);

// Sum over prompts of the gradient of the differentiable loss w.r.t. the suffix rows.
DiffLoss summed_suffix_grad(const SuffixScorer& scorer, std::span<const TokenId> delta);

struct StepResult {
  TokenSeq suffix;
  BatchLoss loss;
  int chosen = 0;  // index of the winning candidate
};

StepResult gcg_step(const SuffixScorer& scorer, std::span<const TokenId> delta, const OptConfig& cfg,
                    std::mt19937_64& rng);

struct TraceEntry {
  int iter = 0;
  double loss = 0, l_res = 0, l_qual = 0, l_sem = 0;
  double quality = 0;

  json to_json() const;
  static TraceEntry from_json(const json& j);
  bool operator==(const TraceEntry&) const = default;
};

struct SuffixArtifact {
  TokenSeq suffix;
  std::string suffix_text;
  TokenSeq init;
  TraceEntry initial;
  std::vector<TraceEntry> trace;
  OptConfig config;
  std::vector<std::string> terms;
  std::string model_hash;
  std::string rset_fingerprint;
  bool early_stopped = false;
  bool quality_only = false;
  double seconds = 0;

  // Everything except wall-clock time; equal inputs give equal content.
  json content_json() const;
  json to_json() const;
  static SuffixArtifact from_json(const json& j);
  std::string content_hash() const;
};

// "please exclude words : <terms>" truncated or padded to d tokens.
TokenSeq initial_suffix(const Vocab& vocab, const RestrictionSet& rset, int d);
std::string instruction_text(const RestrictionSet& rset);

using TraceSink = std::function<void(const TraceEntry&)>;

SuffixArtifact optimize_suffix(const Model& model, const std::vector<PromptCase>& cases, const RestrictionSet& rset,
                               const OptConfig& cfg, const QualityRubric& rubric, const TraceSink& sink = {});

struct SoftArtifact {
  SoftSuffix rows;
  TokenSeq projected;
  TokenSeq init;
  std::vector<double> trace;  // differentiable loss before each step and after the last
  std::vector<double> lr_trace;
  OptConfig config;
  double lr = 0;
  int steps = 0;
  std::vector<std::string> terms;
  std::string model_hash;
  std::string rset_fingerprint;
  bool aborted = false;
  std::string abort_reason;
  double seconds = 0;

  json content_json() const;
  json to_json() const;
  static SoftArtifact from_json(const json& j);
  std::string content_hash() const;
};

// Per-row nearest non-special token by cosine similarity.
TokenSeq project_rows(const Model& model, const SoftSuffix& rows);

// Gradient descent on the soft rows. A step that would raise the loss is
// retried with half the learning rate, so the trace never increases.
SoftArtifact optimize_soft(const Model& model, const std::vector<PromptCase>& cases, const RestrictionSet& rset,
                           const OptConfig& cfg, double lr, int steps);

struct BruteForceResult {
  TokenSeq suffix;
  double loss = 0;
  long long evaluated = 0;
};

// Exhaustive search over subset^d in lexicographic order; first minimizer wins.
BruteForceResult brute_force_optimum(const SuffixScorer& scorer, int d, std::vector<TokenId> subset,
                                     ExecPolicy exec = ExecPolicy::parallel);

// Central differences of f over rows [span_begin, span_end) of an n x dim matrix.
GradMatrix finite_diff_grad(const std::function<double(std::span<const double>)>& f, std::vector<double> rows,
                            int dim, int span_begin, int span_end, double h);
GradMatrix finite_diff_grad(const Model& model, std::span<const TokenId> input, int span_begin, int span_end,
                            std::span<const TokenId> y_ref, const LossSpec& spec, double h);

}  // namespace sop
