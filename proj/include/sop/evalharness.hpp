#pragma once

// Applies restriction methods to benchmark test prompts, measures the
// restriction rate and a quality score, and tabulates comparisons.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sop/corpus.hpp"
#include "sop/quality.hpp"
#include "sop/sopt.hpp"
#include "sop/tokencore.hpp"
#include "sop/toylm.hpp"

namespace sop {

enum class MethodKind { no_restriction, system_prefix, system_suffix, sop_suffix, sop_soft, logit_mask };

const char* method_kind_name(MethodKind k);
MethodKind method_kind_from_name(const std::string& name);

struct Method {
  MethodKind kind = MethodKind::no_restriction;
  std::string label;
  TokenSeq suffix;      // sop_suffix
  SoftSuffix soft;      // sop_soft
  // Provenance of an optimized payload; empty for the baselines.
  std::string model_hash;
  std::string rset_fingerprint;

  static Method none();
  static Method system_prefix();
  static Method system_suffix();
  static Method logit_mask();
  static Method sop(const SuffixArtifact& art);
  static Method sop_soft(const SoftArtifact& art);
  // The soft artifact's nearest-token projection, evaluated as a token suffix.
  static Method soft_projected(const SoftArtifact& art);

  void validate() const;
};

struct TransformedInput {
  TokenSeq tokens;
  SoftSuffix soft;      // appended after tokens when rows > 0
  TokenSeq banned;      // first token of every term, for logit_mask
};

// `prompt` starts with <bos>.
TransformedInput apply_method(std::span<const TokenId> prompt, const Method& method, const RestrictionSet& rset,
                              const Vocab& vocab);

double restriction_rate(const std::vector<TokenSeq>& outputs, const RestrictionSet& rset, const Vocab& vocab);

inline constexpr const char* kJudgeInstruction =
    "Rate the response to the prompt from 0 to 3 for fluency, coherence and relevance. "
    "Reply with JSON {\"rating\": n}.";

struct RemoteJudge {
  std::string endpoint;  // http://host:port/path
  std::string instruction = kJudgeInstruction;
  double timeout_s = 10.0;
  int retries = 2;
};

// One rating in {0, 1, 2, 3}. Timeouts and malformed replies are retried
// `retries` times; an out-of-range rating fails immediately.
int judge_remote(const RemoteJudge& judge, const std::string& prompt, const std::string& response);

struct JudgeConfig {
  enum class Kind { proxy, remote } kind = Kind::proxy;
  QualityRubric rubric;
  RemoteJudge remote;

  std::string name() const { return kind == Kind::proxy ? "proxy" : "remote"; }
};

struct EvalRecord {
  std::string prompt;
  std::string transformed;
  std::string output;
  TokenSeq output_ids;
  bool violated = false;
  bool token_violated = false;
  double quality = 0;

  json to_json() const;
  bool operator==(const EvalRecord&) const = default;
};

struct EvalReport {
  std::string method;  // label
  MethodKind kind = MethodKind::no_restriction;
  std::string rset_fingerprint;
  std::vector<std::string> terms;
  std::vector<EvalRecord> records;
  double r_res = 0;
  double r_res_tokens = 0;  // token-level containment
  double r_qua = 0;
  std::string model_hash;
  std::uint64_t seed = 0;
  std::string judge;

  int set_size() const { return static_cast<int>(terms.size()); }
  json to_json() const;
  static EvalReport from_json(const json& j);
  std::string content_hash() const;
};

EvalReport evaluate(const Model& model, const Benchmark& bench, const Method& method, const RestrictionSet& rset,
                    const JudgeConfig& judge, const std::string& split = "test");

struct ComparisonRow {
  std::string method;
  int set_size = 0;  // 0 = mean over all sizes
  double r_res = 0;
  double r_qua = 0;
  int reports = 0;
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;
  std::string model_hash;

  const ComparisonRow& row(const std::string& method, int set_size) const;
  json to_json() const;
  std::string to_text() const;
};

ComparisonTable compare(const std::vector<EvalReport>& reports);

}  // namespace sop
