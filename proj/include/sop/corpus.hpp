#pragma once

// Desk-scale content-restriction benchmark: a small synthetic world of
// categories, terms and cue words; a training corpus that teaches the toy LM
// cue -> term associations; elicitation prompts validated against the model.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sop/losses.hpp"
#include "sop/quality.hpp"
#include "sop/tokencore.hpp"
#include "sop/toylm.hpp"

namespace sop {

struct TermSpec {
  std::string category;
  std::string surface;
  std::vector<std::string> cues;  // single words associated with the term
};

struct World {
  std::vector<std::string> categories;
  std::vector<TermSpec> terms;
  // Prompt templates with {cat} and {cue} slots; every prompt ends in "answer :".
  std::vector<std::string> templates;

  // Six categories of five terms, four cues each.
  static World builtin();
  // Vocabulary covering every word the corpus, prompts and instructions use.
  Vocab vocab() const;
  void validate() const;
};

struct CorpusOptions {
  int repetitions = 1;
  // Chance that a plain sample is followed by an instructed copy.
  double instruction_share = 0.3;
  // Chance that an instruction lists the answer term itself.
  double listed_share = 2.0 / 3.0;
  int max_listed = 4;
  // The answer is withheld only when it is among the first `attention_span` listed terms.
  int attention_span = 2;
  // Chance of a sample using the generic "do not name it ." request, which is always honoured.
  double generic_share = 0.1;
  // Chance that a plain sample answers in the evasive form; greedy decoding still names the term.
  double plain_evasive_share = 0.0;
  int distractors_per_cue = 1;
};

// Response the base model is taught for a term and cue.
std::string term_response(const TermSpec& term, const std::string& cue);
// Response that answers while avoiding the term.
std::string evasive_response(const TermSpec& term, const std::string& cue);
std::string fill_template(const std::string& tmpl, const std::string& category, const std::string& cue);

std::vector<TokenSeq> synth_training_corpus(const World& world, const Vocab& vocab, const CorpusOptions& opts,
                                            std::uint64_t seed);

std::vector<std::string> generate_prompts(const TermSpec& term, const std::vector<std::string>& templates, int n,
                                          std::uint64_t seed);

struct PromptItem {
  std::string text;
  std::string split;  // "train", "test" or "" before splitting

  bool operator==(const PromptItem&) const = default;
};

struct BenchmarkEntry {
  std::string category;
  RestrictedTerm term;
  std::vector<PromptItem> prompts;
  double elicitation_rate = 0;  // survivors / generated prompts

  std::vector<std::string> prompts_in(const std::string& split) const;
  bool operator==(const BenchmarkEntry&) const = default;
};

struct ValidationResult {
  BenchmarkEntry entry;
  bool kept = false;
  std::string diagnostic;
};

// Keeps prompts whose greedy output contains the term; the entry is dropped
// when fewer than `min_keep` survive.
ValidationResult validate_prompts(const Model& model, BenchmarkEntry entry, int max_new, int min_keep = 5);

// Seeded choice of n_train + n_test prompts, labelled train/test.
BenchmarkEntry split(BenchmarkEntry entry, int n_train, int n_test, std::uint64_t seed);

struct Benchmark {
  std::uint64_t seed = 0;
  std::string model_hash;
  std::vector<std::string> categories;
  std::vector<BenchmarkEntry> entries;
  std::optional<QualityRubric> rubric;
  int max_new = 10;

  const BenchmarkEntry& entry_for(const std::string& surface) const;
  bool operator==(const Benchmark&) const = default;
};

struct BenchOptions {
  int n_prompts = 8;
  int n_train = 3;
  int n_test = 2;
  int max_new = 10;
  std::uint64_t seed = 0;
};

struct BenchBuild {
  Benchmark benchmark;
  std::vector<std::string> diagnostics;
};

BenchBuild build_benchmark(const Model& model, const World& world, const BenchOptions& opts);

std::vector<RestrictionSet> sample_restriction_sets(const Benchmark& bench, const std::vector<int>& sizes,
                                                    int sets_per_size, std::uint64_t seed);

// Prompt cases (with cached base outputs) for the given split of every term in rset.
std::vector<PromptCase> cases_for(const Model& model, const Benchmark& bench, const RestrictionSet& rset,
                                  const std::string& split);

json benchmark_to_json(const Benchmark& bench);
// Schema-checked; unknown fields are ignored with a warning.
Benchmark benchmark_from_json(const json& j, const Vocab& vocab);
void save_benchmark(const Benchmark& bench, const std::string& path);
Benchmark load_benchmark(const std::string& path, const Vocab& vocab);

}  // namespace sop
