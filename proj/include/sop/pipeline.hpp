#pragma once

// Run configuration and the train -> bench -> optimize -> eval stages, shared
// by the command-line tool and the acceptance suite.

#include <cstdint>
#include <string>
#include <vector>

#include "sop/corpus.hpp"
#include "sop/evalharness.hpp"
#include "sop/sopt.hpp"
#include "sop/toylm.hpp"

namespace sop {

struct RunPaths {
  std::string model = "run/model.bin";
  std::string benchmark = "run/benchmark.json";
  std::string artifacts = "run/artifacts";
  std::string reports = "run/reports";

  // All four under `dir`.
  static RunPaths under(const std::string& dir);
};

struct SetSelection {
  std::vector<int> sizes{3, 6, 9};
  int per_size = 5;
};

struct SoftOptions {
  double lr = 0.5;
  int steps = 20;
};

struct EvalOptions {
  std::vector<std::string> methods{"no_restriction", "system_prefix", "system_suffix", "sop_suffix", "logit_mask"};
  std::string judge = "proxy";  // proxy | remote
  std::string remote_url;       // REMOTE_JUDGE_URL overrides
  double judge_timeout_s = 10.0;
  int judge_retries = 2;
  std::string split = "test";
};

struct RunConfig {
  std::uint64_t seed = 1;
  RunPaths paths;
  ModelConfig model;  // vocab_size is taken from the world
  CorpusOptions corpus;
  TrainOptions train;
  BenchOptions bench;
  int min_entries = 20;
  SetSelection sets;
  OptConfig opt;
  SoftOptions soft;
  EvalOptions eval;

  static RunConfig defaults();
  // Sets every seed (corpus, init, training, benchmark, sets, optimizer) from one value.
  void set_seed(std::uint64_t s);
  void validate() const;
  json to_json() const;
  // Strict: unknown or mistyped fields raise SchemaError naming the field.
  // Missing fields keep their defaults.
  static RunConfig from_json(const json& j);
  std::string hash() const;
};

RunConfig load_run_config(const std::string& path);

Model train_model(const RunConfig& cfg, TrainReport* report = nullptr);

// Throws ConfigError listing the dropped terms when fewer than min_entries survive.
BenchBuild build_run_benchmark(const Model& model, const RunConfig& cfg);

struct SelectedSet {
  int size = 0;
  int index = 0;  // within its size
  RestrictionSet rset;

  // File stem for artifacts and reports, e.g. "k6_s2".
  std::string stem() const;
};

// Sets of each size are drawn independently, so selecting a subset of sizes
// yields the same sets as the full run.
std::vector<SelectedSet> select_sets(const Benchmark& bench, const RunConfig& cfg, const std::vector<int>& sizes);

SuffixArtifact optimize_for_set(const Model& model, const Benchmark& bench, const SelectedSet& set, const RunConfig& cfg,
                                const TraceSink& sink = {});
SoftArtifact optimize_soft_for_set(const Model& model, const Benchmark& bench, const SelectedSet& set,
                                   const RunConfig& cfg);

JudgeConfig judge_config(const RunConfig& cfg, const Benchmark& bench);

}  // namespace sop
