#include "sop/pipeline.hpp"

#include <fstream>
#include <set>

#include "sop/errors.hpp"
#include "sop/hash.hpp"

namespace sop {

namespace {

// Reads optional fields of one JSON object; unknown keys are schema errors.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw SchemaError(path_.empty() ? "config" : path_, "expected an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw SchemaError(path_ + key, e.what());
    }
  }

  const json* object(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return path_ + key + "."; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw SchemaError(path_ + it.key(), "unknown field");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

RunPaths RunPaths::under(const std::string& dir) {
  return RunPaths{dir + "/model.bin", dir + "/benchmark.json", dir + "/artifacts", dir + "/reports"};
}

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.model.embed_dim = 32;
  c.model.n_heads = 2;
  c.model.n_layers = 2;
  c.model.mlp_hidden = 128;
  c.model.context_len = 48;
  c.train.epochs = 15;
  c.train.lr = 3e-3;
  c.corpus.max_listed = 9;
  // The quality term sums over the response while the restriction term averages,
  // so at ~10-token responses a unit weight lets fluency dominate.
  c.opt.loss.weights.qual = 0.2;
  c.set_seed(1);
  return c;
}

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  train.seed = s;
  bench.seed = s;
  opt.seed = s;
}

void RunConfig::validate() const {
  auto mc = model;
  mc.vocab_size = World::builtin().vocab().size();
  mc.validate();
  if (train.epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (bench.n_train < 1 || bench.n_test < 1) throw ConfigError("bench needs train and test prompts");
  if (min_entries < 1) throw ConfigError("min_entries must be >= 1");
  if (sets.sizes.empty() || sets.per_size < 1) throw ConfigError("sets must name at least one size");
  for (int k : sets.sizes)
    if (k < 1) throw ConfigError("set sizes must be >= 1");
  opt.validate();
  if (soft.steps < 0 || soft.lr < 0) throw ConfigError("soft.lr and soft.steps must be >= 0");
  for (const auto& m : eval.methods)
    if (m != "sop_soft_projected") method_kind_from_name(m);
  if (eval.judge != "proxy" && eval.judge != "remote") throw ConfigError("eval.judge must be proxy or remote");
  if (eval.split != "train" && eval.split != "test") throw ConfigError("eval.split must be train or test");
  const std::set<std::string> distinct{paths.model, paths.benchmark, paths.artifacts, paths.reports};
  if (distinct.size() != 4) throw ConfigError("paths must be distinct");
}

json RunConfig::to_json() const {
  return json{
      {"seed", seed},
      {"paths",
       {{"model", paths.model}, {"benchmark", paths.benchmark}, {"artifacts", paths.artifacts}, {"reports", paths.reports}}},
      {"model",
       {{"embed_dim", model.embed_dim},
        {"n_heads", model.n_heads},
        {"n_layers", model.n_layers},
        {"mlp_hidden", model.mlp_hidden},
        {"context_len", model.context_len}}},
      {"corpus",
       {{"repetitions", corpus.repetitions},
        {"instruction_share", corpus.instruction_share},
        {"listed_share", corpus.listed_share},
        {"max_listed", corpus.max_listed},
        {"attention_span", corpus.attention_span},
        {"generic_share", corpus.generic_share},
        {"plain_evasive_share", corpus.plain_evasive_share},
        {"distractors_per_cue", corpus.distractors_per_cue}}},
      {"train",
       {{"epochs", train.epochs},
        {"lr", train.lr},
        {"seed", train.seed},
        {"batch_size", train.batch_size},
        {"holdout_fraction", train.holdout_fraction},
        {"grad_clip", train.grad_clip}}},
      {"bench",
       {{"n_prompts", bench.n_prompts},
        {"n_train", bench.n_train},
        {"n_test", bench.n_test},
        {"max_new", bench.max_new},
        {"seed", bench.seed},
        {"min_entries", min_entries}}},
      {"sets", {{"sizes", sets.sizes}, {"per_size", sets.per_size}}},
      {"optimize", opt.to_json()},
      {"soft", {{"lr", soft.lr}, {"steps", soft.steps}}},
      {"eval",
       {{"methods", eval.methods},
        {"judge", eval.judge},
        {"remote_url", eval.remote_url},
        {"judge_timeout_s", eval.judge_timeout_s},
        {"judge_retries", eval.judge_retries},
        {"split", eval.split}}},
  };
}

RunConfig RunConfig::from_json(const json& j) {
  auto c = defaults();
  Fields top(j, "");
  top.read("seed", c.seed);
  c.set_seed(c.seed);
  if (const auto* p = top.object("paths")) {
    Fields f(*p, top.path("paths"));
    f.read("model", c.paths.model);
    f.read("benchmark", c.paths.benchmark);
    f.read("artifacts", c.paths.artifacts);
    f.read("reports", c.paths.reports);
    f.finish();
  }
  if (const auto* p = top.object("model")) {
    Fields f(*p, top.path("model"));
    f.read("embed_dim", c.model.embed_dim);
    f.read("n_heads", c.model.n_heads);
    f.read("n_layers", c.model.n_layers);
    f.read("mlp_hidden", c.model.mlp_hidden);
    f.read("context_len", c.model.context_len);
    f.finish();
  }
  if (const auto* p = top.object("corpus")) {
    Fields f(*p, top.path("corpus"));
    f.read("repetitions", c.corpus.repetitions);
    f.read("instruction_share", c.corpus.instruction_share);
    f.read("listed_share", c.corpus.listed_share);
    f.read("max_listed", c.corpus.max_listed);
    f.read("attention_span", c.corpus.attention_span);
    f.read("generic_share", c.corpus.generic_share);
    f.read("plain_evasive_share", c.corpus.plain_evasive_share);
    f.read("distractors_per_cue", c.corpus.distractors_per_cue);
    f.finish();
  }
  if (const auto* p = top.object("train")) {
    Fields f(*p, top.path("train"));
    f.read("epochs", c.train.epochs);
    f.read("lr", c.train.lr);
    f.read("seed", c.train.seed);
    f.read("batch_size", c.train.batch_size);
    f.read("holdout_fraction", c.train.holdout_fraction);
    f.read("grad_clip", c.train.grad_clip);
    f.finish();
  }
  if (const auto* p = top.object("bench")) {
    Fields f(*p, top.path("bench"));
    f.read("n_prompts", c.bench.n_prompts);
    f.read("n_train", c.bench.n_train);
    f.read("n_test", c.bench.n_test);
    f.read("max_new", c.bench.max_new);
    f.read("seed", c.bench.seed);
    f.read("min_entries", c.min_entries);
    f.finish();
  }
  if (const auto* p = top.object("sets")) {
    Fields f(*p, top.path("sets"));
    f.read("sizes", c.sets.sizes);
    f.read("per_size", c.sets.per_size);
    f.finish();
  }
  if (const auto* p = top.object("optimize")) {
    Fields f(*p, top.path("optimize"));
    f.read("iterations", c.opt.iterations);
    f.read("batch", c.opt.batch);
    f.read("topk", c.opt.topk);
    f.read("suffix_len", c.opt.suffix_len);
    f.read("early_stop_drop", c.opt.early_stop_drop);
    f.read("seed", c.opt.seed);
    f.read("floor_eps", c.opt.loss.floor_eps);
    f.read("max_new", c.opt.loss.max_new);
    std::string exec = c.opt.exec == ExecPolicy::serial ? "serial" : "parallel";
    f.read("exec", exec);
    if (exec != "serial" && exec != "parallel") throw SchemaError("optimize.exec", "expected serial or parallel");
    c.opt.exec = exec == "serial" ? ExecPolicy::serial : ExecPolicy::parallel;
    if (const auto* w = f.object("weights")) {
      Fields fw(*w, f.path("weights"));
      fw.read("res", c.opt.loss.weights.res);
      fw.read("qual", c.opt.loss.weights.qual);
      fw.read("sem", c.opt.loss.weights.sem);
      fw.finish();
    }
    f.finish();
  }
  if (const auto* p = top.object("soft")) {
    Fields f(*p, top.path("soft"));
    f.read("lr", c.soft.lr);
    f.read("steps", c.soft.steps);
    f.finish();
  }
  if (const auto* p = top.object("eval")) {
    Fields f(*p, top.path("eval"));
    f.read("methods", c.eval.methods);
    f.read("judge", c.eval.judge);
    f.read("remote_url", c.eval.remote_url);
    f.read("judge_timeout_s", c.eval.judge_timeout_s);
    f.read("judge_retries", c.eval.judge_retries);
    f.read("split", c.eval.split);
    f.finish();
  }
  top.finish();
  c.validate();
  return c;
}

std::string RunConfig::hash() const { return hash_hex(to_json().dump()); }

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw SchemaError("config", std::string("not valid JSON: ") + e.what());
  }
  return RunConfig::from_json(j);
}

Model train_model(const RunConfig& cfg, TrainReport* report) {
  const auto world = World::builtin();
  const auto vocab = world.vocab();
  auto mc = cfg.model;
  mc.vocab_size = vocab.size();
  const auto corpus = synth_training_corpus(world, vocab, cfg.corpus, mix(cfg.seed, 1));
  const auto init = Model::init(vocab, mc, mix(cfg.seed, 2));
  return train(init, corpus, cfg.train, report);
}

BenchBuild build_run_benchmark(const Model& model, const RunConfig& cfg) {
  auto bb = build_benchmark(model, World::builtin(), cfg.bench);
  const int kept = static_cast<int>(bb.benchmark.entries.size());
  if (kept < cfg.min_entries) {
    std::string msg = "only " + std::to_string(kept) + " terms survived validation (need " +
                      std::to_string(cfg.min_entries) + ")";
    for (const auto& d : bb.diagnostics) msg += "\n  " + d;
    throw ConfigError(msg);
  }
  return bb;
}

std::string SelectedSet::stem() const { return "k" + std::to_string(size) + "_s" + std::to_string(index); }

std::vector<SelectedSet> select_sets(const Benchmark& bench, const RunConfig& cfg, const std::vector<int>& sizes) {
  std::vector<SelectedSet> out;
  for (int k : sizes) {
    const auto sets = sample_restriction_sets(bench, {k}, cfg.sets.per_size, mix(cfg.seed, 100 + k));
    for (int i = 0; i < static_cast<int>(sets.size()); ++i) out.push_back(SelectedSet{k, i, sets[i]});
  }
  return out;
}

SuffixArtifact optimize_for_set(const Model& model, const Benchmark& bench, const SelectedSet& set, const RunConfig& cfg,
                                const TraceSink& sink) {
  if (!bench.rubric) throw ConfigError("benchmark has no calibrated quality rubric");
  auto oc = cfg.opt;
  oc.seed = mix(cfg.opt.seed, 1000 * set.size + set.index);
  return optimize_suffix(model, cases_for(model, bench, set.rset, "train"), set.rset, oc, *bench.rubric, sink);
}

SoftArtifact optimize_soft_for_set(const Model& model, const Benchmark& bench, const SelectedSet& set,
                                   const RunConfig& cfg) {
  auto oc = cfg.opt;
  oc.seed = mix(cfg.opt.seed, 1000 * set.size + set.index);
  return optimize_soft(model, cases_for(model, bench, set.rset, "train"), set.rset, oc, cfg.soft.lr, cfg.soft.steps);
}

JudgeConfig judge_config(const RunConfig& cfg, const Benchmark& bench) {
  JudgeConfig jc;
  if (!bench.rubric) throw ConfigError("benchmark has no calibrated quality rubric");
  jc.rubric = *bench.rubric;
  if (cfg.eval.judge == "remote") {
    jc.kind = JudgeConfig::Kind::remote;
    jc.remote.endpoint = cfg.eval.remote_url;
    jc.remote.timeout_s = cfg.eval.judge_timeout_s;
    jc.remote.retries = cfg.eval.judge_retries;
    if (jc.remote.endpoint.empty()) throw ConfigError("remote judge needs REMOTE_JUDGE_URL or eval.remote_url");
  }
  return jc;
}

}  // namespace sop
