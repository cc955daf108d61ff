// sop: train -> bench -> optimize -> eval pipeline and the oracle suite.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "sop/errors.hpp"
#include "sop/pipeline.hpp"
#include "sop/verify.hpp"

namespace fs = std::filesystem;
using namespace sop;

namespace {

struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  bool force = false;
  bool print_config = false;
  bool verbose = false;
  bool soft = false;
  std::string judge;
  std::string sets;
};

RunConfig resolve(const Flags& f) {
  auto cfg = f.config.empty() ? RunConfig::defaults() : load_run_config(f.config);
  if (f.seed_set) cfg.set_seed(f.seed);
  if (!f.out.empty()) cfg.paths = RunPaths::under(f.out);
  if (!f.judge.empty()) cfg.eval.judge = f.judge;
  if (const char* url = std::getenv("REMOTE_JUDGE_URL"); url && *url) cfg.eval.remote_url = url;
  cfg.validate();
  return cfg;
}

std::vector<int> parse_sizes(const std::string& s, const RunConfig& cfg) {
  if (s.empty()) return cfg.sets.sizes;
  std::vector<int> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("--sets expects comma-separated sizes, got '" + s + "'");
    }
  }
  return out;
}

void ensure_writable(const std::string& path, bool force) {
  if (fs::exists(path) && !force) throw ConfigError("'" + path + "' exists; pass --force to overwrite");
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw SchemaError(path, e.what());
  }
}

json producer(const std::string& command, const RunConfig& cfg) {
  return json{{"command", command}, {"config", cfg.to_json()}, {"config_hash", cfg.hash()}};
}

Model load_run_model(const RunConfig& cfg) {
  if (!fs::exists(cfg.paths.model)) throw ConfigError("model '" + cfg.paths.model + "' not found; run `sop train` first");
  return load_model(cfg.paths.model);
}

Benchmark load_run_benchmark(const RunConfig& cfg, const Model& model) {
  auto b = load_benchmark(cfg.paths.benchmark, model.vocab());
  if (b.model_hash != model.hash())
    throw ProvenanceError("benchmark '" + cfg.paths.benchmark + "' was built for model " + b.model_hash + ", not " +
                          model.hash());
  return b;
}

std::string artifact_path(const RunConfig& cfg, const SelectedSet& s, bool soft) {
  return cfg.paths.artifacts + "/" + s.stem() + (soft ? ".soft.json" : ".json");
}

int cmd_train(const Flags& f) {
  const auto cfg = resolve(f);
  ensure_writable(cfg.paths.model, f.force);
  const auto t0 = std::chrono::steady_clock::now();
  TrainReport rep;
  const auto model = train_model(cfg, &rep);
  save_model(model, cfg.paths.model);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json(cfg.paths.model + ".json", json{{"producer", producer("train", cfg)},
                                             {"model_hash", model.hash()},
                                             {"initial_heldout_loss", rep.initial_heldout_loss},
                                             {"final_heldout_loss", rep.final_heldout_loss},
                                             {"epoch_train_loss", rep.epoch_train_loss}});
  std::printf("model %s\nhash %s\nheld-out loss %.4f -> %.4f (%.1fs)\n", cfg.paths.model.c_str(), model.hash().c_str(),
              rep.initial_heldout_loss, rep.final_heldout_loss, secs);
  return 0;
}

int cmd_bench(const Flags& f) {
  const auto cfg = resolve(f);
  ensure_writable(cfg.paths.benchmark, f.force);
  const auto model = load_run_model(cfg);
  const auto bb = build_run_benchmark(model, cfg);
  auto j = benchmark_to_json(bb.benchmark);
  j["producer"] = producer("bench", cfg);
  write_json(cfg.paths.benchmark, j);
  std::printf("benchmark %s: %zu terms kept, %zu dropped\n", cfg.paths.benchmark.c_str(), bb.benchmark.entries.size(),
              bb.diagnostics.size());
  for (const auto& e : bb.benchmark.entries)
    std::printf("  %-14s %-8s elicitation %.2f\n", e.term.surface.c_str(), e.category.c_str(), e.elicitation_rate);
  for (const auto& d : bb.diagnostics) std::printf("  %s\n", d.c_str());
  if (bb.benchmark.rubric) std::printf("fluency threshold (ppl) %.4f\n", bb.benchmark.rubric->fluency_ppl);
  return 0;
}

int cmd_optimize(const Flags& f) {
  const auto cfg = resolve(f);
  const auto model = load_run_model(cfg);
  const auto bench = load_run_benchmark(cfg, model);
  fs::create_directories(cfg.paths.artifacts);
  for (const auto& s : select_sets(bench, cfg, parse_sizes(f.sets, cfg))) {
    const auto path = artifact_path(cfg, s, f.soft);
    ensure_writable(path, f.force);
    if (f.soft) {
      auto art = optimize_soft_for_set(model, bench, s, cfg);
      auto j = art.to_json();
      j["producer"] = producer("optimize --soft", cfg);
      write_json(path, j);
      std::printf("%s  loss %.4f -> %.4f  %s%s\n", s.stem().c_str(), art.trace.front(), art.trace.back(),
                  decode(art.projected, model.vocab()).c_str(), art.aborted ? "  (aborted)" : "");
      continue;
    }
    const auto trace_path = cfg.paths.artifacts + "/" + s.stem() + ".trace.jsonl";
    std::ofstream trace(trace_path, std::ios::trunc);
    if (!trace) throw Error("cannot open '" + trace_path + "' for writing");
    auto art = optimize_for_set(model, bench, s, cfg, [&](const TraceEntry& e) {
      trace << e.to_json().dump() << '\n';
      trace.flush();
    });
    auto j = art.to_json();
    j["producer"] = producer("optimize", cfg);
    write_json(path, j);
    const double last = art.trace.empty() ? art.initial.loss : art.trace.back().loss;
    std::printf("%s  loss %.4f -> %.4f  '%s'%s (%.1fs)\n", s.stem().c_str(), art.initial.loss, last,
                art.suffix_text.c_str(), art.early_stopped ? "  early stop" : "", art.seconds);
  }
  return 0;
}

Method method_for(const std::string& name, const RunConfig& cfg, const SelectedSet& s) {
  if (name == "sop_suffix") return Method::sop(SuffixArtifact::from_json(read_json(artifact_path(cfg, s, false))));
  if (name == "sop_soft") return Method::sop_soft(SoftArtifact::from_json(read_json(artifact_path(cfg, s, true))));
  if (name == "sop_soft_projected")
    return Method::soft_projected(SoftArtifact::from_json(read_json(artifact_path(cfg, s, true))));
  switch (method_kind_from_name(name)) {
    case MethodKind::no_restriction: return Method::none();
    case MethodKind::system_prefix: return Method::system_prefix();
    case MethodKind::system_suffix: return Method::system_suffix();
    case MethodKind::logit_mask: return Method::logit_mask();
    default: throw ConfigError("method '" + name + "' needs an artifact");
  }
}

int cmd_eval(const Flags& f) {
  const auto cfg = resolve(f);
  const auto model = load_run_model(cfg);
  const auto bench = load_run_benchmark(cfg, model);
  const auto judge = judge_config(cfg, bench);
  fs::create_directories(cfg.paths.reports);
  std::vector<EvalReport> reports;
  const auto sets = select_sets(bench, cfg, parse_sizes(f.sets, cfg));
  // Fail before any work when an optimized method lacks its artifact.
  for (const auto& name : cfg.eval.methods)
    for (const auto& s : sets) {
      const bool soft = name == "sop_soft" || name == "sop_soft_projected";
      if ((soft || name == "sop_suffix") && !fs::exists(artifact_path(cfg, s, soft)))
        throw ConfigError("missing artifact '" + artifact_path(cfg, s, soft) + "' for " + name + "; run `sop optimize" +
                          (soft ? " --soft" : "") + "` first");
    }
  for (const auto& name : cfg.eval.methods)
    for (const auto& s : sets) {
      const auto path = cfg.paths.reports + "/" + name + "_" + s.stem() + ".json";
      ensure_writable(path, f.force);
      auto rep = evaluate(model, bench, method_for(name, cfg, s), s.rset, judge, cfg.eval.split);
      auto j = rep.to_json();
      j["producer"] = producer("eval", cfg);
      j["content_hash"] = rep.content_hash();
      write_json(path, j);
      if (f.verbose) std::printf("%-20s %-7s R_res %.3f R_qua %.3f  %s\n", name.c_str(), s.stem().c_str(), rep.r_res,
                                 rep.r_qua, rep.content_hash().c_str());
      reports.push_back(std::move(rep));
    }
  const auto table = compare(reports);
  auto tj = table.to_json();
  tj["producer"] = producer("eval", cfg);
  json hashes = json::object();
  for (const auto& r : reports) hashes[r.method + "_" + std::to_string(r.set_size()) + "_" + r.rset_fingerprint] = r.content_hash();
  tj["report_hashes"] = hashes;
  const auto cpath = cfg.paths.reports + "/comparison.json";
  ensure_writable(cpath, f.force);
  write_json(cpath, tj);
  std::ofstream(cfg.paths.reports + "/comparison.txt", std::ios::trunc) << table.to_text();
  std::cout << table.to_text();
  return 0;
}

int cmd_verify(const Flags& f) {
  const auto cfg = resolve(f);
  std::vector<CheckResult> results;
  auto run = [&](CheckResult r) {
    std::printf("%-4s %-24s %7.2fs  %s\n", r.passed ? "ok" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
    if (f.verbose) std::printf("     tolerance: %s\n", r.tolerance.c_str());
    std::fflush(stdout);
    results.push_back(std::move(r));
  };
  run(check_gradients(50, cfg.seed));
  run(check_loss_identities(cfg.seed));
  run(check_oracle_equivalence(20, cfg.seed));
  run(check_descent_determinism(4, cfg.seed));
  if (fs::exists(cfg.paths.model)) run(check_model_file(cfg.paths.model));
  int failed = 0;
  for (const auto& r : results) failed += r.passed ? 0 : 1;
  std::printf("%d/%zu checks passed\n", static_cast<int>(results.size()) - failed, results.size());
  return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Suffix optimization for content restriction on a toy language model"};
  app.require_subcommand(1);
  Flags f;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON run configuration");
    sub->add_option("--seed", f.seed, "Seed for every stage")->each([&](const std::string&) { f.seed_set = true; });
    sub->add_option("--out", f.out, "Put model, benchmark, artifacts and reports under DIR");
    sub->add_flag("--force", f.force, "Overwrite existing outputs");
    sub->add_flag("--print-config", f.print_config, "Print the resolved configuration and exit");
    sub->add_flag("-v,--verbose", f.verbose, "More output");
  };
  auto* train = app.add_subcommand("train", "Train the toy model on the synthetic corpus");
  auto* bench = app.add_subcommand("bench", "Build and validate the benchmark");
  auto* optimize = app.add_subcommand("optimize", "Optimize a suffix per restriction set");
  auto* eval = app.add_subcommand("eval", "Evaluate methods and print the comparison table");
  auto* verify = app.add_subcommand("verify", "Run the oracle checks");
  for (auto* s : {train, bench, optimize, eval, verify}) common(s);
  for (auto* s : {optimize, eval}) s->add_option("--sets", f.sets, "Restriction-set sizes, e.g. 3,6,9");
  optimize->add_flag("--soft", f.soft, "Optimize soft embedding rows instead of tokens");
  eval->add_option("--judge", f.judge, "Quality judge")->check(CLI::IsMember({"proxy", "remote"}));

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(f.verbose ? spdlog::level::info : spdlog::level::warn);
  try {
    if (f.print_config) {
      std::cout << resolve(f).to_json().dump(2) << '\n';
      return 0;
    }
    if (*train) return cmd_train(f);
    if (*bench) return cmd_bench(f);
    if (*optimize) return cmd_optimize(f);
    if (*eval) return cmd_eval(f);
    if (*verify) return cmd_verify(f);
  } catch (const SchemaError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
