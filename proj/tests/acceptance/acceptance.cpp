// Runs every acceptance criterion and prints one PASS/FAIL line each.
// Usage: acceptance <path-to-sop-binary> [work-dir]

#include <chrono>
#include <ctime>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sop/evalharness.hpp"
#include "sop/pipeline.hpp"
#include "sop/verify.hpp"

namespace fs = std::filesystem;
using namespace sop;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Process CPU seconds, summed over threads.
double cpu_now() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

struct Line {
  int id;
  std::string name;
  bool passed;
  std::string detail;
  double seconds;
  double limit;
};

std::vector<Line> lines;

void report(int id, const std::string& name, bool passed, const std::string& detail, double seconds, double limit) {
  const bool in_time = seconds < limit;
  lines.push_back({id, name, passed && in_time, detail, seconds, limit});
  std::printf("[%s] %d %s: %s (%.1fs, limit %.0fs)\n", passed && in_time ? "PASS" : "FAIL", id, name.c_str(),
              detail.c_str(), seconds, limit);
  std::fflush(stdout);
}

std::string f3(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.3f", v);
  return b;
}

void from_check(int id, const CheckResult& c, double limit) {
  report(id, c.name, c.passed, c.detail + " [" + c.tolerance + "]", c.seconds, limit);
}

struct SeedResult {
  std::map<std::string, double> r_res, r_qua, r_tok;
  double mask_seconds = 0;
};

// Means over all selected sets of one seed.
SeedResult run_seed(std::uint64_t seed, double* soft_seconds, double* soft_cpu, std::vector<std::string>* soft_failures,
                    std::map<std::string, double>* soft_means) {
  auto cfg = RunConfig::defaults();
  cfg.set_seed(seed);
  const auto model = train_model(cfg);
  const auto bench = build_run_benchmark(model, cfg).benchmark;
  const auto sets = select_sets(bench, cfg, cfg.sets.sizes);
  const auto judge = judge_config(cfg, bench);
  SeedResult out;
  for (const auto& set : sets) {
    const auto art = optimize_for_set(model, bench, set, cfg);
    for (const auto& m : {Method::none(), Method::system_suffix(), Method::sop(art)}) {
      const auto r = evaluate(model, bench, m, set.rset, judge);
      out.r_res[r.method] += r.r_res / sets.size();
      out.r_qua[r.method] += r.r_qua / sets.size();
    }
    const auto t0 = Clock::now();
    const auto r = evaluate(model, bench, Method::logit_mask(), set.rset, judge);
    out.mask_seconds += since(t0);
    out.r_res[r.method] += r.r_res / sets.size();
    out.r_qua[r.method] += r.r_qua / sets.size();
    out.r_tok[r.method] += r.r_res_tokens / sets.size();
    out.r_tok["min_mask"] = std::min(out.r_tok.count("min_mask") ? out.r_tok["min_mask"] : 1.0, r.r_res_tokens);
  }
  if (soft_seconds) {
    const auto t0 = Clock::now();
    const double c0 = cpu_now();
    int n = 0;
    for (const auto& set : sets) {
      if (set.index != 0) continue;
      const auto sa = optimize_soft_for_set(model, bench, set, cfg);
      for (std::size_t k = 1; k < sa.trace.size(); ++k)
        if (sa.trace[k] > sa.trace[k - 1]) soft_failures->push_back(set.stem() + " trace rises at step " + std::to_string(k));
      for (const auto& m : {Method::none(), Method::sop_soft(sa), Method::soft_projected(sa)}) {
        const auto r = evaluate(model, bench, m, set.rset, judge);
        (*soft_means)[r.method] += r.r_res;
      }
      ++n;
    }
    for (auto& [k, v] : *soft_means) v /= n;
    *soft_seconds = since(t0);
    *soft_cpu = cpu_now() - c0;
  }
  return out;
}

int run(const std::string& cmd) {
  std::printf("  $ %s\n", cmd.c_str());
  std::fflush(stdout);
  return std::system((cmd + " > /dev/null").c_str());
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: acceptance <sop-binary> [work-dir]\n");
    return 2;
  }
  const std::string sop_bin = argv[1];
  const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "sop_acceptance";

  from_check(1, check_gradients(50, 11), 60);
  from_check(2, check_loss_identities(12), 10);
  from_check(3, check_oracle_equivalence(20, 13), 300);
  from_check(4, check_descent_determinism(4, 14), 120);

  // Criteria 5-8 share the five-seed desk run.
  {
    const auto t0 = Clock::now();
    const double c0 = cpu_now();
    std::vector<SeedResult> seeds;
    double soft_seconds = 0, soft_cpu = 0;
    std::vector<std::string> soft_failures;
    std::map<std::string, double> soft_means;
    for (std::uint64_t s = 1; s <= 5; ++s) {
      seeds.push_back(run_seed(s, s == 1 ? &soft_seconds : nullptr, &soft_cpu, &soft_failures, &soft_means));
      const auto& r = seeds.back();
      std::printf("  seed %llu  R_res none %s  sys %s  sop %s  mask %s | quality none %s  sys %s  sop %s  mask %s\n",
                  static_cast<unsigned long long>(s), f3(r.r_res.at("no_restriction")).c_str(),
                  f3(r.r_res.at("system_suffix")).c_str(), f3(r.r_res.at("sop_suffix")).c_str(),
                  f3(r.r_res.at("logit_mask")).c_str(), f3(r.r_qua.at("no_restriction")).c_str(),
                  f3(r.r_qua.at("system_suffix")).c_str(), f3(r.r_qua.at("sop_suffix")).c_str(),
                  f3(r.r_qua.at("logit_mask")).c_str());
      std::fflush(stdout);
    }
    const double total = since(t0);
    const double total_cpu = cpu_now() - c0;
    std::map<std::string, double> res, qua;
    int sop_wins = 0;
    double mask_seconds = 0;
    bool mask_tokens = true, mask_quality = true;
    for (const auto& r : seeds) {
      for (const auto& [k, v] : r.r_res) res[k] += v / seeds.size();
      for (const auto& [k, v] : r.r_qua) qua[k] += v / seeds.size();
      if (r.r_res.at("sop_suffix") > r.r_res.at("system_suffix")) ++sop_wins;
      mask_tokens = mask_tokens && r.r_tok.at("min_mask") == 1.0;
      mask_quality = mask_quality && r.r_qua.at("logit_mask") < r.r_qua.at("no_restriction");
      mask_seconds += r.mask_seconds;
    }
    const double qgap = std::abs(qua["sop_suffix"] - qua["system_suffix"]);
    const bool ok5 = res["sop_suffix"] >= res["system_suffix"] && res["system_suffix"] >= res["no_restriction"] &&
                     sop_wins >= 3 && qgap <= 0.15;
    report(5, "directional comparison", ok5,
           "mean R_res sop " + f3(res["sop_suffix"]) + " >= system_suffix " + f3(res["system_suffix"]) +
               " >= none " + f3(res["no_restriction"]) + "; sop ahead in " + std::to_string(sop_wins) +
               "/5 seeds; quality sop " + f3(qua["sop_suffix"]) + " vs system_suffix " + f3(qua["system_suffix"]) +
               " (gap " + f3(qgap) + ", max 0.15); wall " + std::to_string(static_cast<int>(total - soft_seconds)) +
               "s; time shown is CPU",
           total_cpu - soft_cpu, 1200);
    report(6, "benchmark non-triviality", res["no_restriction"] < 0.2,
           "no_restriction mean R_res " + f3(res["no_restriction"]) + " < 0.2", 0, 1);
    report(7, "logit mask", mask_tokens && mask_quality,
           std::string("token-level R_res 1.0 on every set: ") + (mask_tokens ? "yes" : "no") +
               "; quality below no_restriction in every seed: " + (mask_quality ? "yes" : "no") + " (mean " +
               f3(qua["logit_mask"]) + " vs " + f3(qua["no_restriction"]) + ")",
           mask_seconds, 300);
    const bool ok8 = soft_failures.empty() && soft_means.count("sop_soft") && soft_means.count("sop_soft_projected") &&
                     soft_means["sop_soft_projected"] >= res["no_restriction"];
    report(8, "soft suffix", ok8,
           (soft_failures.empty() ? std::string("traces non-increasing") : soft_failures.front()) + "; soft R_res " +
               f3(soft_means["sop_soft"]) + ", projected R_res " + f3(soft_means["sop_soft_projected"]) +
               " >= none " + f3(res["no_restriction"]),
           soft_seconds, 300);
  }

  {
    const auto t0 = Clock::now();
    std::vector<json> hashes;
    bool ok = run(sop_bin + " verify") == 0;
    for (int rep = 0; rep < 2 && ok; ++rep) {
      const auto dir = work / ("run" + std::to_string(rep));
      fs::remove_all(dir);
      const std::string common = " --seed 7 --out " + dir.string();
      for (const char* stage : {"train", "bench", "optimize", "eval"})
        ok = ok && run(sop_bin + " " + stage + common) == 0;
      if (ok) hashes.push_back(read_json(dir / "reports" / "comparison.json").at("report_hashes"));
    }
    const bool same = ok && hashes.size() == 2 && hashes[0] == hashes[1] && !hashes[0].empty();
    report(9, "end-to-end determinism", same,
           !ok ? "a pipeline stage failed"
               : std::to_string(hashes[0].size()) + " report hashes, repeat " + (same ? "identical" : "differs"),
           since(t0), 1800);
  }

  int failed = 0;
  for (const auto& l : lines) failed += !l.passed;
  std::printf("%d/%zu criteria passed\n", static_cast<int>(lines.size()) - failed, lines.size());
  return failed ? 1 : 0;
}
