#pragma once

// Oracle checks shared by `sop verify` and the acceptance suite: finite
// differences against analytic gradients, closed-form loss values, brute
// force against the optimizer, and descent/determinism of optimizer traces.

#include <cstdint>
#include <string>
#include <vector>

namespace sop {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;     // measured quantity
  std::string tolerance;  // what it was compared against
  double seconds = 0;
};

// Max relative error of analytic vs central-difference suffix gradients over
// `instances` random (model, input, weights) draws.
CheckResult check_gradients(int instances, std::uint64_t seed, double h = 1e-4, double tol = 1e-4);

// Weighted-sum identity, L_res bounds and uniform-model closed forms.
CheckResult check_loss_identities(std::uint64_t seed, int instances = 50);

// optimize_suffix vs exhaustive search on tiny instances.
CheckResult check_oracle_equivalence(int trials, std::uint64_t seed, int min_close = 16, double rel = 0.05);

// Every trace non-increasing and repeated runs bitwise identical.
CheckResult check_descent_determinism(int runs, std::uint64_t seed);

// Model file loads and its recorded hash matches its contents.
CheckResult check_model_file(const std::string& path);

}  // namespace sop
