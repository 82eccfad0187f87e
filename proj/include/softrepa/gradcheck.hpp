#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace softrepa {

// One verified gradient case. Errors are absolute differences normalized by
// the per-tensor gradient scale max(1e-3, max_i |ref_i|), so a uniform
// finite-difference noise floor maps to a uniform error.
struct GradCheckCase {
  std::string name;
  std::int64_t checked = 0;
  double max_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

struct GradCheckSummary {
  std::vector<GradCheckCase> cases;
  bool all_pass() const;
};

// Three tiers: per-op finite differences on designed small inputs, a
// double-precision MLP backward oracle, and directional finite differences
// through the full contrastive objective (base / soft-token / low-rank
// parameter sets). Deterministic in `seed`.
GradCheckSummary run_gradcheck(std::uint64_t seed);

// One line per case, pass/fail first.
std::string gradcheck_report(const GradCheckSummary& s);

}  // namespace softrepa
