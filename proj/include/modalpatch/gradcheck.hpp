#pragma once

// Finite-difference verification of the backward pass: one check per graph
// primitive plus end-to-end checks of the model blocks at small shapes.

#include <cstdint>
#include <string>
#include <vector>

namespace modalpatch::gradcheck {

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
};

inline constexpr double kTolerance = 1e-4;

// Runs every check. Input values are drawn away from the kinks of the
// piecewise-linear ops (relu, clamp, bilinear cell edges), where central
// differences would be meaningless.
std::vector<CheckResult> run_suite(uint64_t seed = 123);

bool all_ok(const std::vector<CheckResult>& results, double tol = kTolerance);

}  // namespace modalpatch::gradcheck
