#pragma once

// Registered 64-bit gradient checks, grouped by scope (op, stn, lbp, backbone).

#include <functional>
#include <string>
#include <vector>

#include "tanet/gradcheck.hpp"

namespace tanet {

inline constexpr double kGradCheckTolerance = 1e-5;

struct GradCheckCase {
  std::string name;
  std::string scope;
  std::function<GradCheckResult(double h)> run;
};

/// Every registered check, in a fixed order.
const std::vector<GradCheckCase>& gradcheck_cases();

/// Checks for one scope, or all of them for "all". Unknown scope throws
/// std::invalid_argument.
std::vector<GradCheckCase> gradcheck_cases(const std::string& scope);

const std::vector<std::string>& gradcheck_scopes();

/// Negative control: an op whose backward rule is deliberately wrong
/// (forward doubles, backward claims three times the upstream gradient).
GradCheckCase corrupted_gradcheck_case();

}  // namespace tanet
