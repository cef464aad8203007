// include/olsofu/validate.hpp
//
// The acceptance suite. Shared by `olsofu validate` and the acceptance
// test binary so both run exactly the same checks at the same scales.

#pragma once

#include <functional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "olsofu/numkit.hpp"

namespace olsofu {

struct CheckResult {
  std::string id;
  std::string name;
  double value = 0.0;
  std::string threshold;
  bool pass = false;
  double seconds = 0.0;
  std::string detail;
};

using ProjectionFn = std::function<Vector(std::span<const double>)>;

// Brute-force minimizer of ||p - v||_2 over a grid on the 2-simplex.
Vector grid_projection_oracle(std::span<const double> v, int steps = 1000);

CheckResult check_p1_projection(const ProjectionFn& project);
CheckResult check_p2_gradients();
CheckResult check_p3_bbse_unbiased();
CheckResult check_p4_order_bias();
CheckResult check_p5_bayes_oracle();
CheckResult check_p6_fth_exact();
CheckResult check_p7_regret_decay();
CheckResult check_p8_feature_gain();
CheckResult check_p9_wrapper_degeneracy();
CheckResult check_p10_atlas_pool();
CheckResult check_p11_calibration();
CheckResult check_p12_determinism();

struct CheckEntry {
  std::string id;
  std::function<CheckResult()> run;
};

std::vector<CheckEntry> acceptance_checks();

// Runs the selected checks (all when `only` is empty), printing one line
// per check as it finishes.
std::vector<CheckResult> run_acceptance(const std::set<std::string>& only, std::ostream& out);

std::string format_check_line(const CheckResult& r);

}  // namespace olsofu
