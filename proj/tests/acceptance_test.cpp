// Runs every acceptance check and prints one PASS/FAIL line per check.

#include <iostream>

#include "olsofu/validate.hpp"

int main() {
  const auto results = olsofu::run_acceptance({}, std::cout);
  int failed = 0;
  for (const auto& r : results) failed += r.pass ? 0 : 1;
  std::cout << (results.size() - failed) << "/" << results.size() << " acceptance checks passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
