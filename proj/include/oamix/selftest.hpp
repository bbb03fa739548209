#pragma once

#include <string>
#include <vector>

namespace oamix {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Fast oracle/invariant sweep used by the CLI `selftest` subcommand.
std::vector<CheckResult> run_selftest();

}  // namespace oamix
