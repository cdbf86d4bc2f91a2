// SPDX-License-Identifier: Apache-2.0
//
// Registry of runtime invariant checks, one per listed invariant of the
// numerics, sparse coding, attention, hierarchy, model and objective modules.

#pragma once

#include <functional>
#include <string>
#include <vector>

namespace absvit::selftest {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Options {
  /// Constant added to every feedback decoder output in model checks.
  double fault_decoder_bias = 0.0;
};

struct Check {
  std::string id;  // "<module>.<invariant>"
  std::string description;
  std::function<Outcome(const Options&)> run;
};

const std::vector<Check>& registry();

/// Modules whose invariants the registry must cover.
const std::vector<std::string>& covered_modules();

/// `check=<id> status=PASS|FAIL seconds=<t> detail="<...>"`
std::string format_line(const Check& check, const Outcome& outcome, double seconds);

struct Report {
  std::vector<std::string> lines;
  int failures = 0;
};

/// Runs every check in registry order. A check that throws fails with the
/// exception message as its detail.
Report run_all(const Options& options, const std::function<void(const std::string&)>& sink = {});

}  // namespace absvit::selftest
