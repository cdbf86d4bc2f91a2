// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace absvit::cli {

enum ExitCode : int {
  kOk = 0,
  kInvariantFailure = 2,
  kConfigError = 3,  // also usage errors and unreadable checkpoints
  kNumericFailure = 4,
};

/// Parses `args` (without the program name) and runs one verb. Records go to
/// `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace absvit::cli
