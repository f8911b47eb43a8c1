#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace stgcn::cli {

/// Exit codes shared by the subcommands.
enum ExitCode : int {
  kOk = 0,
  kIoFailure = 1,
  kInvalidConfig = 2,
  kDatasetError = 3,
  kNonFinite = 4,
  kGradCheckFailed = 5,
  kUnstable = 10,
};

/// Runs the command line `args` (without the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace stgcn::cli
