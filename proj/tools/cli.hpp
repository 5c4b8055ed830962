// Command-line front end, callable in-process for tests.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace kinmap::cli {

enum ExitCode : int {
  kSuccess = 0,
  kFailure = 1,
  kConfigError = 2,
  kIoError = 3,
  kStallEpidemic = 4,  // more than 10% of the fitted pixels of a member stalled
};

/// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kinmap::cli
