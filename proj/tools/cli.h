#ifndef BRANCHCONNECT_TOOLS_CLI_H_
#define BRANCHCONNECT_TOOLS_CLI_H_

#include <ostream>
#include <string>
#include <vector>

namespace branchconnect::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;

/// Runs the command line `args` (without the program name), writing normal
/// output to `out` and diagnostics to `err`. Returns the process exit code.
int RunCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace branchconnect::cli

#endif  // BRANCHCONNECT_TOOLS_CLI_H_
