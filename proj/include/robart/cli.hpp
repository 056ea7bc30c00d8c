#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace robart {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

/// Subcommands: simulate, fit, ate, att, report. args excludes the program
/// name.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli_main(int argc, char** argv);

}  // namespace robart
