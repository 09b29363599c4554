#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace rifl {

/// Runs the `rifl` command line. `args` excludes the program name. Returns the
/// process exit code; errors go to `err` prefixed with the subcommand.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rifl
