#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mmnet {

/// Command-line entry point. `args` excludes the program name. Returns the process exit code;
/// diagnostics go to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmnet
