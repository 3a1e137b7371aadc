#pragma once

#include <iosfwd>

namespace mmnet {

/// Quick oracle and gradient checks; prints one line per check and returns true if all pass.
bool run_selftest(std::ostream& out);

}  // namespace mmnet
