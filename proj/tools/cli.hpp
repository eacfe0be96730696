#pragma once

#include <ostream>

namespace xmal::cli {

/// Runs the `xmal` command line. Returns 0 on success, 2 on usage errors and
/// 1 on runtime errors; the last line written to `out` is the status line.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace xmal::cli
