#pragma once

#include <iosfwd>

#include "collab/error.hpp"

namespace collab::cli {

enum ExitCode : int { ok = 0, validation = 1, numeric_failure = 2, io_failure = 3 };

int exit_code(ErrorKind kind);

/// Full command line (argv[0] is the program name). Output goes to `out`,
/// diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace collab::cli
