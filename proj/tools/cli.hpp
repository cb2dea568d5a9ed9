#pragma once
// Command-line front end: `f2at <subcommand> [flags]`.

#include <iosfwd>
#include <string>
#include <vector>

namespace f2at::cli {

inline constexpr const char* kToolVersion = "1.0.0";

// Runs one subcommand. Diagnostics go to `err` as a single line; returns the
// process exit status (0 success, 1 runtime failure, 2 rejected input).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace f2at::cli
