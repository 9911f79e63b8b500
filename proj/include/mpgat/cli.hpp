#pragma once

#include <string>
#include <vector>

namespace mpgat {

// Full command-line interface, runnable in-process for testing. args is the
// argv tail (no program name). Returns the process exit code:
//   0  success (including --help)
//   2  usage error (unknown flag, missing required option, bad subcommand)
//   3  invalid input or configuration (malformed files, inconsistent settings)
//   4  runtime failure (IO errors, training divergence)
int run_cli(const std::vector<std::string>& args);

}  // namespace mpgat
