#pragma once

#include <string>
#include <vector>

namespace malimg {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one subcommand; args excludes the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace malimg
