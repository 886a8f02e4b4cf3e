#pragma once

#include <ostream>

namespace citelm {

// Exit codes: 0 success, 1 runtime failure, 2 invalid flags or config.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Subcommands: synth, train, generate, eval, ablate, heatmap.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace citelm
