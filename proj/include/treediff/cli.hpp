#pragma once

// The `treediff` command line: train-tree, train-diffusion, sample,
// evaluate and ablate.

#include <ostream>

namespace treediff {

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitValidation = 3;
inline constexpr int kExitNumeric = 4;

/// Parses and runs one command. Artifacts go to
/// <runs-dir>/<run-id>/<command>/; the runs directory defaults to
/// $TREEDIFF_RUNS_DIR, else ./runs.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace treediff
