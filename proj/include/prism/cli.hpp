#pragma once

#include <ostream>

#include "prism/segmodel.hpp"

namespace prism {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2 };

/// Environment variable naming the default cost-model file.
inline constexpr const char* kCostModelEnv = "PRISM_COST_MODEL";

/// Geometry used by `simulate --numerics`: ViT-Base sequence length and
/// partitioning with a small embedding so the forward pass stays cheap.
ModelConfig numerics_toy_config();

/// Entry point of the `prism` tool. Writes results to `out` and diagnostics
/// to `err`; returns one of ExitCode.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace prism
