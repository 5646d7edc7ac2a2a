#pragma once

#include <cstdint>
#include <iosfwd>

#include "convivit/model.hpp"

namespace convivit {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitIo = 2, kExitNumerical = 3 };

/// Entry point of the `convivit` tool. Subcommands: train, ablate, infer,
/// gradcheck, export-attention, bench.
/// Model of one ablation cell derived from `base`. Token geometry is kept
/// equal across stem depths.
ModelConfig ablation_model(ModelConfig base, Variant v, std::int64_t blocks);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace convivit
