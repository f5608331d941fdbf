#pragma once

#include <iosfwd>

namespace lowrank {

inline constexpr int kExitOk = 0;
inline constexpr int kExitAssertion = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the `lowrank` tool. Subcommands: gen-data, train,
/// verify-lemma, verify-bound, noise-diag, sweep, plot.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lowrank
