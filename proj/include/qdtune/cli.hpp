#pragma once

#include <iosfwd>

namespace qdtune::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Parses argv and runs the selected subcommand. Usage errors return 2, runtime failures 1.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace qdtune::cli
