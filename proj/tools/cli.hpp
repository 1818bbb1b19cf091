#pragma once

#include <iosfwd>

namespace swinscale::cli {

// Exit codes of the swinscale command.
inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kConfigError = 2;
inline constexpr int kNumericalError = 3;

// Parses argv and runs one subcommand. Never throws.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace swinscale::cli
