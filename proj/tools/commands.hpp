#pragma once

#include <string>
#include <vector>

namespace kcal::cli {

// Process exit codes; stable for scripting.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;     // I/O or anything unexpected
inline constexpr int kExitValidation = 2;  // bad flags, files or data
inline constexpr int kExitNumerical = 3;   // non-finite loss or objective

// Parses argv (program name first) and runs one subcommand.
int run(int argc, const char* const* argv);

// Same, for an argument list without the program name.
int run(const std::vector<std::string>& args);

}  // namespace kcal::cli
