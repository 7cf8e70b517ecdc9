#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace uqcal::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitUsage = 2;

/// Runs one subcommand (synth, density-fit, calib-fit, apply, evaluate,
/// report). args excludes the program name. The one-line JSON summary goes to
/// `out`, help text, errors and warnings to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace uqcal::cli
