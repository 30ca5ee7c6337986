#pragma once

#include <iosfwd>

namespace cbwsdid {

inline constexpr int kExitOk = 0;
inline constexpr int kExitEstimation = 1;
inline constexpr int kExitInput = 2;

/**
 * Entry point behind the cbwsdid executable.
 *
 *   cbwsdid estimate   --data panel.csv [options] [--out PREFIX] [--plot chart.svg]
 *   cbwsdid diagnose   --data panel.csv [options] [--out PREFIX]
 *   cbwsdid simulate   [--units S] [--seed N] [--null] [--out panel.csv]
 *   cbwsdid montecarlo [--reps R] [--units S] [--estimators a,b] [--out PREFIX]
 *
 * Every command also takes --config FILE, a JSON object keyed by flag names
 * (without the leading dashes). Flags given on the command line win. Returns
 * 0 on success, 1 when estimation fails and 2 on bad input or configuration.
 */
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cbwsdid
