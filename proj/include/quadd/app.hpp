#pragma once

// The `quadd` command line: distill, sweep, eval, init, pack, unpack, gen and
// info. Kept in the library so tests can drive it in-process.

#include <iosfwd>
#include <string>
#include <vector>

namespace quadd {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Column names of the CSV tables written by the commands.
extern const std::vector<std::string> kDistillColumns;
extern const std::vector<std::string> kSweepColumns;
extern const std::vector<std::string> kEvalColumns;

// Minimal CSV field splitting (no quoting is ever emitted except for the
// status column, which escapes double quotes).
std::vector<std::string> split_csv_line(const std::string& line);

}  // namespace quadd
