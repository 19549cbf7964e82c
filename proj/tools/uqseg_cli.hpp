// Command-line front end shared by the uqseg executable and the tests.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace uqseg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitUsage = 2;

/// Runs one invocation. args excludes the program name, e.g.
/// {"eval", "--manifest", "m.jsonl"}. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace uqseg::cli
