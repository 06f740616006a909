#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vesselseg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitVerificationFailed = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the `vesselseg` executable. Exit codes: 0 success,
/// 1 verification or runtime failure, 2 usage or configuration error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vesselseg
