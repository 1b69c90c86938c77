#pragma once

#include <iosfwd>
#include <string>
#include <string_view>

namespace crowdstat::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kInputError = 2;
inline constexpr int kStatError = 3;
inline constexpr int kConfigError = 4;

/// Runs the command line; reports go to files or `out`, diagnostics to `err`.
/// Never throws: errors are mapped to the exit codes above.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Lower-case hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

}  // namespace crowdstat::cli
