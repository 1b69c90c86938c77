#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace crowdstat::csv {

/// Minimal RFC 4180 reader: comma separated, double-quoted fields may hold
/// commas and doubled quotes. Embedded newlines are not supported.
std::vector<std::string> split_row(std::string_view line);

/// Splits text into lines, dropping a trailing '\r' and blank lines. Each
/// entry keeps its 1-based line number in the original text.
struct Line {
  std::size_t number;
  std::string_view text;
};
std::vector<Line> lines(std::string_view text);

/// Quotes a field only when it needs quoting.
std::string escape(std::string_view field);

std::string trim(std::string_view s);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace crowdstat::csv
