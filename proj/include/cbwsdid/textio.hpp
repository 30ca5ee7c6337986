#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cbwsdid {

/// Splits one delimited line. Double-quoted fields may contain the delimiter;
/// `""` inside quotes is a literal quote. Surrounding whitespace is trimmed.
std::vector<std::string> split_delimited(std::string_view line, char delimiter);

/// Empty field or `NA`.
bool is_missing_token(std::string_view s);

std::optional<std::int64_t> parse_integer(std::string_view s);

/// nullopt for missing tokens and anything that is not a finite number.
std::optional<double> parse_real(std::string_view s);

/// Shortest text that reads back to the same double; `NA` for nullopt.
std::string format_real(std::optional<double> x);

/// Fixed significant-digit rendering used by reports.
std::string format_number(double x, int significant = 10);

}  // namespace cbwsdid
