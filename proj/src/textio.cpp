#include "cbwsdid/textio.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>

namespace cbwsdid {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

}  // namespace

std::vector<std::string> split_delimited(std::string_view line, char delimiter) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    bool was_quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                field.push_back('"');
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                field.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
            was_quoted = true;
        } else if (c == delimiter) {
            out.emplace_back(was_quoted ? std::string_view(field) : trim(field));
            field.clear();
            was_quoted = false;
        } else {
            field.push_back(c);
        }
    }
    out.emplace_back(was_quoted ? std::string_view(field) : trim(field));
    return out;
}

bool is_missing_token(std::string_view s) {
    s = trim(s);
    return s.empty() || s == "NA";
}

std::optional<std::int64_t> parse_integer(std::string_view s) {
    s = trim(s);
    if (s.empty()) return std::nullopt;
    if (s.front() == '+') s.remove_prefix(1);
    std::int64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

std::optional<double> parse_real(std::string_view s) {
    s = trim(s);
    if (is_missing_token(s)) return std::nullopt;
    if (s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

std::string format_real(std::optional<double> x) {
    if (!x) return "NA";
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, *x);
    return std::string(buf, ptr);
}

std::string format_number(double x, int significant) {
    if (std::isnan(x)) return "NA";
    if (x == 0.0) return "0";  // folds -0 as well
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", significant, x);
    return buf;
}

}  // namespace cbwsdid
