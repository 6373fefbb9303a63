#pragma once

// Small string helpers shared by the parsers and renderers.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "optimas/error.hpp"

namespace optimas::text {

inline std::string_view trim(std::string_view s) {
    const auto ws = " \t\r\n";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

inline bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

// Split on '\n'. A trailing newline does not produce an empty final element,
// and "\r\n" endings are normalized.
inline std::vector<std::string> split_lines(std::string_view s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos < s.size()) {
        auto nl = s.find('\n', pos);
        if (nl == std::string_view::npos) nl = s.size();
        auto line = s.substr(pos, nl - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        out.emplace_back(line);
        pos = nl + 1;
    }
    return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

inline std::optional<std::int64_t> parse_int(std::string_view s) {
    s = trim(s);
    if (s.empty()) return std::nullopt;
    if (s.front() == '+') s.remove_prefix(1);
    std::int64_t v{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline std::optional<double> parse_double(std::string_view s) {
    s = trim(s);
    if (s.empty()) return std::nullopt;
    if (s.front() == '+') s.remove_prefix(1);
    double v{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

// Shortest representation that parses back to the same double.
inline std::string shortest(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

inline std::string printf_format(const char* fmt, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

// Whole-percent rendering of a fraction in [0,1]. Floors so that a value just
// under a threshold never renders as the threshold itself (0.699 -> "69").
inline int whole_percent(double fraction) {
    return static_cast<int>(std::floor(fraction * 100.0 + 1e-9));
}

// Zero-padded sequential diagnostic id, e.g. ("PC", 1) -> "PC-01".
inline std::string diag_id(std::string_view prefix, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%02zu", index);
    return std::string(prefix) + "-" + buf;
}

// Truncate to at most max_bytes without splitting a UTF-8 sequence.
inline std::string truncate_utf8(std::string_view s, std::size_t max_bytes) {
    if (s.size() <= max_bytes) return std::string(s);
    std::size_t cut = max_bytes;
    while (cut > 0 && (static_cast<unsigned char>(s[cut]) & 0xC0) == 0x80) --cut;
    return std::string(s.substr(0, cut));
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, std::string_view data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("short write to " + path);
}

// Replace every {key} with its value. Unknown placeholders are left alone.
template <class Map>
std::string substitute(std::string_view tmpl, const Map& values) {
    std::string out;
    std::size_t pos = 0;
    while (pos < tmpl.size()) {
        auto open = tmpl.find('{', pos);
        if (open == std::string_view::npos) break;
        auto close = tmpl.find('}', open);
        if (close == std::string_view::npos) break;
        out.append(tmpl.substr(pos, open - pos));
        std::string key(tmpl.substr(open + 1, close - open - 1));
        auto it = values.find(key);
        if (it != values.end()) {
            out += it->second;
        } else {
            out.append(tmpl.substr(open, close - open + 1));
        }
        pos = close + 1;
    }
    out.append(tmpl.substr(pos));
    return out;
}

// Names of the {placeholders} in a template, in order of appearance.
inline std::vector<std::string> placeholders(std::string_view tmpl) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while ((pos = tmpl.find('{', pos)) != std::string_view::npos) {
        auto close = tmpl.find('}', pos);
        if (close == std::string_view::npos) break;
        out.emplace_back(tmpl.substr(pos + 1, close - pos - 1));
        pos = close + 1;
    }
    return out;
}

} // namespace optimas::text
