#pragma once

// Minimal RFC 4180 line codec. Records never span lines in the normalized
// formats, so a quoted field containing a newline is rejected.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace optimas::csv {

// Returns nullopt on an unterminated quote or stray characters after one.
inline std::optional<std::vector<std::string>> split(std::string_view line) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::vector<std::string> fields;
    std::string cur;
    std::size_t i = 0;
    bool field_start = true;
    while (true) {
        if (field_start && i < line.size() && line[i] == '"') {
            ++i;
            while (true) {
                if (i >= line.size()) return std::nullopt;
                if (line[i] == '"') {
                    if (i + 1 < line.size() && line[i + 1] == '"') {
                        cur += '"';
                        i += 2;
                        continue;
                    }
                    ++i;
                    break;
                }
                cur += line[i++];
            }
            if (i < line.size() && line[i] != ',') return std::nullopt;
        } else {
            while (i < line.size() && line[i] != ',') cur += line[i++];
        }
        fields.push_back(std::move(cur));
        cur.clear();
        if (i >= line.size()) break;
        ++i; // comma
        field_start = true;
    }
    return fields;
}

inline std::string quote(std::string_view field) {
    if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

inline std::string join(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += quote(fields[i]);
    }
    return out;
}

} // namespace optimas::csv
