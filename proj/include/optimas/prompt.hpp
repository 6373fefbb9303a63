#pragma once

// Prompt assembly from line-numbered source plus ID-tagged diagnostic
// summaries, chunking of oversized prompts, and parsing of the structured
// model response.
//
// Response grammar:
//   ### OPTIMIZED CODE
//   ```<lang>
//   <full source>
//   ```
//   ### APPLIED
//   - [A1] lines 28-31 | <transformation> | evidence: PC-01, IA-02
//   ### WITHHELD
//   - <candidate> | reason: <reason>

#include <algorithm>
#include <cstdio>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "optimas/error.hpp"
#include "optimas/insight.hpp"
#include "optimas/text.hpp"

namespace optimas::prompt {

using insight::SummaryLine;

class NoDiagnostics : public InvalidArgument {
public:
    NoDiagnostics() : InvalidArgument("prompt needs at least one non-empty diagnostic section") {}
};
class LineTooLong : public InvalidArgument {
public:
    explicit LineTooLong(std::size_t line)
        : InvalidArgument("source line " + std::to_string(line) + " does not fit in a single chunk"), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};
class MissingCodeBlock : public Error {
public:
    explicit MissingCodeBlock(const std::string& why = "no fenced code block under ### OPTIMIZED CODE")
        : Error(why) {}
};
class MultipleCodeBlocks : public Error {
public:
    explicit MultipleCodeBlocks(std::size_t n)
        : Error("expected one fenced code block under ### OPTIMIZED CODE, found " + std::to_string(n)) {}
};

inline constexpr const char* kNoData = "(no data provided)";
inline constexpr const char* kStallHeader = "### STALL ANALYSIS:";
inline constexpr const char* kCounterHeader = "### IMPORTANT HARDWARE COUNTERS:";
inline constexpr const char* kRooflineHeader = "### ROOFLINE ANALYSIS:";
inline constexpr const char* kCodeSection = "### OPTIMIZED CODE";
inline constexpr const char* kAppliedSection = "### APPLIED";
inline constexpr const char* kWithheldSection = "### WITHHELD";
inline constexpr const char* kFeedbackHeader = "# Compiler Feedback";

// ---------------------------------------------------------------------------
// Source numbering
// ---------------------------------------------------------------------------

namespace detail {
// Splits after each '\n', keeping the terminator, so concatenation restores
// the input byte for byte.
inline std::vector<std::string_view> segments(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (pos < s.size()) {
        auto nl = s.find('\n', pos);
        auto end = nl == std::string_view::npos ? s.size() : nl + 1;
        out.push_back(s.substr(pos, end - pos));
        pos = end;
    }
    return out;
}

inline std::string line_prefix(std::size_t n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%4zu| ", n);
    return buf;
}
} // namespace detail

// "a\nb" -> "   1| a\n   2| b". Line terminators are preserved.
inline std::string number_source(std::string_view source, std::size_t first_line = 1) {
    std::string out;
    std::size_t n = first_line;
    for (auto seg : detail::segments(source)) {
        out += detail::line_prefix(n++);
        out.append(seg);
    }
    return out;
}

// Inverse of number_source.
inline std::string strip_line_numbers(std::string_view numbered) {
    std::string out;
    for (auto seg : detail::segments(numbered)) {
        auto bar = seg.find("| ");
        out.append(bar == std::string_view::npos ? seg : seg.substr(bar + 2));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Guardrails
// ---------------------------------------------------------------------------

inline const std::string& response_format_instruction() {
    static const std::string s =
        "Format the reply exactly as follows. A `### OPTIMIZED CODE` section containing exactly one fenced code "
        "block with the complete optimized source. A `### APPLIED` section with one line per edit: "
        "`- [A<n>] lines <start>-<end> | <transformation> | evidence: <ID>, <ID>`, where line numbers refer to the "
        "numbered source above. A `### WITHHELD` section with one line per optimization you considered but did not "
        "apply: `- <optimization> | reason: <reason>`.";
    return s;
}

// Always present in every prompt.
inline std::vector<std::string> mandatory_guardrails() {
    return {
        "Do not change the signature of any kernel or function.",
        "Do not rename or duplicate any kernel or function.",
        "Emit syntactically valid code that compiles as-is, including all headers and the full main function.",
        "Cite the diagnostic evidence IDs (PC-xx, IA-xx, RL-xx) that motivate each edit; do not make edits that "
        "no diagnostic above supports.",
        response_format_instruction(),
    };
}

// Replaceable through configuration.
inline std::vector<std::string> default_pitfall_guardrails() {
    return {
        "Restrict edits to the code regions implicated by the diagnostics.",
        "Preserve program output bit for bit: do not change numerical results, precision, or output formatting.",
        "Do not claim an edit in the APPLIED list that is not present in the emitted code.",
    };
}

// Mandatory set followed by the pitfall list (defaults when `pitfalls` is empty).
inline std::vector<std::string> compose_guardrails(const std::vector<std::string>& pitfalls = {}) {
    auto out = mandatory_guardrails();
    const auto& extra = pitfalls.empty() ? default_pitfall_guardrails() : pitfalls;
    for (const auto& g : extra) {
        if (std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prompt package
// ---------------------------------------------------------------------------

struct PromptInputs {
    std::string source;
    std::vector<SummaryLine> stall_lines;
    std::vector<SummaryLine> counter_lines;
    std::vector<SummaryLine> roofline_lines;
    std::vector<std::string> guardrails;
};

struct PromptPackage {
    std::string prompt_text;
    std::set<std::string> embedded_ids;
    std::string numbered_source;
    std::vector<std::string> guardrails;
    std::size_t chunk_index = 0;
    std::size_t chunk_total = 1;
    std::size_t first_line = 1; // original line number of the first source line
    PromptInputs inputs;        // what this package was rendered from
};

namespace detail {

inline void append_section(std::string& out, const char* header, const std::vector<SummaryLine>& lines,
                           std::set<std::string>& ids) {
    out += header;
    out += '\n';
    if (lines.empty()) {
        out += kNoData;
        out += '\n';
        return;
    }
    for (const auto& l : lines) {
        out += l.render();
        out += '\n';
        ids.insert(l.id);
    }
}

inline PromptPackage render(const PromptInputs& in, std::size_t first_line) {
    PromptPackage pkg;
    pkg.inputs = in;
    pkg.first_line = first_line;
    pkg.guardrails = in.guardrails;
    pkg.numbered_source = number_source(in.source, first_line);

    std::string& out = pkg.prompt_text;
    out += "# Begin Source Code\n";
    out += pkg.numbered_source;
    if (!pkg.numbered_source.empty() && pkg.numbered_source.back() != '\n') out += '\n';
    out += "# End Source Code\n";
    out += "# Begin Performance Analysis\n";
    append_section(out, kStallHeader, in.stall_lines, pkg.embedded_ids);
    append_section(out, kCounterHeader, in.counter_lines, pkg.embedded_ids);
    append_section(out, kRooflineHeader, in.roofline_lines, pkg.embedded_ids);
    out += "# End Performance Analysis\n";
    out += "# Instructions\n";
    out += "Act as a GPU performance engineer. Rewrite the numbered program above to run faster, guided only by the "
           "diagnostics listed in the performance analysis.\n";
    out += "Return the complete rewritten file, headers and main included, and follow these rules:\n";
    for (const auto& g : in.guardrails) {
        out += "- ";
        out += g;
        out += '\n';
    }
    return pkg;
}

} // namespace detail

// Sections appear in the order source, stall, counters, roofline,
// instructions. `pitfalls` replaces the default pitfall guardrails; the
// mandatory guardrails are always included.
inline PromptPackage build_prompt(const std::string& source, const std::vector<SummaryLine>& roofline_lines,
                                  const std::vector<SummaryLine>& stall_lines,
                                  const std::vector<SummaryLine>& counter_lines,
                                  const std::vector<std::string>& pitfalls = {}) {
    if (roofline_lines.empty() && stall_lines.empty() && counter_lines.empty()) throw NoDiagnostics();
    PromptInputs in{source, stall_lines, counter_lines, roofline_lines, compose_guardrails(pitfalls)};
    return detail::render(in, 1);
}

// Splits the source at line boundaries so each chunk's prompt fits in
// limit_chars. Stall lines follow the source lines they point at; counter
// and roofline lines repeat in every chunk.
inline std::vector<PromptPackage> chunk_prompt(const PromptPackage& pkg, std::size_t limit_chars) {
    if (pkg.prompt_text.size() <= limit_chars) {
        auto single = pkg;
        single.chunk_index = 0;
        single.chunk_total = 1;
        return {single};
    }

    auto segs = detail::segments(pkg.inputs.source);
    auto render_range = [&](std::size_t begin, std::size_t end) {
        PromptInputs in = pkg.inputs;
        in.source.clear();
        for (std::size_t i = begin; i < end; ++i) in.source.append(segs[i]);
        const auto first = pkg.first_line + begin;
        const auto last = pkg.first_line + end; // exclusive
        in.stall_lines.clear();
        for (const auto& l : pkg.inputs.stall_lines) {
            if (!l.source_line || (*l.source_line >= static_cast<std::int64_t>(first) &&
                                   *l.source_line < static_cast<std::int64_t>(last))) {
                in.stall_lines.push_back(l);
            }
        }
        return detail::render(in, first);
    };

    if (render_range(0, 0).prompt_text.size() >= limit_chars) {
        throw InvalidArgument("chunk limit " + std::to_string(limit_chars) + " does not exceed the prompt overhead");
    }

    std::vector<PromptPackage> chunks;
    std::size_t begin = 0;
    while (begin < segs.size()) {
        auto best = render_range(begin, begin + 1);
        if (best.prompt_text.size() > limit_chars) throw LineTooLong(pkg.first_line + begin);
        std::size_t end = begin + 1;
        while (end < segs.size()) {
            auto next = render_range(begin, end + 1);
            if (next.prompt_text.size() > limit_chars) break;
            best = std::move(next);
            ++end;
        }
        chunks.push_back(std::move(best));
        begin = end;
    }
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        chunks[i].chunk_index = i;
        chunks[i].chunk_total = chunks.size();
    }
    return chunks;
}

// Appends the tail of a failing compile log so the next attempt can fix it.
inline std::string with_compiler_feedback(const std::string& prompt_text, const std::string& log_tail, int attempt) {
    std::string out = prompt_text;
    if (!out.empty() && out.back() != '\n') out += '\n';
    out += kFeedbackHeader;
    out += '\n';
    out += "Attempt " + std::to_string(attempt) +
           " failed to compile. Return the complete corrected source in the same format; the compiler reported:\n";
    out += log_tail;
    if (!log_tail.empty() && log_tail.back() != '\n') out += '\n';
    out += "# End Compiler Feedback\n";
    return out;
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

struct EditRecord {
    std::string edit_id;
    std::int64_t line_start = 0;
    std::int64_t line_end = 0;
    std::string transformation;
    std::vector<std::string> evidence_ids;
    bool parsed = true; // false: the APPLIED line did not match the grammar; kept verbatim

    bool operator==(const EditRecord&) const = default;
};

struct WithheldItem {
    std::string candidate;
    std::string reason;

    bool operator==(const WithheldItem&) const = default;
};

struct OptimizedArtifact {
    std::string full_source;
    std::vector<EditRecord> applied;
    std::vector<WithheldItem> withheld;
    std::string raw_response;
};

namespace detail {

inline bool is_fence(std::string_view line) { return text::starts_with(text::trim(line), "```"); }

inline std::vector<std::string> split_ids(std::string_view list) {
    std::vector<std::string> ids;
    std::size_t pos = 0;
    while (pos <= list.size()) {
        auto comma = list.find(',', pos);
        if (comma == std::string_view::npos) comma = list.size();
        auto id = text::trim(list.substr(pos, comma - pos));
        if (!id.empty()) ids.emplace_back(id);
        pos = comma + 1;
    }
    return ids;
}

inline bool is_none_marker(std::string_view s) {
    std::string lower;
    for (char c : text::trim(s)) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return lower == "none" || lower == "(none)" || lower == "n/a" || lower == "- none" || lower == "- (none)";
}

} // namespace detail

inline EditRecord parse_applied_line(std::string_view line, std::size_t ordinal) {
    static const std::regex re(R"(^-\s*\[(A\d+)\]\s*lines\s+(\d+)\s*-\s*(\d+)\s*\|\s*(.*?)\s*\|\s*evidence:\s*(.*?)\s*$)");
    std::string s(text::trim(line));
    std::smatch m;
    EditRecord e;
    if (std::regex_match(s, m, re)) {
        e.edit_id = m[1];
        e.line_start = std::stoll(m[2]);
        e.line_end = std::stoll(m[3]);
        e.transformation = m[4];
        e.evidence_ids = detail::split_ids(m[5].str());
        if (e.line_start >= 1 && e.line_start <= e.line_end) return e;
    }
    EditRecord raw;
    raw.edit_id = "U" + std::to_string(ordinal);
    raw.transformation = s;
    raw.parsed = false;
    return raw;
}

inline OptimizedArtifact parse_response(const std::string& raw) {
    enum class Section { none, code, applied, withheld, other };
    OptimizedArtifact art;
    art.raw_response = raw;

    auto lines = text::split_lines(raw);
    const bool has_code_header = std::any_of(lines.begin(), lines.end(), [](const std::string& l) {
        return text::trim(l) == kCodeSection;
    });

    Section section = Section::none;
    bool in_fence = false;
    struct Block {
        bool in_code_section = false;
        std::vector<std::string> lines;
    };
    std::vector<Block> blocks;
    std::vector<std::string> applied_lines, withheld_lines;
    for (const auto& line : lines) {
        if (in_fence) {
            if (detail::is_fence(line)) {
                in_fence = false;
            } else {
                blocks.back().lines.push_back(line);
            }
            continue;
        }
        auto t = text::trim(line);
        if (t == kCodeSection) { section = Section::code; continue; }
        if (t == kAppliedSection) { section = Section::applied; continue; }
        if (t == kWithheldSection) { section = Section::withheld; continue; }
        if (text::starts_with(t, "### ")) { section = Section::other; continue; }
        if (detail::is_fence(line)) {
            const bool counts = has_code_header ? section == Section::code
                                                : (section != Section::applied && section != Section::withheld);
            in_fence = true;
            blocks.push_back({counts, {}});
            continue;
        }
        if (t.empty()) continue;
        if (section == Section::applied) applied_lines.emplace_back(t);
        else if (section == Section::withheld) withheld_lines.emplace_back(t);
    }
    if (in_fence) throw MissingCodeBlock("unterminated fenced code block");

    // Fences outside the code section (e.g. in an APPLIED note) are ignored.
    std::vector<const std::vector<std::string>*> code_blocks;
    for (const auto& b : blocks) {
        if (b.in_code_section) code_blocks.push_back(&b.lines);
    }
    if (code_blocks.empty()) throw MissingCodeBlock();
    if (code_blocks.size() > 1) throw MultipleCodeBlocks(code_blocks.size());
    for (const auto& l : *code_blocks.front()) {
        art.full_source += l;
        art.full_source += '\n';
    }
    if (text::trim(art.full_source).empty()) throw MissingCodeBlock("fenced code block is empty");

    std::set<std::string> ids;
    std::size_t unparsed = 0;
    for (const auto& l : applied_lines) {
        if (detail::is_none_marker(l)) continue;
        auto e = parse_applied_line(l, unparsed + 1);
        if (e.parsed && !ids.insert(e.edit_id).second) {
            e = EditRecord{"U" + std::to_string(unparsed + 1), 0, 0, l, {}, false};
        }
        if (!e.parsed) ++unparsed;
        art.applied.push_back(std::move(e));
    }
    for (const auto& l : withheld_lines) {
        if (detail::is_none_marker(l)) continue;
        std::string_view body = l;
        if (text::starts_with(body, "-")) body = text::trim(body.substr(1));
        WithheldItem w;
        auto bar = body.find("| reason:");
        if (bar == std::string_view::npos) {
            w.candidate = std::string(body);
        } else {
            w.candidate = std::string(text::trim(body.substr(0, bar)));
            w.reason = std::string(text::trim(body.substr(bar + 9)));
        }
        art.withheld.push_back(std::move(w));
    }
    return art;
}

} // namespace optimas::prompt
