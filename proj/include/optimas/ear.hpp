#pragma once

// Evidence-aligned reasoning metrics: evidence coverage, localization
// agreement, directional consistency, and implemented / withheld /
// hallucinated edit accounting.

#include <algorithm>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "optimas/counters.hpp"
#include "optimas/diff.hpp"
#include "optimas/error.hpp"
#include "optimas/ingest.hpp"
#include "optimas/insight.hpp"
#include "optimas/prompt.hpp"

namespace optimas::ear {

inline constexpr int kDefaultWindow = 3;
inline constexpr const char* kNotMeasured = "not-measured";
inline constexpr const char* kFlagEmptyApplied = "empty-applied";
inline constexpr const char* kFlagNoHotspots = "no-hotspots";

enum class DiagnosticKind { pc, ia, rl };

inline const char* to_string(DiagnosticKind k) {
    switch (k) {
    case DiagnosticKind::pc: return "PC";
    case DiagnosticKind::ia: return "IA";
    case DiagnosticKind::rl: return "RL";
    }
    return "?";
}

// What a diagnostic ID in the prompt refers to, so it can be re-measured.
struct EvidenceItem {
    std::string id;
    DiagnosticKind kind = DiagnosticKind::pc;
    std::string kernel;                  // empty for application-wide counters
    std::optional<std::int64_t> source_line;
    std::string stall_type;              // PC
    std::string counter_name;            // IA
    double coefficient = 0;              // IA: signed eOMP coefficient
    std::vector<std::string> resources;  // RL: underutilized "compute" / "memory"
    std::string text;

    bool operator==(const EvidenceItem&) const = default;
};

inline nlohmann::json to_json(const EvidenceItem& e) {
    nlohmann::json j = {{"id", e.id}, {"kind", to_string(e.kind)}, {"kernel", e.kernel}, {"text", e.text}};
    j["source_line"] = e.source_line ? nlohmann::json(*e.source_line) : nlohmann::json(nullptr);
    if (e.kind == DiagnosticKind::pc) j["stall_type"] = e.stall_type;
    if (e.kind == DiagnosticKind::ia) {
        j["counter_name"] = e.counter_name;
        j["coefficient"] = e.coefficient;
    }
    if (e.kind == DiagnosticKind::rl) j["resources"] = e.resources;
    return j;
}

inline EvidenceItem evidence_from_json(const nlohmann::json& j) {
    EvidenceItem e;
    e.id = j.at("id").get<std::string>();
    auto kind = j.at("kind").get<std::string>();
    if (kind == "PC") e.kind = DiagnosticKind::pc;
    else if (kind == "IA") e.kind = DiagnosticKind::ia;
    else if (kind == "RL") e.kind = DiagnosticKind::rl;
    else throw InvalidArgument("unknown evidence kind '" + kind + "'");
    e.kernel = j.value("kernel", "");
    if (j.contains("source_line") && j["source_line"].is_number_integer()) e.source_line = j["source_line"].get<std::int64_t>();
    e.stall_type = j.value("stall_type", "");
    e.counter_name = j.value("counter_name", "");
    e.coefficient = j.value("coefficient", 0.0);
    e.resources = j.value("resources", std::vector<std::string>{});
    e.text = j.value("text", "");
    return e;
}

inline nlohmann::json to_json(const std::vector<EvidenceItem>& items) {
    auto arr = nlohmann::json::array();
    for (const auto& e : items) arr.push_back(to_json(e));
    return arr;
}

inline std::vector<EvidenceItem> evidence_list_from_json(const nlohmann::json& j) {
    std::vector<EvidenceItem> out;
    for (const auto& e : j) out.push_back(evidence_from_json(e));
    return out;
}

// Evidence items for the lines of one analysis.
inline std::vector<EvidenceItem> evidence_for_stalls(const std::vector<insight::SalientStall>& salient,
                                                     const std::vector<insight::SummaryLine>& lines) {
    std::vector<EvidenceItem> out;
    for (std::size_t i = 0; i < lines.size() && i < salient.size(); ++i) {
        EvidenceItem e;
        e.id = lines[i].id;
        e.kind = DiagnosticKind::pc;
        e.kernel = salient[i].kernel_name;
        e.source_line = salient[i].source_line;
        e.stall_type = salient[i].stall_type;
        e.text = lines[i].text;
        out.push_back(std::move(e));
    }
    return out;
}

inline std::vector<EvidenceItem> evidence_for_roofline(const std::vector<insight::RooflineSummary>& summaries) {
    std::vector<EvidenceItem> out;
    for (const auto& s : summaries) {
        for (std::size_t i = 0; i < s.summary_lines.size(); ++i) {
            const auto& l = s.summary_lines[i];
            EvidenceItem e;
            e.id = l.id;
            e.kind = DiagnosticKind::rl;
            e.kernel = s.kernel_name;
            e.text = l.text;
            // Only the utilization sentence (always first) predicts a direction.
            if (i == 0) {
                if (s.compute_state == insight::UtilState::underutilized) e.resources.push_back("compute");
                if (s.memory_state == insight::UtilState::underutilized) e.resources.push_back("memory");
            }
            out.push_back(std::move(e));
        }
    }
    return out;
}

inline std::vector<EvidenceItem> evidence_for_counters(const std::vector<counters::CounterImportance>& selection,
                                                       const std::vector<insight::SummaryLine>& lines) {
    std::vector<EvidenceItem> out;
    for (std::size_t i = 0; i < lines.size() && i < selection.size(); ++i) {
        EvidenceItem e;
        e.id = lines[i].id;
        e.kind = DiagnosticKind::ia;
        e.counter_name = selection[i].counter_name;
        e.coefficient = selection[i].avg_coefficient;
        e.text = lines[i].text;
        out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct PerEdit {
    std::string edit_id;
    bool covered = false;
    bool localized = false;
    bool implemented = false;

    bool operator==(const PerEdit&) const = default;
};

struct KernelDirection {
    std::string kernel;
    int measurable = 0;
    int expected_moves = 0;
    bool consistent = false;

    bool operator==(const KernelDirection&) const = default;
};

struct EARReport {
    double evidence_coverage = 0;
    double localization_agreement = 0;
    std::optional<double> directional_consistency; // nullopt: not measured
    int implemented = 0;
    int withheld = 0;
    int hallucinated = 0;
    std::vector<PerEdit> per_edit;
    std::vector<std::string> flags;
    std::vector<KernelDirection> directional_detail;

    bool operator==(const EARReport&) const = default;
};

inline nlohmann::json to_json(const EARReport& r) {
    nlohmann::json j;
    j["evidence_coverage"] = r.evidence_coverage;
    j["localization_agreement"] = r.localization_agreement;
    j["directional_consistency"] =
        r.directional_consistency ? nlohmann::json(*r.directional_consistency) : nlohmann::json(kNotMeasured);
    j["implemented"] = r.implemented;
    j["withheld"] = r.withheld;
    j["hallucinated"] = r.hallucinated;
    auto edits = nlohmann::json::array();
    for (const auto& e : r.per_edit) {
        edits.push_back({{"edit_id", e.edit_id}, {"covered", e.covered}, {"localized", e.localized}, {"implemented", e.implemented}});
    }
    j["per_edit"] = edits;
    j["flags"] = r.flags;
    auto dirs = nlohmann::json::array();
    for (const auto& d : r.directional_detail) {
        dirs.push_back({{"kernel", d.kernel}, {"measurable", d.measurable}, {"expected_moves", d.expected_moves}, {"consistent", d.consistent}});
    }
    j["directional_detail"] = dirs;
    return j;
}

inline EARReport report_from_json(const nlohmann::json& j) {
    EARReport r;
    r.evidence_coverage = j.at("evidence_coverage").get<double>();
    r.localization_agreement = j.at("localization_agreement").get<double>();
    if (j.at("directional_consistency").is_number()) r.directional_consistency = j["directional_consistency"].get<double>();
    r.implemented = j.at("implemented").get<int>();
    r.withheld = j.at("withheld").get<int>();
    r.hallucinated = j.at("hallucinated").get<int>();
    for (const auto& e : j.value("per_edit", nlohmann::json::array())) {
        r.per_edit.push_back({e.at("edit_id").get<std::string>(), e.value("covered", false), e.value("localized", false),
                              e.value("implemented", false)});
    }
    r.flags = j.value("flags", std::vector<std::string>{});
    for (const auto& d : j.value("directional_detail", nlohmann::json::array())) {
        r.directional_detail.push_back({d.at("kernel").get<std::string>(), d.value("measurable", 0),
                                        d.value("expected_moves", 0), d.value("consistent", false)});
    }
    return r;
}

// ---------------------------------------------------------------------------
// Static metrics
// ---------------------------------------------------------------------------

struct Fraction {
    double value = 0;
    std::optional<std::string> flag;
};

inline bool edit_covered(const prompt::EditRecord& e, const std::set<std::string>& embedded_ids,
                         const std::vector<std::string>& names) {
    for (const auto& id : e.evidence_ids) {
        if (embedded_ids.count(id)) return true;
    }
    for (const auto& n : names) {
        if (!n.empty() && e.transformation.find(n) != std::string::npos) return true;
    }
    return false;
}

// Stall-type and counter names mentioned in the prompt, for the fallback.
inline std::vector<std::string> evidence_names(const std::vector<EvidenceItem>& items) {
    std::set<std::string> s;
    for (const auto& e : items) {
        if (!e.stall_type.empty()) s.insert(e.stall_type);
        if (!e.counter_name.empty()) s.insert(e.counter_name);
    }
    return {s.begin(), s.end()};
}

inline Fraction evidence_coverage(const prompt::OptimizedArtifact& artifact, const std::set<std::string>& embedded_ids,
                                  const std::vector<std::string>& names = {}) {
    if (artifact.applied.empty()) return {0.0, kFlagEmptyApplied};
    std::size_t covered = 0;
    for (const auto& e : artifact.applied) covered += edit_covered(e, embedded_ids, names);
    return {static_cast<double>(covered) / static_cast<double>(artifact.applied.size()), std::nullopt};
}

inline bool edit_localized(const prompt::EditRecord& e, const std::vector<insight::SalientStall>& salient, int window) {
    if (!e.parsed) return false;
    for (const auto& s : salient) {
        if (s.source_line >= e.line_start - window && s.source_line <= e.line_end + window) return true;
    }
    return false;
}

// Salient lines are in original-source coordinates, like the edit ranges.
inline Fraction localization_agreement(const prompt::OptimizedArtifact& artifact,
                                       const std::vector<insight::SalientStall>& salient, int window = kDefaultWindow) {
    if (window < 0) throw InvalidArgument("localization window must be non-negative");
    if (salient.empty()) return {0.0, kFlagNoHotspots};
    if (artifact.applied.empty()) return {0.0, kFlagEmptyApplied};
    std::size_t hit = 0;
    for (const auto& e : artifact.applied) hit += edit_localized(e, salient, window);
    return {static_cast<double>(hit) / static_cast<double>(artifact.applied.size()), std::nullopt};
}

struct Accounting {
    int implemented = 0;
    int withheld = 0;
    int hallucinated = 0;
    std::vector<bool> per_edit;
};

// An applied edit is implemented iff its claimed original-line range touches
// a change in the original → optimized line diff. Unparseable claims count
// as hallucinated.
inline Accounting edit_accounting(const prompt::OptimizedArtifact& artifact, const std::string& original_source) {
    auto changes = diff::change_set(original_source, artifact.full_source);
    Accounting a;
    a.withheld = static_cast<int>(artifact.withheld.size());
    for (const auto& e : artifact.applied) {
        bool ok = e.parsed && changes.touches(static_cast<int>(e.line_start), static_cast<int>(e.line_end));
        a.per_edit.push_back(ok);
        (ok ? a.implemented : a.hallucinated)++;
    }
    return a;
}

// ---------------------------------------------------------------------------
// Directional consistency
// ---------------------------------------------------------------------------

enum class Direction { decrease, increase };

inline const char* to_string(Direction d) { return d == Direction::decrease ? "decrease" : "increase"; }

inline Direction parse_direction(const std::string& s) {
    if (s == "decrease") return Direction::decrease;
    if (s == "increase") return Direction::increase;
    throw InvalidArgument("direction must be 'decrease' or 'increase', got '" + s + "'");
}

// Overrides the default expectation for diagnostic IDs matching `pattern`
// (ECMAScript regex, full match). `metric` optionally swaps the accessor:
// stall_cycles, rho, rho_compute, rho_memory, counter_mean, or counter:<name>.
struct DirectionRule {
    std::string pattern;
    std::string metric;
    Direction expected = Direction::decrease;
};

namespace detail {

inline std::optional<double> stall_cycles(const ingest::DiagnosticBundle& b, const EvidenceItem& e) {
    if (b.stalls.empty() || !e.source_line) return std::nullopt;
    double sum = 0;
    for (const auto& s : b.stalls) {
        if (s.kernel_name == e.kernel && s.source_line == *e.source_line && s.stall_type == e.stall_type) sum += static_cast<double>(s.cycles);
    }
    return sum;
}

inline const ingest::RooflineRaw* roofline_of(const ingest::DiagnosticBundle& b, const std::string& kernel) {
    for (const auto& r : b.roofline) {
        if (r.kernel_name == kernel) return &r;
    }
    return nullptr;
}

inline std::optional<double> rho(const ingest::DiagnosticBundle& b, const std::string& kernel, const std::string& resource) {
    const auto* r = roofline_of(b, kernel);
    if (!r) return std::nullopt;
    if (resource == "compute" && r->peak_compute > 0) return r->achieved_compute / r->peak_compute;
    if (resource == "memory" && r->peak_bandwidth > 0) return r->achieved_bandwidth / r->peak_bandwidth;
    return std::nullopt;
}

inline std::optional<double> counter_mean(const ingest::DiagnosticBundle& b, const std::string& name) {
    if (!b.counters) return std::nullopt;
    return b.counters->column_mean(name);
}

inline bool moved(double pre, double post, Direction d) { return d == Direction::decrease ? post < pre : post > pre; }

} // namespace detail

// nullopt: not measurable in one of the bundles. Otherwise whether the
// diagnostic moved (strictly) in its expected direction.
inline std::optional<bool> diagnostic_moved(const EvidenceItem& e, const ingest::DiagnosticBundle& pre,
                                            const ingest::DiagnosticBundle& post, const std::vector<DirectionRule>& rules) {
    std::optional<Direction> expected;
    std::string metric;
    for (const auto& r : rules) {
        if (std::regex_match(e.id, std::regex(r.pattern))) {
            expected = r.expected;
            metric = r.metric;
            break;
        }
    }

    auto compare = [&](std::optional<double> a, std::optional<double> b, Direction d) -> std::optional<bool> {
        if (!a || !b) return std::nullopt;
        return detail::moved(*a, *b, d);
    };

    if (metric.empty()) {
        switch (e.kind) {
        case DiagnosticKind::pc: metric = "stall_cycles"; break;
        case DiagnosticKind::rl: metric = "rho"; break;
        case DiagnosticKind::ia: metric = "counter_mean"; break;
        }
    }
    if (!expected) {
        switch (e.kind) {
        case DiagnosticKind::pc: expected = Direction::decrease; break;
        case DiagnosticKind::rl: expected = Direction::increase; break;
        case DiagnosticKind::ia:
            if (e.coefficient == 0.0) return std::nullopt;
            expected = e.coefficient > 0 ? Direction::decrease : Direction::increase;
            break;
        }
    }

    if (metric == "stall_cycles") {
        auto a = detail::stall_cycles(pre, e);
        if (!a || *a <= 0) return std::nullopt;
        return compare(a, detail::stall_cycles(post, e), *expected);
    }
    if (metric == "rho") {
        if (e.resources.empty()) return std::nullopt;
        for (const auto& res : e.resources) {
            auto m = compare(detail::rho(pre, e.kernel, res), detail::rho(post, e.kernel, res), *expected);
            if (!m) return std::nullopt;
            if (!*m) return false;
        }
        return true;
    }
    if (metric == "rho_compute" || metric == "rho_memory") {
        auto res = metric.substr(4);
        return compare(detail::rho(pre, e.kernel, res), detail::rho(post, e.kernel, res), *expected);
    }
    if (metric == "counter_mean") {
        return compare(detail::counter_mean(pre, e.counter_name), detail::counter_mean(post, e.counter_name), *expected);
    }
    if (text::starts_with(metric, "counter:")) {
        auto name = metric.substr(8);
        return compare(detail::counter_mean(pre, name), detail::counter_mean(post, name), *expected);
    }
    throw InvalidArgument("unknown direction metric '" + metric + "'");
}

struct DirectionalResult {
    std::optional<double> value;
    std::vector<KernelDirection> kernels;
};

// Edited kernels: kernels of cited PC/RL diagnostics plus kernels owning a
// salient line within `window` of an edit; falls back to `fallback_kernel`.
// Application-wide (IA) citations count toward every edited kernel.
inline std::vector<std::string> edited_kernels(const prompt::OptimizedArtifact& artifact,
                                               const std::vector<EvidenceItem>& evidence,
                                               const std::vector<insight::SalientStall>& salient, int window,
                                               const std::string& fallback_kernel) {
    std::set<std::string> ks;
    std::map<std::string, const EvidenceItem*> by_id;
    for (const auto& e : evidence) by_id[e.id] = &e;
    for (const auto& ed : artifact.applied) {
        for (const auto& id : ed.evidence_ids) {
            auto it = by_id.find(id);
            if (it != by_id.end() && !it->second->kernel.empty()) ks.insert(it->second->kernel);
        }
        if (!ed.parsed) continue;
        for (const auto& s : salient) {
            if (s.source_line >= ed.line_start - window && s.source_line <= ed.line_end + window) ks.insert(s.kernel_name);
        }
    }
    if (ks.empty() && !fallback_kernel.empty() && !artifact.applied.empty()) ks.insert(fallback_kernel);
    return {ks.begin(), ks.end()};
}

// A kernel is consistent iff strictly more than half of its measurable cited
// diagnostics moved in the expected direction; a kernel with nothing
// measurable is inconsistent. Value = consistent kernels / edited kernels.
inline DirectionalResult directional_consistency(const ingest::DiagnosticBundle& pre,
                                                 const ingest::DiagnosticBundle* post,
                                                 const prompt::OptimizedArtifact& artifact,
                                                 const std::vector<EvidenceItem>& evidence,
                                                 const std::vector<insight::SalientStall>& salient,
                                                 const std::vector<DirectionRule>& rules = {},
                                                 int window = kDefaultWindow, const std::string& fallback_kernel = {}) {
    DirectionalResult out;
    if (!post) return out;

    std::set<std::string> cited;
    for (const auto& ed : artifact.applied) cited.insert(ed.evidence_ids.begin(), ed.evidence_ids.end());

    auto kernels = edited_kernels(artifact, evidence, salient, window, fallback_kernel);
    if (kernels.empty()) {
        out.value = 0.0;
        return out;
    }
    int consistent = 0;
    for (const auto& k : kernels) {
        KernelDirection kd;
        kd.kernel = k;
        for (const auto& e : evidence) {
            if (!cited.count(e.id)) continue;
            if (!e.kernel.empty() && e.kernel != k) continue;
            auto m = diagnostic_moved(e, pre, *post, rules);
            if (!m) continue;
            ++kd.measurable;
            kd.expected_moves += *m;
        }
        kd.consistent = kd.measurable > 0 && 2 * kd.expected_moves > kd.measurable;
        consistent += kd.consistent;
        out.kernels.push_back(std::move(kd));
    }
    out.value = static_cast<double>(consistent) / static_cast<double>(kernels.size());
    return out;
}

// ---------------------------------------------------------------------------
// Full report
// ---------------------------------------------------------------------------

struct EarInputs {
    const prompt::OptimizedArtifact* artifact = nullptr;
    std::set<std::string> embedded_ids;
    std::vector<EvidenceItem> evidence;
    std::vector<insight::SalientStall> salient;
    std::string original_source;
    const ingest::DiagnosticBundle* pre = nullptr;
    const ingest::DiagnosticBundle* post = nullptr;
    std::vector<DirectionRule> rules;
    int window = kDefaultWindow;
    std::string fallback_kernel;
};

inline EARReport compute_report(const EarInputs& in) {
    if (!in.artifact) throw InvalidArgument("EAR needs a parsed artifact");
    const auto& art = *in.artifact;
    EARReport r;
    auto names = evidence_names(in.evidence);
    auto cov = evidence_coverage(art, in.embedded_ids, names);
    auto loc = localization_agreement(art, in.salient, in.window);
    auto acc = edit_accounting(art, in.original_source);
    r.evidence_coverage = cov.value;
    r.localization_agreement = loc.value;
    if (cov.flag) r.flags.push_back(*cov.flag);
    if (loc.flag && std::find(r.flags.begin(), r.flags.end(), *loc.flag) == r.flags.end()) r.flags.push_back(*loc.flag);
    r.implemented = acc.implemented;
    r.withheld = acc.withheld;
    r.hallucinated = acc.hallucinated;
    for (std::size_t i = 0; i < art.applied.size(); ++i) {
        const auto& e = art.applied[i];
        r.per_edit.push_back({e.edit_id, edit_covered(e, in.embedded_ids, names),
                              !in.salient.empty() && edit_localized(e, in.salient, in.window), acc.per_edit[i]});
    }
    if (in.pre && in.post) {
        auto d = directional_consistency(*in.pre, in.post, art, in.evidence, in.salient, in.rules, in.window,
                                         in.fallback_kernel);
        r.directional_consistency = d.value;
        r.directional_detail = std::move(d.kernels);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Diff annotation
// ---------------------------------------------------------------------------

struct AnnotatedHunk {
    diff::Hunk hunk;
    std::vector<std::string> evidence_ids; // union over the edits touching the hunk
    std::vector<std::string> edit_ids;
};

inline std::vector<AnnotatedHunk> annotate_hunks(const std::string& original, const prompt::OptimizedArtifact& art) {
    std::vector<AnnotatedHunk> out;
    for (auto& h : diff::hunks(text::split_lines(original), text::split_lines(art.full_source))) {
        AnnotatedHunk a{std::move(h), {}, {}};
        std::set<std::string> ids;
        for (const auto& e : art.applied) {
            if (!e.parsed) continue;
            if (!a.hunk.changes.touches(static_cast<int>(e.line_start), static_cast<int>(e.line_end))) continue;
            a.edit_ids.push_back(e.edit_id);
            ids.insert(e.evidence_ids.begin(), e.evidence_ids.end());
        }
        a.evidence_ids.assign(ids.begin(), ids.end());
        out.push_back(std::move(a));
    }
    return out;
}

inline nlohmann::json to_json(const std::vector<AnnotatedHunk>& hs, const std::map<std::string, std::string>& id_map = {}) {
    std::string unified;
    auto arr = nlohmann::json::array();
    std::vector<diff::Hunk> plain;
    for (const auto& a : hs) {
        plain.push_back(a.hunk);
        nlohmann::json hover = nlohmann::json::object();
        for (const auto& id : a.evidence_ids) {
            auto it = id_map.find(id);
            if (it != id_map.end()) hover[id] = it->second;
        }
        arr.push_back({{"header", a.hunk.header()},
                       {"orig_start", a.hunk.orig_start},
                       {"orig_len", a.hunk.orig_len},
                       {"new_start", a.hunk.new_start},
                       {"new_len", a.hunk.new_len},
                       {"lines", a.hunk.lines},
                       {"edit_ids", a.edit_ids},
                       {"evidence_ids", a.evidence_ids},
                       {"evidence_text", hover}});
    }
    return {{"unified_diff", diff::unified(plain)}, {"hunks", arr}};
}

} // namespace optimas::ear
