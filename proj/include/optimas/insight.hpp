#pragma once

// Summarizers that turn raw diagnostics into short, ID-tagged lines:
// hotspot kernel selection, roofline classification and PC-stall saliency.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "optimas/error.hpp"
#include "optimas/ingest.hpp"
#include "optimas/log.hpp"
#include "optimas/text.hpp"

namespace optimas::insight {

using ingest::KernelProfile;
using ingest::RooflineRaw;
using ingest::StallSample;

inline constexpr double kDefaultAlpha = 0.8;
inline constexpr double kDefaultTauSat = 0.70;
inline constexpr double kDefaultTauSaliency = 0.30;
inline constexpr int kDefaultTopN = 10;
inline constexpr std::size_t kSnippetMaxBytes = 120;
inline constexpr std::size_t kStallTypeMaxBytes = 64;
inline constexpr std::size_t kStallSummaryBudget = 6144;

class EmptyProfile : public InvalidArgument {
public:
    EmptyProfile() : InvalidArgument("kernel profile is empty") {}
};

class NonPositivePeak : public InvalidArgument {
public:
    explicit NonPositivePeak(const std::string& kernel)
        : InvalidArgument("roofline entry for '" + kernel + "' has a non-positive peak") {}
};

// One prompt-ready diagnostic line. `text` excludes the id; render() joins them.
struct SummaryLine {
    std::string id;
    std::string text;
    std::string kernel;                       // empty for application-wide lines
    std::optional<std::int64_t> source_line;  // set for lines anchored to source

    std::string render() const { return id + ": " + text; }
    bool operator==(const SummaryLine&) const = default;
};

// ---------------------------------------------------------------------------
// Hotspot selection
// ---------------------------------------------------------------------------

struct KernelSet {
    std::vector<std::string> selected;
    double coverage_fraction = 0;
    double alpha = kDefaultAlpha;
};

// Shortest prefix of kernels (by descending time, ties by name) whose
// cumulative time reaches alpha * total. A zero-time profile selects the
// first kernel with coverage 1.
inline KernelSet select_hot_kernels(const std::vector<KernelProfile>& profiles, double alpha = kDefaultAlpha) {
    if (profiles.empty()) throw EmptyProfile();
    if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must lie in (0, 1]");

    std::vector<const KernelProfile*> order;
    order.reserve(profiles.size());
    for (const auto& p : profiles) order.push_back(&p);
    std::sort(order.begin(), order.end(), [](const KernelProfile* a, const KernelProfile* b) {
        if (a->time_ns != b->time_ns) return a->time_ns > b->time_ns;
        return a->kernel_name < b->kernel_name;
    });

    std::int64_t total = 0;
    for (const auto* p : order) total += p->time_ns;

    KernelSet out;
    out.alpha = alpha;
    if (total == 0) {
        out.selected.push_back(order.front()->kernel_name);
        out.coverage_fraction = 1.0;
        return out;
    }
    // Relative slack so a cumulative sum exactly equal to alpha*total is
    // accepted despite rounding in the product.
    const double target = alpha * static_cast<double>(total) * (1.0 - 1e-12);
    std::int64_t cumulative = 0;
    for (const auto* p : order) {
        cumulative += p->time_ns;
        out.selected.push_back(p->kernel_name);
        if (static_cast<double>(cumulative) >= target) break;
    }
    out.coverage_fraction = static_cast<double>(cumulative) / static_cast<double>(total);
    return out;
}

// ---------------------------------------------------------------------------
// Roofline classification
// ---------------------------------------------------------------------------

enum class UtilState { underutilized, saturated };
enum class BoundType { compute_bound, memory_bound };

inline const char* to_string(UtilState s) { return s == UtilState::saturated ? "saturated" : "underutilized"; }
inline const char* to_string(BoundType b) { return b == BoundType::memory_bound ? "memory-bound" : "compute-bound"; }

struct RooflineSummary {
    std::string kernel_name;
    double rho_compute = 0;
    double rho_memory = 0;
    UtilState compute_state = UtilState::underutilized;
    UtilState memory_state = UtilState::underutilized;
    BoundType bound_type = BoundType::compute_bound;
    double ridge_point = 0;
    double arithmetic_intensity = 0;
    std::vector<SummaryLine> summary_lines;
};

inline UtilState classify_utilization(double rho, double tau_sat) {
    return rho >= tau_sat ? UtilState::saturated : UtilState::underutilized;
}

// "Compute underutilized (62%), memory bandwidth saturated (91%)"
inline std::string utilization_sentence(double rho_compute, double rho_memory, double tau_sat) {
    return std::string("Compute ") + to_string(classify_utilization(rho_compute, tau_sat)) + " (" +
           std::to_string(text::whole_percent(rho_compute)) + "%), memory bandwidth " +
           to_string(classify_utilization(rho_memory, tau_sat)) + " (" +
           std::to_string(text::whole_percent(rho_memory)) + "%)";
}

namespace detail {
inline double clamp_rho(double achieved, double peak, const std::string& kernel, const char* what) {
    double rho = achieved / peak;
    if (rho > 1.0) {
        log::warn("roofline " + kernel + ": " + what + " utilization " + text::shortest(rho) + " exceeds 1, clamped");
        rho = 1.0;
    }
    return std::max(rho, 0.0);
}
} // namespace detail

// Lines emitted per kernel, ids numbered from `first_id`:
//   utilization sentence, bound type, then one line per profiler note.
inline RooflineSummary classify_roofline(const RooflineRaw& raw, double tau_sat = kDefaultTauSat,
                                         std::size_t first_id = 1) {
    if (!(raw.peak_compute > 0) || !(raw.peak_bandwidth > 0)) throw NonPositivePeak(raw.kernel_name);
    if (!(tau_sat > 0.0 && tau_sat < 1.0)) throw InvalidArgument("tau_sat must lie in (0, 1)");

    RooflineSummary s;
    s.kernel_name = raw.kernel_name;
    s.rho_compute = detail::clamp_rho(raw.achieved_compute, raw.peak_compute, raw.kernel_name, "compute");
    s.rho_memory = detail::clamp_rho(raw.achieved_bandwidth, raw.peak_bandwidth, raw.kernel_name, "memory");
    s.compute_state = classify_utilization(s.rho_compute, tau_sat);
    s.memory_state = classify_utilization(s.rho_memory, tau_sat);
    s.ridge_point = raw.peak_compute / raw.peak_bandwidth;
    s.arithmetic_intensity = raw.arithmetic_intensity;
    s.bound_type = raw.arithmetic_intensity < s.ridge_point ? BoundType::memory_bound : BoundType::compute_bound;

    std::size_t id = first_id;
    auto add = [&](std::string body) {
        s.summary_lines.push_back({text::diag_id("RL", id++), raw.kernel_name + ": " + std::move(body), raw.kernel_name, {}});
    };
    add(utilization_sentence(s.rho_compute, s.rho_memory, tau_sat));
    add(std::string(to_string(s.bound_type)) + " (arithmetic intensity " +
        text::printf_format("%.3g", s.arithmetic_intensity) + " ops/byte, ridge point " +
        text::printf_format("%.3g", s.ridge_point) + " ops/byte)");
    for (const auto& note : raw.profiler_notes) add("profiler note: " + note);
    return s;
}

// Classifies each entry, numbering RL ids across kernels in input order.
inline std::vector<RooflineSummary> summarize_roofline(const std::vector<RooflineRaw>& entries,
                                                       double tau_sat = kDefaultTauSat) {
    std::vector<RooflineSummary> out;
    std::size_t next = 1;
    for (const auto& e : entries) {
        out.push_back(classify_roofline(e, tau_sat, next));
        next += out.back().summary_lines.size();
    }
    return out;
}

// ---------------------------------------------------------------------------
// PC-stall aggregation and saliency
// ---------------------------------------------------------------------------

struct StallKey {
    std::string kernel_name;
    std::int64_t source_line = 0;
    std::string stall_type;

    auto tie() const { return std::tie(kernel_name, source_line, stall_type); }
    bool operator<(const StallKey& o) const { return tie() < o.tie(); }
    bool operator==(const StallKey& o) const { return tie() == o.tie(); }
};

namespace detail {
struct StallKeyView {
    std::string_view kernel_name;
    std::int64_t source_line;
    std::string_view stall_type;
};
struct StallKeyLess {
    using is_transparent = void;
    template <class A, class B>
    bool operator()(const A& a, const B& b) const {
        return std::tie(a.kernel_name, a.source_line, a.stall_type) <
               std::tie(b.kernel_name, b.source_line, b.stall_type);
    }
};
} // namespace detail

using StallAggregate = std::map<StallKey, std::int64_t, detail::StallKeyLess>;

// Streaming accumulator; memory grows with distinct keys, not samples.
class StallAggregator {
public:
    void add(const StallSample& s) {
        detail::StallKeyView view{s.kernel_name, s.source_line, s.stall_type};
        auto it = agg_.find(view);
        if (it == agg_.end()) {
            agg_.emplace(StallKey{s.kernel_name, s.source_line, s.stall_type}, s.cycles);
        } else {
            it->second += s.cycles;
        }
        total_ += s.cycles;
        ++samples_;
    }

    const StallAggregate& result() const& { return agg_; }
    StallAggregate result() && { return std::move(agg_); }
    std::int64_t total_cycles() const { return total_; }
    std::size_t samples() const { return samples_; }

private:
    StallAggregate agg_;
    std::int64_t total_ = 0;
    std::size_t samples_ = 0;
};

inline StallAggregate aggregate_stalls(const std::vector<StallSample>& samples) {
    StallAggregator agg;
    for (const auto& s : samples) agg.add(s);
    return std::move(agg).result();
}

struct SalientStall {
    std::string kernel_name;
    std::int64_t source_line = 0;
    std::string stall_type;
    std::int64_t line_cycles = 0;
    std::int64_t dominant_cycles = 0;
    double dominance_share = 0;
    double kernel_share = 0;
    std::string code_snippet;

    bool operator==(const SalientStall&) const = default;
};

inline constexpr const char* kLineUnavailable = "<line unavailable>";

// Per (kernel, line): the dominant stall is the one with most cycles (ties go
// to the lexicographically first name). The line is kept when that stall holds
// at least tau_saliency of the line's cycles. Kept lines are ranked by line
// cycles (then kernel, line) and cut to top_n. Lines with zero stalled cycles
// have no dominant stall and are skipped.
inline std::vector<SalientStall> filter_salient(const StallAggregate& agg,
                                                const std::map<std::string, std::string>& sources,
                                                double tau_saliency = kDefaultTauSaliency,
                                                int top_n = kDefaultTopN) {
    if (!(tau_saliency > 0.0 && tau_saliency <= 1.0)) throw InvalidArgument("tau_saliency must lie in (0, 1]");
    if (top_n < 1) throw InvalidArgument("top_n must be at least 1");

    std::map<std::string, std::int64_t> kernel_totals;
    for (const auto& [key, cycles] : agg) kernel_totals[key.kernel_name] += cycles;

    std::map<std::string, std::vector<std::string>> source_lines;
    for (const auto& [kernel, src] : sources) source_lines.emplace(kernel, text::split_lines(src));

    std::vector<SalientStall> kept;
    // The aggregate is ordered by (kernel, line, stall) so each line's entries are contiguous.
    for (auto it = agg.begin(); it != agg.end();) {
        const auto& kernel = it->first.kernel_name;
        const auto line = it->first.source_line;
        std::int64_t line_total = 0;
        auto dominant = it;
        auto jt = it;
        for (; jt != agg.end() && jt->first.kernel_name == kernel && jt->first.source_line == line; ++jt) {
            line_total += jt->second;
            if (jt->second > dominant->second) dominant = jt; // strict: earlier (smaller) name wins ties
        }
        if (line_total > 0) {
            double share = static_cast<double>(dominant->second) / static_cast<double>(line_total);
            if (share >= tau_saliency) {
                SalientStall s;
                s.kernel_name = kernel;
                s.source_line = line;
                s.stall_type = dominant->first.stall_type;
                s.line_cycles = line_total;
                s.dominant_cycles = dominant->second;
                s.dominance_share = share;
                auto kt = kernel_totals[kernel];
                s.kernel_share = kt > 0 ? static_cast<double>(dominant->second) / static_cast<double>(kt) : 0.0;
                s.code_snippet = kLineUnavailable;
                if (auto src = source_lines.find(kernel); src != source_lines.end()) {
                    if (line >= 1 && static_cast<std::size_t>(line) <= src->second.size()) {
                        s.code_snippet = std::string(text::trim(src->second[static_cast<std::size_t>(line - 1)]));
                    }
                }
                kept.push_back(std::move(s));
            }
        }
        it = jt;
    }

    std::stable_sort(kept.begin(), kept.end(), [](const SalientStall& a, const SalientStall& b) {
        if (a.line_cycles != b.line_cycles) return a.line_cycles > b.line_cycles;
        return std::tie(a.kernel_name, a.source_line) < std::tie(b.kernel_name, b.source_line);
    });
    if (kept.size() > static_cast<std::size_t>(top_n)) kept.resize(static_cast<std::size_t>(top_n));
    return kept;
}

// "line <n> `<snippet>` \u2014 <stall>: <share>% of line stalls, <kshare>% of kernel stalls"
inline std::string stall_line_text(const SalientStall& s) {
    return "line " + std::to_string(s.source_line) + " `" + text::truncate_utf8(s.code_snippet, kSnippetMaxBytes) +
           "` — " + text::truncate_utf8(s.stall_type, kStallTypeMaxBytes) + ": " +
           std::to_string(text::whole_percent(s.dominance_share)) + "% of line stalls, " +
           std::to_string(text::whole_percent(s.kernel_share)) + "% of kernel stalls";
}

// One PC-xx line per salient stall. Output is capped at kStallSummaryBudget
// bytes (lines joined by newlines); entries past the budget are dropped.
inline std::vector<SummaryLine> render_stall_summary(const std::vector<SalientStall>& salient) {
    std::vector<SummaryLine> out;
    std::size_t bytes = 0;
    for (const auto& s : salient) {
        SummaryLine line{text::diag_id("PC", out.size() + 1), stall_line_text(s), s.kernel_name, s.source_line};
        std::size_t cost = line.render().size() + (out.empty() ? 0 : 1);
        if (bytes + cost > kStallSummaryBudget) break;
        bytes += cost;
        out.push_back(std::move(line));
    }
    return out;
}

inline std::string join_rendered(const std::vector<SummaryLine>& lines) {
    std::string out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (i) out += '\n';
        out += lines[i].render();
    }
    return out;
}

} // namespace optimas::insight
