#pragma once

// Parsers for the normalized profiler exports, bundle assembly, the matching
// writers, and the optional profiler invocation step.
//
// File schemas:
//   kernels.csv    kernel_name,time_ns[,source_file]
//   pcsamples.csv  kernel_name,source_line,stall_type,cycles   (+ "# unit=cycles|samples")
//   counters.csv   run_id,runtime_ns,<counter...>
//   roofline.json  [ {kernel_name, achieved_compute, peak_compute, achieved_bandwidth,
//                     peak_bandwidth, arithmetic_intensity, profiler_notes}, ... ]
//   counter_dictionary.json  { "<counter>": "<description>", ... }

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "optimas/csv.hpp"
#include "optimas/error.hpp"
#include "optimas/log.hpp"
#include "optimas/process.hpp"
#include "optimas/text.hpp"

namespace optimas::ingest {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class MalformedRow : public ParseError {
public:
    using ParseError::ParseError;
};
class SchemaError : public ParseError {
public:
    using ParseError::ParseError;
};
class DuplicateKernel : public ParseError {
public:
    DuplicateKernel(std::string file, std::size_t line, std::string name)
        : ParseError(std::move(file), line, "duplicate kernel '" + name + "'"), name_(std::move(name)) {}
    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
};
class MissingRuntimeColumn : public ParseError {
public:
    explicit MissingRuntimeColumn(std::string file)
        : ParseError(std::move(file), 1, "required column runtime_ns is missing") {}
};
class RaggedRow : public ParseError {
public:
    using ParseError::ParseError;
};
class FewerThanTwoRuns : public ParseError {
public:
    FewerThanTwoRuns(std::string file, std::size_t rows)
        : ParseError(std::move(file), 0, "counter matrix needs at least 2 runs, found " + std::to_string(rows)) {}
};
class UnknownKernel : public Error {
public:
    explicit UnknownKernel(const std::string& name, const std::string& where)
        : Error(where + " references unknown kernel '" + name + "'"), name_(name) {}
    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
};
class DuplicateDiagnosticId : public Error {
public:
    explicit DuplicateDiagnosticId(const std::string& id) : Error("duplicate diagnostic id " + id) {}
};
class UnboundPlaceholder : public Error {
public:
    explicit UnboundPlaceholder(const std::string& key) : Error("placeholder {" + key + "} is not bound") {}
};
class NonZeroExit : public Error {
public:
    NonZeroExit(int code, std::string stderr_tail)
        : Error("profiler exited with code " + std::to_string(code) + ": " + stderr_tail),
          code_(code), stderr_tail_(std::move(stderr_tail)) {}
    int code() const noexcept { return code_; }
    const std::string& stderr_tail() const noexcept { return stderr_tail_; }

private:
    int code_;
    std::string stderr_tail_;
};
class MissingOutput : public Error {
public:
    explicit MissingOutput(std::string path) : Error("profiler did not produce " + path), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct KernelProfile {
    std::string kernel_name;
    std::int64_t time_ns = 0;
    std::optional<std::string> source_file;

    bool operator==(const KernelProfile&) const = default;
};

struct RooflineRaw {
    std::string kernel_name;
    double achieved_compute = 0;   // ops/s
    double peak_compute = 0;       // ops/s
    double achieved_bandwidth = 0; // bytes/s
    double peak_bandwidth = 0;     // bytes/s
    double arithmetic_intensity = 0;
    std::vector<std::string> profiler_notes;

    bool operator==(const RooflineRaw&) const = default;
};

// Stall "cycles" may be a sample count; the file header says which.
enum class StallUnit { cycles, samples };

inline const char* to_string(StallUnit u) { return u == StallUnit::cycles ? "cycles" : "samples"; }

struct StallSample {
    std::string kernel_name;
    std::int64_t source_line = 1;
    std::string stall_type;
    std::int64_t cycles = 0;

    bool operator==(const StallSample&) const = default;
};

// N runs by C counters, row-major. runtimes are in seconds.
struct CounterMatrix {
    std::vector<std::string> run_ids;
    std::vector<std::string> counter_names;
    std::vector<double> values;
    std::vector<double> runtimes;

    std::size_t runs() const { return run_ids.size(); }
    std::size_t counters() const { return counter_names.size(); }
    double at(std::size_t run, std::size_t counter) const { return values[run * counters() + counter]; }

    // Raw (un-normalized) mean of a counter over runs; nullopt if absent.
    std::optional<double> column_mean(const std::string& name) const {
        auto it = std::find(counter_names.begin(), counter_names.end(), name);
        if (it == counter_names.end() || runs() == 0) return std::nullopt;
        auto c = static_cast<std::size_t>(it - counter_names.begin());
        double sum = 0;
        for (std::size_t r = 0; r < runs(); ++r) sum += at(r, c);
        return sum / static_cast<double>(runs());
    }

    bool operator==(const CounterMatrix&) const = default;
};

struct DiagnosticBundle {
    std::string app_name;
    std::vector<KernelProfile> kernels;
    std::vector<RooflineRaw> roofline;
    std::vector<StallSample> stalls;
    StallUnit stall_unit = StallUnit::cycles;
    std::optional<CounterMatrix> counters;
    std::map<std::string, std::string> id_map; // diagnostic id -> summary line

    bool has_kernel(const std::string& name) const {
        return std::any_of(kernels.begin(), kernels.end(), [&](const auto& k) { return k.kernel_name == name; });
    }

    bool operator==(const DiagnosticBundle&) const = default;
};

// ---------------------------------------------------------------------------
// Parsers
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_or_throw(const std::string& file, std::size_t lineno, const std::string& line) {
    auto fields = csv::split(line);
    if (!fields) throw MalformedRow(file, lineno, "unbalanced quotes");
    return *fields;
}

inline bool is_blank(const std::string& line) { return text::trim(line).empty(); }

inline std::ifstream open_or_throw(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return in;
}

inline std::string field_list(const std::vector<std::string>& fields) { return text::join(fields, ","); }

} // namespace detail

inline std::vector<KernelProfile> parse_kernel_times_stream(std::istream& in, const std::string& file = {}) {
    std::vector<KernelProfile> out;
    std::unordered_set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    bool with_source = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::is_blank(line) || text::starts_with(text::trim(line), "#")) continue;
        auto fields = detail::split_or_throw(file, lineno, line);
        if (!have_header) {
            for (auto& f : fields) f = std::string(text::trim(f));
            if (fields == std::vector<std::string>{"kernel_name", "time_ns"}) {
                with_source = false;
            } else if (fields == std::vector<std::string>{"kernel_name", "time_ns", "source_file"}) {
                with_source = true;
            } else {
                throw SchemaError(file, lineno, "expected header kernel_name,time_ns[,source_file], got " +
                                                    detail::field_list(fields));
            }
            have_header = true;
            continue;
        }
        const std::size_t want = with_source ? 3 : 2;
        if (fields.size() != want && !(with_source && fields.size() == 2)) {
            throw MalformedRow(file, lineno, "expected " + std::to_string(want) + " fields");
        }
        KernelProfile k;
        k.kernel_name = std::string(text::trim(fields[0]));
        if (k.kernel_name.empty()) throw MalformedRow(file, lineno, "empty kernel_name");
        auto t = text::parse_int(fields[1]);
        if (!t || *t < 0) throw MalformedRow(file, lineno, "time_ns must be a non-negative integer");
        k.time_ns = *t;
        if (fields.size() == 3 && !text::trim(fields[2]).empty()) k.source_file = std::string(text::trim(fields[2]));
        if (!seen.insert(k.kernel_name).second) throw DuplicateKernel(file, lineno, k.kernel_name);
        out.push_back(std::move(k));
    }
    if (!have_header) {
        // An empty file is an empty profile; anything else must carry the header.
        return out;
    }
    return out;
}

inline std::vector<KernelProfile> parse_kernel_times(const std::string& path) {
    auto in = detail::open_or_throw(path);
    return parse_kernel_times_stream(in, path);
}

struct PcSampleHeader {
    StallUnit unit = StallUnit::cycles;
    std::size_t rows = 0;
};

// Streams samples to `visit` one row at a time. Memory use is bounded by the
// longest line, independent of file size.
template <class Visitor>
PcSampleHeader for_each_pc_sample_stream(std::istream& in, Visitor&& visit, const std::string& file = {}) {
    PcSampleHeader header;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    StallSample s;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::is_blank(line)) continue;
        auto trimmed = text::trim(line);
        if (trimmed.front() == '#') {
            auto body = text::trim(trimmed.substr(1));
            if (text::starts_with(body, "unit=")) {
                auto unit = text::trim(body.substr(5));
                if (unit == "cycles") header.unit = StallUnit::cycles;
                else if (unit == "samples") header.unit = StallUnit::samples;
                else throw MalformedRow(file, lineno, "unit must be cycles or samples");
            }
            continue;
        }
        auto fields = detail::split_or_throw(file, lineno, line);
        if (!have_header) {
            for (auto& f : fields) f = std::string(text::trim(f));
            if (fields != std::vector<std::string>{"kernel_name", "source_line", "stall_type", "cycles"}) {
                throw SchemaError(file, lineno,
                                  "expected header kernel_name,source_line,stall_type,cycles, got " +
                                      detail::field_list(fields));
            }
            have_header = true;
            continue;
        }
        if (fields.size() != 4) throw MalformedRow(file, lineno, "expected 4 fields");
        s.kernel_name.assign(text::trim(fields[0]));
        if (s.kernel_name.empty()) throw MalformedRow(file, lineno, "empty kernel_name");
        auto ln = text::parse_int(fields[1]);
        if (!ln || *ln < 1) throw MalformedRow(file, lineno, "source_line must be a positive integer");
        s.source_line = *ln;
        s.stall_type.assign(text::trim(fields[2]));
        if (s.stall_type.empty()) throw MalformedRow(file, lineno, "empty stall_type");
        auto cyc = text::parse_int(fields[3]);
        if (!cyc || *cyc < 0) throw MalformedRow(file, lineno, "cycles must be a non-negative integer");
        s.cycles = *cyc;
        ++header.rows;
        visit(std::as_const(s));
    }
    return header;
}

template <class Visitor>
PcSampleHeader for_each_pc_sample(const std::string& path, Visitor&& visit) {
    auto in = detail::open_or_throw(path);
    return for_each_pc_sample_stream(in, std::forward<Visitor>(visit), path);
}

inline std::vector<StallSample> parse_pc_samples(const std::string& path, StallUnit* unit = nullptr) {
    std::vector<StallSample> out;
    auto header = for_each_pc_sample(path, [&](const StallSample& s) { out.push_back(s); });
    if (unit) *unit = header.unit;
    return out;
}

inline CounterMatrix parse_counter_matrix_stream(std::istream& in, const std::string& file = {}) {
    CounterMatrix m;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    std::size_t runtime_col = 0;
    std::size_t width = 0;
    std::vector<std::size_t> counter_cols;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::is_blank(line) || text::starts_with(text::trim(line), "#")) continue;
        auto fields = detail::split_or_throw(file, lineno, line);
        if (!have_header) {
            for (auto& f : fields) f = std::string(text::trim(f));
            if (fields.empty() || fields[0] != "run_id") throw SchemaError(file, lineno, "first column must be run_id");
            auto rt = std::find(fields.begin(), fields.end(), "runtime_ns");
            if (rt == fields.end()) throw MissingRuntimeColumn(file);
            runtime_col = static_cast<std::size_t>(rt - fields.begin());
            std::set<std::string> names;
            for (std::size_t i = 1; i < fields.size(); ++i) {
                if (i == runtime_col) continue;
                if (fields[i].empty()) throw SchemaError(file, lineno, "empty counter name in column " + std::to_string(i + 1));
                if (!names.insert(fields[i]).second) throw SchemaError(file, lineno, "duplicate counter " + fields[i]);
                m.counter_names.push_back(fields[i]);
                counter_cols.push_back(i);
            }
            if (m.counter_names.empty()) throw SchemaError(file, lineno, "no counter columns");
            width = fields.size();
            have_header = true;
            continue;
        }
        if (fields.size() != width) {
            throw RaggedRow(file, lineno,
                            "expected " + std::to_string(width) + " fields, found " + std::to_string(fields.size()));
        }
        m.run_ids.emplace_back(text::trim(fields[0]));
        auto rt = text::parse_double(fields[runtime_col]);
        if (!rt || *rt <= 0) throw MalformedRow(file, lineno, "runtime_ns must be a positive number");
        m.runtimes.push_back(*rt / 1e9);
        for (auto c : counter_cols) {
            auto v = text::parse_double(fields[c]);
            if (!v) throw MalformedRow(file, lineno, "non-numeric value in column " + std::to_string(c + 1));
            m.values.push_back(*v);
        }
    }
    if (!have_header) throw SchemaError(file, 0, "missing header");
    if (m.runs() < 2) throw FewerThanTwoRuns(file, m.runs());
    return m;
}

inline CounterMatrix parse_counter_matrix(const std::string& path) {
    auto in = detail::open_or_throw(path);
    return parse_counter_matrix_stream(in, path);
}

inline std::vector<RooflineRaw> parse_roofline_json_text(const std::string& body, const std::string& file = {}) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(file, 0, e.what());
    }
    if (!doc.is_array()) throw SchemaError(file, 0, "roofline document must be an array");
    std::vector<RooflineRaw> out;
    std::size_t index = 0;
    for (const auto& item : doc) {
        ++index;
        auto where = "entry " + std::to_string(index);
        if (!item.is_object()) throw SchemaError(file, 0, where + " is not an object");
        auto number = [&](const char* key) {
            if (!item.contains(key) || !item[key].is_number()) throw SchemaError(file, 0, where + ": missing numeric " + key);
            double v = item[key].get<double>();
            if (v < 0) throw SchemaError(file, 0, where + ": " + key + " must be non-negative");
            return v;
        };
        RooflineRaw r;
        if (!item.contains("kernel_name") || !item["kernel_name"].is_string()) {
            throw SchemaError(file, 0, where + ": missing kernel_name");
        }
        r.kernel_name = item["kernel_name"].get<std::string>();
        r.achieved_compute = number("achieved_compute");
        r.peak_compute = number("peak_compute");
        r.achieved_bandwidth = number("achieved_bandwidth");
        r.peak_bandwidth = number("peak_bandwidth");
        r.arithmetic_intensity = number("arithmetic_intensity");
        if (r.peak_compute <= 0 || r.peak_bandwidth <= 0) throw SchemaError(file, 0, where + ": peaks must be positive");
        if (item.contains("profiler_notes")) {
            if (!item["profiler_notes"].is_array()) throw SchemaError(file, 0, where + ": profiler_notes must be an array");
            for (const auto& n : item["profiler_notes"]) {
                if (!n.is_string()) throw SchemaError(file, 0, where + ": profiler note is not a string");
                r.profiler_notes.push_back(n.get<std::string>());
            }
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<RooflineRaw> parse_roofline_json(const std::string& path) {
    return parse_roofline_json_text(text::read_file(path), path);
}

// Duplicate keys resolve last-wins with a warning.
inline std::map<std::string, std::string> parse_counter_dictionary_text(const std::string& body,
                                                                       const std::string& file = {}) {
    std::map<std::string, std::string> out;
    if (text::trim(body).empty()) return out;
    std::set<std::string> seen;
    std::vector<std::string> duplicates;
    nlohmann::json::parser_callback_t cb = [&](int depth, nlohmann::json::parse_event_t event, nlohmann::json& parsed) {
        if (event == nlohmann::json::parse_event_t::key && depth == 1) {
            auto key = parsed.get<std::string>();
            if (!seen.insert(key).second) duplicates.push_back(key);
        }
        return true;
    };
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(body, cb);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(file, 0, e.what());
    }
    if (!doc.is_object()) throw ParseError(file, 0, "counter dictionary must be a JSON object");
    for (auto& [k, v] : doc.items()) {
        if (!v.is_string()) throw ParseError(file, 0, "description for " + k + " is not a string");
        out[k] = v.get<std::string>();
    }
    for (const auto& d : duplicates) log::warn("counter dictionary " + file + ": duplicate key '" + d + "', last value wins");
    return out;
}

inline std::map<std::string, std::string> load_counter_dictionary(const std::string& path) {
    return parse_counter_dictionary_text(text::read_file(path), path);
}

// ---------------------------------------------------------------------------
// Bundle assembly
// ---------------------------------------------------------------------------

inline DiagnosticBundle assemble_bundle(std::string app_name, std::vector<KernelProfile> kernels,
                                        std::vector<RooflineRaw> roofline, std::vector<StallSample> stalls,
                                        std::optional<CounterMatrix> counters, StallUnit unit = StallUnit::cycles) {
    DiagnosticBundle b;
    b.app_name = std::move(app_name);
    b.kernels = std::move(kernels);
    b.roofline = std::move(roofline);
    b.stalls = std::move(stalls);
    b.counters = std::move(counters);
    b.stall_unit = unit;
    std::unordered_set<std::string> names;
    for (const auto& k : b.kernels) {
        if (!names.insert(k.kernel_name).second) throw DuplicateKernel({}, 0, k.kernel_name);
    }
    for (const auto& r : b.roofline) {
        if (!names.count(r.kernel_name)) throw UnknownKernel(r.kernel_name, "roofline entry");
    }
    for (const auto& s : b.stalls) {
        if (!names.count(s.kernel_name)) throw UnknownKernel(s.kernel_name, "stall sample");
    }
    return b;
}

inline void add_diagnostic(DiagnosticBundle& b, const std::string& id, const std::string& summary) {
    if (!b.id_map.emplace(id, summary).second) throw DuplicateDiagnosticId(id);
}

// ---------------------------------------------------------------------------
// Writers (normalized formats)
// ---------------------------------------------------------------------------

namespace detail {
// runtime_ns is written as an integer when it is one, so integer inputs round-trip.
inline std::string runtime_ns_field(double seconds) {
    double ns = seconds * 1e9;
    double rounded = std::round(ns);
    if (std::abs(ns - rounded) <= 1e-6 * std::max(1.0, std::abs(ns))) {
        return std::to_string(static_cast<long long>(rounded));
    }
    return text::shortest(ns);
}
} // namespace detail

inline std::string write_kernel_times(const std::vector<KernelProfile>& kernels) {
    bool with_source = std::any_of(kernels.begin(), kernels.end(), [](const auto& k) { return k.source_file.has_value(); });
    std::string out = with_source ? "kernel_name,time_ns,source_file\n" : "kernel_name,time_ns\n";
    for (const auto& k : kernels) {
        std::vector<std::string> f{k.kernel_name, std::to_string(k.time_ns)};
        if (with_source) f.push_back(k.source_file.value_or(""));
        out += csv::join(f) + "\n";
    }
    return out;
}

inline std::string write_pc_samples(const std::vector<StallSample>& samples, StallUnit unit) {
    std::string out = std::string("# unit=") + to_string(unit) + "\nkernel_name,source_line,stall_type,cycles\n";
    for (const auto& s : samples) {
        out += csv::join({s.kernel_name, std::to_string(s.source_line), s.stall_type, std::to_string(s.cycles)}) + "\n";
    }
    return out;
}

inline std::string write_counter_matrix(const CounterMatrix& m) {
    std::vector<std::string> header{"run_id", "runtime_ns"};
    header.insert(header.end(), m.counter_names.begin(), m.counter_names.end());
    std::string out = csv::join(header) + "\n";
    for (std::size_t r = 0; r < m.runs(); ++r) {
        std::vector<std::string> row{m.run_ids[r], detail::runtime_ns_field(m.runtimes[r])};
        for (std::size_t c = 0; c < m.counters(); ++c) row.push_back(text::shortest(m.at(r, c)));
        out += csv::join(row) + "\n";
    }
    return out;
}

inline nlohmann::json roofline_to_json(const std::vector<RooflineRaw>& roofline) {
    auto arr = nlohmann::json::array();
    for (const auto& r : roofline) {
        arr.push_back({{"kernel_name", r.kernel_name},
                       {"achieved_compute", r.achieved_compute},
                       {"peak_compute", r.peak_compute},
                       {"achieved_bandwidth", r.achieved_bandwidth},
                       {"peak_bandwidth", r.peak_bandwidth},
                       {"arithmetic_intensity", r.arithmetic_intensity},
                       {"profiler_notes", r.profiler_notes}});
    }
    return arr;
}

// Fixed file names used for a bundle directory.
inline constexpr const char* kKernelsFile = "kernels.csv";
inline constexpr const char* kPcSamplesFile = "pcsamples.csv";
inline constexpr const char* kCountersFile = "counters.csv";
inline constexpr const char* kRooflineFile = "roofline.json";
inline constexpr const char* kIdMapFile = "id_map.json";

// Writes every populated part of the bundle under `dir` and returns the
// file names written.
inline std::vector<std::string> write_bundle(const DiagnosticBundle& b, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<std::string> written;
    text::write_file((dir / kKernelsFile).string(), write_kernel_times(b.kernels));
    written.emplace_back(kKernelsFile);
    if (!b.stalls.empty()) {
        text::write_file((dir / kPcSamplesFile).string(), write_pc_samples(b.stalls, b.stall_unit));
        written.emplace_back(kPcSamplesFile);
    }
    if (b.counters) {
        text::write_file((dir / kCountersFile).string(), write_counter_matrix(*b.counters));
        written.emplace_back(kCountersFile);
    }
    if (!b.roofline.empty()) {
        text::write_file((dir / kRooflineFile).string(), roofline_to_json(b.roofline).dump(2) + "\n");
        written.emplace_back(kRooflineFile);
    }
    if (!b.id_map.empty()) {
        text::write_file((dir / kIdMapFile).string(), nlohmann::json(b.id_map).dump(2) + "\n");
        written.emplace_back(kIdMapFile);
    }
    return written;
}

// Inverse of write_bundle: missing optional files leave their part empty.
inline DiagnosticBundle read_bundle(const std::filesystem::path& dir, std::string app_name) {
    namespace fs = std::filesystem;
    auto kernels = parse_kernel_times((dir / kKernelsFile).string());
    std::vector<StallSample> stalls;
    StallUnit unit = StallUnit::cycles;
    if (fs::exists(dir / kPcSamplesFile)) stalls = parse_pc_samples((dir / kPcSamplesFile).string(), &unit);
    std::optional<CounterMatrix> counters;
    if (fs::exists(dir / kCountersFile)) counters = parse_counter_matrix((dir / kCountersFile).string());
    std::vector<RooflineRaw> roofline;
    if (fs::exists(dir / kRooflineFile)) roofline = parse_roofline_json((dir / kRooflineFile).string());
    auto b = assemble_bundle(std::move(app_name), std::move(kernels), std::move(roofline), std::move(stalls),
                             std::move(counters), unit);
    if (fs::exists(dir / kIdMapFile)) {
        auto doc = nlohmann::json::parse(text::read_file((dir / kIdMapFile).string()));
        for (auto& [k, v] : doc.items()) add_diagnostic(b, k, v.get<std::string>());
    }
    return b;
}

// ---------------------------------------------------------------------------
// Profiler invocation
// ---------------------------------------------------------------------------

// Substitutes {app}, {args}, {out} (and any other bound keys). Every
// placeholder in the template must be bound.
inline std::string render_profiler_command(const std::string& command_template,
                                           const std::map<std::string, std::string>& substitutions) {
    for (const auto& key : text::placeholders(command_template)) {
        if (!substitutions.count(key)) throw UnboundPlaceholder(key);
    }
    return text::substitute(command_template, substitutions);
}

// Runs the profiler command and returns the declared outputs (relative to
// {out}) as absolute paths. Invocations sharing an output directory are
// serialized through a lock file in that directory.
inline std::vector<std::string> invoke_profiler(const std::string& command_template,
                                                const std::map<std::string, std::string>& substitutions,
                                                const std::vector<std::string>& declared_outputs,
                                                const std::string& workdir = {}) {
    namespace fs = std::filesystem;
    auto command = render_profiler_command(command_template, substitutions);
    auto out_it = substitutions.find("out");
    fs::path out_dir = out_it != substitutions.end() ? fs::path(out_it->second) : fs::current_path();
    if (out_dir.is_relative() && !workdir.empty()) out_dir = fs::path(workdir) / out_dir;
    fs::create_directories(out_dir);
    process::FileLock lock((out_dir / ".optimas-profiler.lock").string());

    auto result = process::run_shell(command, workdir);
    if (result.exit_code != 0) throw NonZeroExit(result.exit_code, process::tail_lines(result.err, 20));

    std::vector<std::string> produced;
    for (const auto& rel : declared_outputs) {
        auto p = out_dir / rel;
        if (!fs::exists(p)) throw MissingOutput(p.string());
        produced.push_back(fs::absolute(p).lexically_normal().string());
    }
    return produced;
}

} // namespace optimas::ingest
