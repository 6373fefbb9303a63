#pragma once

// Compile with LLM-driven retry, bit-exact output validation, serialized
// runtime measurement, and versioned run directories.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <regex>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "optimas/error.hpp"
#include "optimas/gateway.hpp"
#include "optimas/hash.hpp"
#include "optimas/process.hpp"
#include "optimas/prompt.hpp"
#include "optimas/text.hpp"

namespace optimas::harness {

inline constexpr int kDefaultRuns = 5;
inline constexpr int kDefaultMaxRetries = 3;
inline constexpr std::size_t kFeedbackTailLines = 60;

class CompilerMissing : public Error {
public:
    explicit CompilerMissing(const std::string& cmd) : Error("compiler not found while running: " + cmd) {}
};
class RetryExhausted : public Error {
public:
    RetryExhausted(int attempts, std::string log)
        : Error("compilation failed after " + std::to_string(attempts) + " attempts"), attempts_(attempts),
          log_(std::move(log)) {}
    int attempts() const noexcept { return attempts_; }
    const std::string& log() const noexcept { return log_; }

private:
    int attempts_;
    std::string log_;
};
class ExecutionFailure : public Error {
public:
    ExecutionFailure(int code, const std::string& stderr_tail)
        : Error("execution failed with exit code " + std::to_string(code) + (stderr_tail.empty() ? "" : ": " + stderr_tail)),
          code_(code) {}
    int exit_code() const noexcept { return code_; }

private:
    int code_;
};
class ZeroBaseline : public Error {
public:
    ZeroBaseline() : Error("baseline mean runtime is zero") {}
};
class WriteFailure : public Error {
public:
    using Error::Error;
};
class DigestMismatch : public Error {
public:
    DigestMismatch(const std::string& name, const std::string& expected, const std::string& actual)
        : Error("digest mismatch for " + name + ": manifest " + expected + ", file " + actual), name_(name) {}
    const std::string& artifact() const noexcept { return name_; }

private:
    std::string name_;
};

enum class Status { improved, no_gain, invalid_output, compile_failed, runtime_error };

inline const char* to_string(Status s) {
    switch (s) {
    case Status::improved: return "improved";
    case Status::no_gain: return "no-gain";
    case Status::invalid_output: return "invalid-output";
    case Status::compile_failed: return "compile-failed";
    case Status::runtime_error: return "runtime-error";
    }
    return "?";
}

inline Status parse_status(const std::string& s) {
    for (auto st : {Status::improved, Status::no_gain, Status::invalid_output, Status::compile_failed, Status::runtime_error}) {
        if (s == to_string(st)) return st;
    }
    throw InvalidArgument("unknown run status '" + s + "'");
}

struct ReferenceFile {
    std::string path; // relative to the working directory
    std::string sha256;
    std::optional<std::string> bytes; // kept when captured locally, for divergence offsets
};

struct BuildSpec {
    std::string compile_cmd;  // {src} {bin}
    std::string exec_cmd;     // {bin} {args}
    std::string args;
    int runs = kDefaultRuns;
    std::optional<std::string> reference_stdout;
    std::vector<ReferenceFile> reference_files;
    std::string workdir;
    std::string source_name = "optimized.cu";
    std::string binary_name = "optimized.bin";
    double tolerance = 0.0; // 0 keeps comparison bit-exact
    std::string host_lock = (std::filesystem::temp_directory_path() / "optimas-measure.lock").string();
};

inline void validate(const BuildSpec& spec) {
    if (spec.runs < 1) throw InvalidArgument("runs must be at least 1");
    for (const char* p : {"{src}", "{bin}"}) {
        if (spec.compile_cmd.find(p) == std::string::npos) throw InvalidArgument(std::string("compile_cmd lacks ") + p);
    }
    if (spec.exec_cmd.find("{bin}") == std::string::npos) throw InvalidArgument("exec_cmd lacks {bin}");
    if (spec.tolerance < 0) throw InvalidArgument("tolerance must be non-negative");
}

inline std::string render_compile(const BuildSpec& spec, const std::string& src, const std::string& bin) {
    return text::substitute(spec.compile_cmd, std::map<std::string, std::string>{{"src", src}, {"bin", bin}});
}

inline std::string render_exec(const BuildSpec& spec, const std::string& bin) {
    return text::substitute(spec.exec_cmd, std::map<std::string, std::string>{{"bin", bin}, {"args", spec.args}});
}

inline std::string workdir_of(const BuildSpec& spec) {
    return spec.workdir.empty() ? std::filesystem::current_path().string() : spec.workdir;
}

// Single compilation of `source` into `<workdir>/<binary>`.
inline process::Result compile_source(const std::string& source, const BuildSpec& spec, const std::string& src_path,
                                      const std::string& bin_path) {
    text::write_file(src_path, source);
    std::error_code ec;
    std::filesystem::remove(bin_path, ec);
    auto cmd = render_compile(spec, src_path, bin_path);
    auto r = process::run_shell(cmd, workdir_of(spec));
    if (r.exit_code == 127) throw CompilerMissing(cmd);
    return r;
}

struct CompileAttempt {
    std::vector<std::string> prompts; // prompt text per chunk as sent (before part prefixes)
    std::string response;
    std::string log;
    bool parsed = false;
    bool compiled = false;
};

struct CompileOutcome {
    bool success = false;
    std::string binary_path;
    std::string source_path;
    prompt::OptimizedArtifact artifact; // last successfully parsed response
    std::vector<CompileAttempt> attempts;
    long long gateway_calls = 0;
    long long input_tokens = 0;
    long long output_tokens = 0;
    std::string log; // accumulated over attempts

    int compile_attempts() const { return static_cast<int>(attempts.size()); }
};

namespace detail {

inline std::string attempt_log_header(int attempt) { return "=== attempt " + std::to_string(attempt) + " ===\n"; }

} // namespace detail

// Sends the prompt, parses the response, and compiles; on failure appends
// the last 60 lines of the log as compiler feedback and asks again. At most
// 1 + max_retries gateway requests and compile attempts. A response without
// a usable code block counts as a failed attempt. Throws RetryExhausted
// when `throw_on_exhaustion` is set, otherwise reports success=false.
inline CompileOutcome compile_with_retry(const std::vector<prompt::PromptPackage>& chunks, const BuildSpec& spec,
                                         llm::Gateway& gateway, int max_retries = kDefaultMaxRetries,
                                         bool throw_on_exhaustion = false) {
    if (chunks.empty()) throw InvalidArgument("no prompt to send");
    if (max_retries < 0) throw InvalidArgument("max_retries must be non-negative");
    validate(spec);
    const auto dir = workdir_of(spec);
    std::filesystem::create_directories(dir);
    const auto src_path = (std::filesystem::path(dir) / spec.source_name).string();
    const auto bin_path = (std::filesystem::path(dir) / spec.binary_name).string();

    CompileOutcome out;
    out.source_path = src_path;
    std::string feedback;
    for (int attempt = 1; attempt <= 1 + max_retries; ++attempt) {
        CompileAttempt a;
        auto sent = chunks;
        if (attempt > 1) {
            auto& last = sent.back();
            last.prompt_text = prompt::with_compiler_feedback(last.prompt_text, feedback, attempt - 1);
        }
        for (const auto& c : sent) a.prompts.push_back(c.prompt_text);

        const auto calls_before = gateway.calls();
        auto reply = gateway.complete_chunked(sent);
        out.gateway_calls += gateway.calls() - calls_before;
        out.input_tokens += reply.input_tokens;
        out.output_tokens += reply.output_tokens;
        a.response = reply.text;

        try {
            out.artifact = prompt::parse_response(reply.text);
            out.artifact.raw_response = reply.text;
            a.parsed = true;
        } catch (const Error& e) {
            a.log = std::string("response rejected: ") + e.what() + "\n";
        }

        if (a.parsed) {
            auto r = compile_source(out.artifact.full_source, spec, src_path, bin_path);
            a.log = r.out + r.err;
            a.compiled = r.exit_code == 0;
            if (a.compiled && !std::filesystem::exists(bin_path)) {
                a.compiled = false;
                a.log += "compiler exited 0 but produced no binary at " + bin_path + "\n";
            }
        }
        out.log += detail::attempt_log_header(attempt) + a.log;
        if (!out.log.empty() && out.log.back() != '\n') out.log += '\n';
        feedback = process::tail_lines(a.log, kFeedbackTailLines);
        const bool ok = a.compiled;
        out.attempts.push_back(std::move(a));
        if (ok) {
            out.success = true;
            out.binary_path = bin_path;
            return out;
        }
    }
    if (throw_on_exhaustion) throw RetryExhausted(out.compile_attempts(), out.log);
    return out;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct ValidationResult {
    bool valid = false;
    std::string reason;
    std::optional<std::size_t> divergence_offset;
    std::string file; // empty for stdout
};

inline std::optional<std::size_t> first_divergence(std::string_view a, std::string_view b) {
    const auto n = std::min(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (a[i] != b[i]) return i;
    }
    if (a.size() != b.size()) return n;
    return std::nullopt;
}

namespace detail {

// Numeric substrings may differ by a relative tolerance; the text between
// them must match exactly.
inline bool within_tolerance(std::string_view ref, std::string_view got, double tol) {
    static const std::regex num(R"([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)");
    auto split = [](std::string_view s) {
        std::vector<std::pair<std::string, std::optional<double>>> parts;
        std::string str(s);
        std::size_t pos = 0;
        for (std::sregex_iterator it(str.begin(), str.end(), num), e; it != e; ++it) {
            parts.emplace_back(str.substr(pos, it->position() - pos), std::nullopt);
            parts.emplace_back(it->str(), text::parse_double(it->str()));
            pos = it->position() + it->length();
        }
        parts.emplace_back(str.substr(pos), std::nullopt);
        return parts;
    };
    auto a = split(ref), b = split(got);
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& [ta, va] = a[i];
        const auto& [tb, vb] = b[i];
        if (ta == tb) continue;
        if (!va || !vb) return false;
        if (std::abs(*va - *vb) > tol * std::max(1.0, std::abs(*va))) return false;
    }
    return true;
}

inline bool matches(std::string_view ref, std::string_view got, double tol) {
    return ref == got || (tol > 0 && within_tolerance(ref, got, tol));
}

inline std::string exec_in(const BuildSpec& spec, const std::string& binary, process::Result& r) {
    const auto dir = workdir_of(spec);
    for (const auto& f : spec.reference_files) {
        std::error_code ec;
        std::filesystem::remove(std::filesystem::path(dir) / f.path, ec);
    }
    r = process::run_shell(render_exec(spec, binary), dir);
    return dir;
}

} // namespace detail

struct Reference {
    std::string stdout_bytes;
    std::vector<ReferenceFile> files;
};

// Runs the baseline once and records stdout plus the named output files.
inline Reference capture_reference(const std::string& binary, const BuildSpec& spec,
                                   const std::vector<std::string>& output_files) {
    BuildSpec s = spec;
    s.reference_files.clear();
    for (const auto& f : output_files) s.reference_files.push_back({f, {}, {}});
    process::Result r;
    auto dir = detail::exec_in(s, binary, r);
    if (r.exit_code != 0) throw ExecutionFailure(r.exit_code, process::tail_lines(r.err, 20));
    Reference ref;
    ref.stdout_bytes = r.out;
    for (const auto& f : output_files) {
        auto p = (std::filesystem::path(dir) / f).string();
        if (!std::filesystem::exists(p)) throw IoError("baseline did not produce output file " + f);
        auto bytes = text::read_file(p);
        ref.files.push_back({f, hash::sha256_hex(bytes), bytes});
    }
    return ref;
}

inline ValidationResult validate_output(const std::string& binary, const BuildSpec& spec) {
    if (!spec.reference_stdout) throw InvalidArgument("no reference output captured");
    process::Result r;
    auto dir = detail::exec_in(spec, binary, r);
    if (r.exit_code != 0) throw ExecutionFailure(r.exit_code, process::tail_lines(r.err, 20));

    ValidationResult v;
    if (!detail::matches(*spec.reference_stdout, r.out, spec.tolerance)) {
        v.divergence_offset = first_divergence(*spec.reference_stdout, r.out);
        v.reason = "stdout differs from reference at byte " + std::to_string(v.divergence_offset.value_or(0));
        return v;
    }
    for (const auto& f : spec.reference_files) {
        auto p = (std::filesystem::path(dir) / f.path).string();
        if (!std::filesystem::exists(p)) {
            v.file = f.path;
            v.reason = "missing output file " + f.path;
            return v;
        }
        auto bytes = text::read_file(p);
        bool same = hash::sha256_hex(bytes) == f.sha256;
        if (!same && spec.tolerance > 0 && f.bytes) same = detail::matches(*f.bytes, bytes, spec.tolerance);
        if (!same) {
            v.file = f.path;
            if (f.bytes) v.divergence_offset = first_divergence(*f.bytes, bytes);
            v.reason = "output file " + f.path + " differs from reference" +
                       (v.divergence_offset ? " at byte " + std::to_string(*v.divergence_offset) : std::string());
            return v;
        }
    }
    v.valid = true;
    return v;
}

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

struct RuntimeStats {
    std::vector<std::int64_t> samples_ns;
    std::int64_t mean_ns = 0;
    std::int64_t min_ns = 0;
    std::int64_t max_ns = 0;

    static RuntimeStats from_samples(std::vector<std::int64_t> s) {
        if (s.empty()) throw InvalidArgument("no runtime samples");
        RuntimeStats r;
        r.min_ns = *std::min_element(s.begin(), s.end());
        r.max_ns = *std::max_element(s.begin(), s.end());
        long double sum = std::accumulate(s.begin(), s.end(), 0.0L);
        r.mean_ns = static_cast<std::int64_t>(std::llround(sum / static_cast<long double>(s.size())));
        r.mean_ns = std::clamp(r.mean_ns, r.min_ns, r.max_ns);
        r.samples_ns = std::move(s);
        return r;
    }
    bool operator==(const RuntimeStats&) const = default;
};

inline nlohmann::json to_json(const RuntimeStats& s) {
    return {{"samples_ns", s.samples_ns}, {"mean_ns", s.mean_ns}, {"min_ns", s.min_ns}, {"max_ns", s.max_ns}};
}

inline RuntimeStats runtime_stats_from_json(const nlohmann::json& j) {
    return RuntimeStats::from_samples(j.at("samples_ns").get<std::vector<std::int64_t>>());
}

// Executes the binary spec.runs times back to back while holding the
// host-wide measurement lock.
inline RuntimeStats measure_runtime(const std::string& binary, const BuildSpec& spec) {
    if (spec.runs < 1) throw InvalidArgument("runs must be at least 1");
    process::FileLock lock(spec.host_lock);
    const auto cmd = render_exec(spec, binary);
    const auto dir = workdir_of(spec);
    std::vector<std::int64_t> samples;
    for (int i = 0; i < spec.runs; ++i) {
        auto r = process::run_shell(cmd, dir);
        if (r.exit_code != 0) throw ExecutionFailure(r.exit_code, process::tail_lines(r.err, 20));
        samples.push_back(r.wall_ns);
    }
    return RuntimeStats::from_samples(std::move(samples));
}

inline double improvement_percent(double base_mean, double opt_mean) {
    if (base_mean == 0.0) throw ZeroBaseline();
    if (base_mean < 0.0 || opt_mean < 0.0) throw InvalidArgument("runtimes must be non-negative");
    return 100.0 * (base_mean - opt_mean) / base_mean;
}

inline double improvement_percent(const RuntimeStats& base, const RuntimeStats& opt) {
    return improvement_percent(static_cast<double>(base.mean_ns), static_cast<double>(opt.mean_ns));
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kResponseFile = "response.txt";
inline constexpr const char* kOptimizedFile = "optimized.src";
inline constexpr const char* kOriginalFile = "original.src";
inline constexpr const char* kBaselineStatsFile = "baseline_stats.json";
inline constexpr const char* kOptStatsFile = "opt_stats.json";
inline constexpr const char* kEarReportFile = "ear_report.json";
inline constexpr const char* kCorpusRecordFile = "corpus_record.json";
inline constexpr const char* kEvidenceFile = "evidence.json";
inline constexpr const char* kLogsDir = "logs";
inline constexpr const char* kDiagnosticsDir = "diagnostics";

inline std::string prompt_file(std::size_t i) { return "prompt_" + std::to_string(i) + ".txt"; }

struct RunManifest {
    std::string run_uuid;
    std::string created_at; // ISO-8601 UTC
    std::map<std::string, std::string> digests;
    nlohmann::json config_snapshot = nlohmann::json::object();
    Status status = Status::compile_failed;
    int compile_attempts = 0;
    long long gateway_calls = 0;
    std::optional<double> improvement;
    nlohmann::json extra = nlohmann::json::object();
};

inline nlohmann::json to_json(const RunManifest& m) {
    nlohmann::json j = {{"run_uuid", m.run_uuid},
                        {"created_at", m.created_at},
                        {"status", to_string(m.status)},
                        {"compile_attempts", m.compile_attempts},
                        {"gateway_calls", m.gateway_calls},
                        {"improvement_percent", m.improvement ? nlohmann::json(*m.improvement) : nlohmann::json(nullptr)},
                        {"digests", m.digests},
                        {"config_snapshot", m.config_snapshot}};
    for (const auto& [k, v] : m.extra.items()) j[k] = v;
    return j;
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
    RunManifest m;
    m.run_uuid = j.at("run_uuid").get<std::string>();
    m.created_at = j.at("created_at").get<std::string>();
    m.status = parse_status(j.at("status").get<std::string>());
    m.compile_attempts = j.value("compile_attempts", 0);
    m.gateway_calls = j.value("gateway_calls", 0LL);
    if (j.contains("improvement_percent") && j["improvement_percent"].is_number()) {
        m.improvement = j["improvement_percent"].get<double>();
    }
    m.digests = j.at("digests").get<std::map<std::string, std::string>>();
    m.config_snapshot = j.value("config_snapshot", nlohmann::json::object());
    static const std::set<std::string> known = {"run_uuid", "created_at", "status", "compile_attempts", "gateway_calls",
                                                "improvement_percent", "digests", "config_snapshot"};
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) m.extra[k] = v;
    }
    return m;
}

namespace detail {

inline std::tm utc_now(std::time_t& t) {
    t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    return tm;
}

inline std::string format_tm(const std::tm& tm, const char* fmt) {
    char buf[32];
    std::strftime(buf, sizeof buf, fmt, &tm);
    return buf;
}

inline bool safe_relative(const std::string& name) {
    std::filesystem::path p(name);
    if (name.empty() || p.is_absolute()) return false;
    for (const auto& part : p) {
        if (part == "..") return false;
    }
    return true;
}

} // namespace detail

// `<root>/<YYYYMMDDTHHMMSSZ>-<uuid>/`; every file written through put() gets
// a digest in the manifest.
class RunDirectory {
public:
    static RunDirectory create(const std::string& root, std::string uuid = {}) {
        RunDirectory d;
        d.manifest_.run_uuid = uuid.empty() ? hash::random_uuid() : std::move(uuid);
        std::time_t t{};
        auto tm = detail::utc_now(t);
        d.manifest_.created_at = detail::format_tm(tm, "%Y-%m-%dT%H:%M:%SZ");
        d.name_ = detail::format_tm(tm, "%Y%m%dT%H%M%SZ") + "-" + d.manifest_.run_uuid;
        d.path_ = (std::filesystem::path(root) / d.name_).string();
        std::error_code ec;
        std::filesystem::create_directories(std::filesystem::path(d.path_) / kLogsDir, ec);
        if (ec) throw WriteFailure("cannot create run directory " + d.path_ + ": " + ec.message());
        return d;
    }

    // Opens an existing run directory, verifying every digest.
    static RunDirectory open(const std::string& path) {
        RunDirectory d;
        d.path_ = std::filesystem::path(path).lexically_normal().string();
        if (!d.path_.empty() && d.path_.back() == '/') d.path_.pop_back();
        d.name_ = std::filesystem::path(d.path_).filename().string();
        auto mpath = std::filesystem::path(d.path_) / kManifestFile;
        if (!std::filesystem::exists(mpath)) throw IoError("no manifest in " + d.path_);
        try {
            d.manifest_ = manifest_from_json(nlohmann::json::parse(text::read_file(mpath.string())));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(mpath.string(), 0, e.what());
        }
        d.verify();
        return d;
    }

    void verify() const {
        for (const auto& [name, digest] : manifest_.digests) {
            auto p = std::filesystem::path(path_) / name;
            if (!std::filesystem::exists(p)) throw DigestMismatch(name, digest, "<missing>");
            auto actual = hash::sha256_file(p.string());
            if (actual != digest) throw DigestMismatch(name, digest, actual);
        }
    }

    void put(const std::string& name, std::string_view bytes) {
        if (!detail::safe_relative(name)) throw WriteFailure("artifact name must be relative: " + name);
        auto p = std::filesystem::path(path_) / name;
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
        try {
            text::write_file(p.string(), bytes);
        } catch (const IoError& e) {
            throw WriteFailure(e.what());
        }
        manifest_.digests[name] = hash::sha256_hex(bytes);
    }

    void put_json(const std::string& name, const nlohmann::json& j) { put(name, j.dump(2) + "\n"); }

    // Records the digest of a file already written inside the directory.
    void adopt(const std::string& name) {
        if (!detail::safe_relative(name)) throw WriteFailure("artifact name must be relative: " + name);
        auto p = std::filesystem::path(path_) / name;
        if (!std::filesystem::is_regular_file(p)) throw WriteFailure("no such artifact: " + p.string());
        manifest_.digests[name] = hash::sha256_file(p.string());
    }

    std::string read(const std::string& name) const {
        if (!detail::safe_relative(name)) throw InvalidArgument("artifact name must be relative: " + name);
        return text::read_file((std::filesystem::path(path_) / name).string());
    }
    bool has(const std::string& name) const { return manifest_.digests.count(name) > 0; }

    // Writes manifest.json. The manifest itself is not in its digest map.
    void write_manifest() const {
        try {
            text::write_file((std::filesystem::path(path_) / kManifestFile).string(), to_json(manifest_).dump(2) + "\n");
        } catch (const IoError& e) {
            throw WriteFailure(e.what());
        }
    }

    const std::string& path() const { return path_; }
    const std::string& name() const { return name_; }
    RunManifest& manifest() { return manifest_; }
    const RunManifest& manifest() const { return manifest_; }

private:
    std::string path_;
    std::string name_;
    RunManifest manifest_;
};

} // namespace optimas::harness
