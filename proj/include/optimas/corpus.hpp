#pragma once

// Corpus records for completed runs and the append-only corpus store
// (`corpus/index.ndjson` plus `corpus/records/<uuid>.json` under the root).

#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "optimas/error.hpp"
#include "optimas/harness.hpp"
#include "optimas/hash.hpp"
#include "optimas/process.hpp"
#include "optimas/text.hpp"

namespace optimas::corpus {

inline constexpr const char* kCorpusDir = "corpus";
inline constexpr const char* kIndexFile = "index.ndjson";
inline constexpr const char* kRecordsDir = "records";
inline constexpr const char* kLockFile = "index.lock";

class IncompleteRun : public Error {
public:
    explicit IncompleteRun(const std::string& dir) : Error("run directory has no manifest: " + dir) {}
};

struct CorpusRecord {
    std::string app;
    std::string prompt_url;
    std::string llm;
    std::string hw;
    std::string sw;
    std::string compile;
    std::string exec;
    std::string opt_code_url;
    std::vector<std::string> applied;
    std::vector<std::string> ignored;
    std::string errors;
    std::string base_rt;
    std::string opt_rt;
    std::string config; // input configuration (execution arguments)

    bool operator==(const CorpusRecord&) const = default;
};

// Serialized with keys in schema order.
inline std::string dump(const CorpusRecord& r, int indent = -1) {
    nlohmann::ordered_json j;
    j["App"] = r.app;
    j["Prompt"] = r.prompt_url;
    j["LLM"] = r.llm;
    j["HW"] = r.hw;
    j["SW"] = r.sw;
    j["Compile"] = r.compile;
    j["Exec"] = r.exec;
    j["Opt_Code"] = r.opt_code_url;
    j["Applied"] = r.applied;
    j["Ignored"] = r.ignored;
    j["Errors"] = r.errors;
    j["Base_RT"] = r.base_rt;
    j["Opt_RT"] = r.opt_rt;
    j["Config"] = r.config;
    return j.dump(indent);
}

inline nlohmann::json to_json(const CorpusRecord& r) { return nlohmann::json::parse(dump(r)); }

inline CorpusRecord record_from_json(const nlohmann::json& j) {
    CorpusRecord r;
    auto str = [&](const char* k) { return j.contains(k) && j[k].is_string() ? j[k].get<std::string>() : std::string(); };
    auto list = [&](const char* k) {
        return j.contains(k) && j[k].is_array() ? j[k].get<std::vector<std::string>>() : std::vector<std::string>{};
    };
    r.app = str("App");
    r.prompt_url = str("Prompt");
    r.llm = str("LLM");
    r.hw = str("HW");
    r.sw = str("SW");
    r.compile = str("Compile");
    r.exec = str("Exec");
    r.opt_code_url = str("Opt_Code");
    r.applied = list("Applied");
    r.ignored = list("Ignored");
    r.errors = str("Errors");
    r.base_rt = str("Base_RT");
    r.opt_rt = str("Opt_RT");
    r.config = str("Config");
    return r;
}

// ---------------------------------------------------------------------------
// Durations: decimal milliseconds with an "ms" suffix, e.g. "12.4ms".
// ---------------------------------------------------------------------------

inline std::string format_duration_ns(std::int64_t ns) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(ns) / 1e6);
    std::string s = buf;
    while (!s.empty() && s.back() == '0') s.pop_back();
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s + "ms";
}

// Milliseconds, or nullopt when the string is not "<decimal>ms".
inline std::optional<double> parse_duration_ms(std::string_view s) {
    if (s.size() < 3 || s.substr(s.size() - 2) != "ms") return std::nullopt;
    auto num = s.substr(0, s.size() - 2);
    for (char c : num) {
        if (!(std::isdigit(static_cast<unsigned char>(c)) || c == '.')) return std::nullopt;
    }
    return text::parse_double(num);
}

// ---------------------------------------------------------------------------
// Emission and validation
// ---------------------------------------------------------------------------

struct RecordInputs {
    std::string app;
    std::string llm;
    std::string hw;
    std::string sw;
    std::string compile; // rendered with file names relative to the run directory
    std::string exec;
    std::string config;
    std::string prompt_artifact = harness::prompt_file(0);
    std::string opt_code_artifact = harness::kOptimizedFile; // empty when no code was produced
    std::vector<std::string> applied;
    std::vector<std::string> ignored;
    std::string errors;
    std::optional<std::int64_t> base_mean_ns;
    std::optional<std::int64_t> opt_mean_ns;
};

// URLs are relative to the corpus root, which is the parent of the run
// directory.
inline std::string run_url(const harness::RunDirectory& run, const std::string& artifact) {
    return "./" + run.name() + "/" + artifact;
}

inline CorpusRecord emit_record(const harness::RunDirectory& run, const RecordInputs& in) {
    if (!std::filesystem::exists(std::filesystem::path(run.path()) / harness::kManifestFile)) throw IncompleteRun(run.path());
    CorpusRecord r;
    r.app = in.app;
    r.prompt_url = run.has(in.prompt_artifact) ? run_url(run, in.prompt_artifact) : std::string();
    r.llm = in.llm;
    r.hw = in.hw;
    r.sw = in.sw;
    r.compile = in.compile;
    r.exec = in.exec;
    r.opt_code_url = !in.opt_code_artifact.empty() && run.has(in.opt_code_artifact) ? run_url(run, in.opt_code_artifact)
                                                                                      : std::string();
    r.applied = in.applied;
    r.ignored = in.ignored;
    r.errors = in.errors;
    if (in.base_mean_ns) r.base_rt = format_duration_ns(*in.base_mean_ns);
    if (in.opt_mean_ns) r.opt_rt = format_duration_ns(*in.opt_mean_ns);
    r.config = in.config;
    return r;
}

namespace detail {

// Checks one URL; returns a violation message or empty.
inline std::string check_url(const std::string& field, const std::string& url, const std::filesystem::path& root) {
    if (url.empty()) return field + ": empty path";
    if (!text::starts_with(url, "./")) return field + ": path must start with ./: " + url;
    std::filesystem::path rel(url.substr(2));
    if (rel.empty() || rel.is_absolute()) return field + ": path escapes the corpus root: " + url;
    for (const auto& part : rel) {
        if (part == "..") return field + ": path escapes the corpus root: " + url;
    }
    auto full = root / rel;
    if (!std::filesystem::is_regular_file(full)) return field + ": dangling path " + url;

    auto it = rel.begin();
    auto run_dir = root / *it;
    std::filesystem::path artifact;
    for (++it; it != rel.end(); ++it) artifact /= *it;
    auto manifest_path = run_dir / harness::kManifestFile;
    if (!std::filesystem::exists(manifest_path)) return field + ": no manifest for " + url;
    try {
        auto m = nlohmann::json::parse(text::read_file(manifest_path.string()));
        const auto& digests = m.at("digests");
        auto key = artifact.generic_string();
        if (!digests.contains(key)) return field + ": " + url + " is not listed in the run manifest";
        if (digests[key].get<std::string>() != hash::sha256_file(full.string())) return field + ": digest mismatch for " + url;
    } catch (const nlohmann::json::exception& e) {
        return field + ": unreadable manifest for " + url + " (" + e.what() + ")";
    }
    return {};
}

} // namespace detail

// Empty result means the record is valid.
inline std::vector<std::string> validate_record(const CorpusRecord& r, const std::string& corpus_root) {
    std::vector<std::string> v;
    const std::filesystem::path root(corpus_root);
    auto require = [&](const char* field, const std::string& value) {
        if (text::trim(value).empty()) v.push_back(std::string(field) + ": missing");
    };
    require("App", r.app);
    require("LLM", r.llm);
    require("HW", r.hw);
    require("SW", r.sw);
    require("Compile", r.compile);
    require("Exec", r.exec);

    if (auto m = detail::check_url("Prompt", r.prompt_url, root); !m.empty()) v.push_back(m);
    if (!r.opt_code_url.empty()) {
        if (auto m = detail::check_url("Opt_Code", r.opt_code_url, root); !m.empty()) v.push_back(m);
    } else if (r.errors.empty()) {
        v.push_back("Opt_Code: missing without an error note");
    }

    auto check_duration = [&](const char* field, const std::string& s) {
        if (s.empty()) {
            if (r.errors.empty()) v.push_back(std::string(field) + ": missing without an error note");
            return;
        }
        auto ms = parse_duration_ms(s);
        if (!ms) v.push_back(std::string(field) + ": malformed duration \"" + s + "\"");
        else if (!(*ms > 0)) v.push_back(std::string(field) + ": duration must be positive, got \"" + s + "\"");
    };
    check_duration("Base_RT", r.base_rt);
    check_duration("Opt_RT", r.opt_rt);
    return v;
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

struct IndexEntry {
    std::string id;
    std::string path; // relative to the corpus root
    CorpusRecord record;
};

inline std::filesystem::path corpus_dir(const std::string& root) { return std::filesystem::path(root) / kCorpusDir; }

// Appends one record; serialized across processes by the index lock.
inline IndexEntry append_record(const std::string& root, const std::string& id, const CorpusRecord& r) {
    if (id.empty() || !harness::detail::safe_relative(id) || id.find('/') != std::string::npos) {
        throw InvalidArgument("invalid record id '" + id + "'");
    }
    auto dir = corpus_dir(root);
    std::filesystem::create_directories(dir / kRecordsDir);
    process::FileLock lock((dir / kLockFile).string());

    auto rel = std::string(kCorpusDir) + "/" + kRecordsDir + "/" + id + ".json";
    auto path = std::filesystem::path(root) / rel;
    if (std::filesystem::exists(path)) throw InvalidArgument("corpus already holds a record with id " + id);
    text::write_file(path.string(), dump(r, 2) + "\n");

    nlohmann::ordered_json line;
    line["id"] = id;
    line["path"] = "./" + rel;
    line["record"] = nlohmann::ordered_json::parse(dump(r));
    std::ofstream idx(dir / kIndexFile, std::ios::app | std::ios::binary);
    if (!idx) throw IoError("cannot open corpus index in " + dir.string());
    idx << line.dump() << '\n';
    idx.flush();
    if (!idx) throw IoError("cannot append to corpus index in " + dir.string());
    return {id, "./" + rel, r};
}

inline std::vector<IndexEntry> read_index(const std::string& root) {
    std::vector<IndexEntry> out;
    auto p = corpus_dir(root) / kIndexFile;
    if (!std::filesystem::exists(p)) return out;
    std::ifstream in(p, std::ios::binary);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (text::trim(line).empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            out.push_back({j.at("id").get<std::string>(), j.at("path").get<std::string>(), record_from_json(j.at("record"))});
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(p.string(), n, e.what());
        }
    }
    return out;
}

inline CorpusRecord read_record(const std::string& root, const std::string& id) {
    auto p = corpus_dir(root) / kRecordsDir / (id + ".json");
    try {
        return record_from_json(nlohmann::json::parse(text::read_file(p.string())));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(p.string(), 0, e.what());
    }
}

} // namespace optimas::corpus
