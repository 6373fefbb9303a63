#pragma once

// config.yml loading: defaults, range checks, and path resolution against
// the config file's directory.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "optimas/counters.hpp"
#include "optimas/ear.hpp"
#include "optimas/error.hpp"
#include "optimas/gateway.hpp"
#include "optimas/harness.hpp"
#include "optimas/insight.hpp"
#include "optimas/text.hpp"

namespace optimas::config {

class SchemaViolation : public Error {
public:
    SchemaViolation(std::string key, std::string reason)
        : Error("config key '" + key + "': " + reason), key_(std::move(key)), reason_(std::move(reason)) {}
    const std::string& key() const noexcept { return key_; }
    const std::string& reason() const noexcept { return reason_; }

private:
    std::string key_;
    std::string reason_;
};

struct AppBlock {
    std::string name;
    std::string source;                         // resolved path
    std::map<std::string, std::string> kernels; // kernel -> source file (resolved)
    std::string hw = "unspecified";
    std::string sw = "unspecified";
};

struct SourcePaths {
    std::string kernels;
    std::string pcsamples;
    std::string counters;
    std::string roofline;
};

struct SourcesBlock {
    SourcePaths paths;
    std::string counter_dictionary;
    bool pc = false;
    bool ia = false;
    bool roofline = false;
    std::optional<SourcePaths> post; // re-profiled diagnostics of the optimized code
};

struct ProfilerBlock {
    std::string command;              // template; empty disables the profile stage
    std::vector<std::string> outputs; // files the command must produce
};

struct Thresholds {
    double alpha = insight::kDefaultAlpha;
    double tau_sat = insight::kDefaultTauSat;
    double tau_saliency = insight::kDefaultTauSaliency;
    int top_n = insight::kDefaultTopN;
    int kappa = 5;
    int tau_pool = 5;
    int ensembles = 10;
    std::uint64_t seed = 0;
};

struct PromptBlock {
    std::size_t chunk_limit = 0; // characters; 0 sends a single prompt
    std::optional<std::vector<std::string>> pitfalls;
};

struct EvalBlock {
    std::string compile_cmd;
    std::string profile_compile_cmd; // build used for profiling; the timed build uses compile_cmd
    std::string exec_cmd = "{bin} {args}"; // {bin} is an absolute path
    std::string args;
    int runs = harness::kDefaultRuns;
    std::string reference_capture = "auto"; // or a directory holding `stdout` and the output files
    int max_compile_retries = harness::kDefaultMaxRetries;
    std::vector<std::string> output_files;
    double tolerance = 0.0;
};

struct EarBlock {
    int window = ear::kDefaultWindow;
    std::vector<ear::DirectionRule> rules;
};

struct PipelineConfig {
    std::string base_dir; // directory relative paths were resolved against
    AppBlock app;
    SourcesBlock sources;
    ProfilerBlock profiler;
    Thresholds thresholds;
    llm::BackendConfig llm;
    PromptBlock prompt;
    EvalBlock eval;
    EarBlock ear;
    std::string output_root;
};

namespace detail {

inline std::string resolve(const std::string& base, const std::string& p) {
    if (p.empty()) return p;
    std::filesystem::path path(p);
    if (path.is_absolute()) return path.lexically_normal().string();
    return (std::filesystem::path(base) / path).lexically_normal().string();
}

template <class T>
T scalar(const YAML::Node& n, const std::string& key, const T& fallback) {
    if (!n || n.IsNull()) return fallback;
    if (!n.IsScalar()) throw SchemaViolation(key, "expected a scalar");
    try {
        return n.as<T>();
    } catch (const YAML::Exception&) {
        throw SchemaViolation(key, "cannot parse '" + n.Scalar() + "'");
    }
}

inline std::vector<std::string> string_list(const YAML::Node& n, const std::string& key) {
    std::vector<std::string> out;
    if (!n || n.IsNull()) return out;
    if (!n.IsSequence()) throw SchemaViolation(key, "expected a list");
    for (std::size_t i = 0; i < n.size(); ++i) out.push_back(scalar<std::string>(n[i], key + "[" + std::to_string(i) + "]", ""));
    return out;
}

inline void require_map(const YAML::Node& n, const std::string& key) {
    if (n && !n.IsNull() && !n.IsMap()) throw SchemaViolation(key, "expected a mapping");
}

// absent or null optional blocks read as empty mappings
inline YAML::Node block(const YAML::Node& n, const std::string& key) {
    require_map(n, key);
    return n && !n.IsNull() ? n : YAML::Node(YAML::NodeType::Map);
}

inline void check_unknown(const YAML::Node& n, const std::string& prefix, std::initializer_list<const char*> known) {
    if (!n || !n.IsMap()) return;
    for (const auto& kv : n) {
        auto k = kv.first.as<std::string>();
        bool ok = false;
        for (const char* kn : known) ok = ok || k == kn;
        if (!ok) throw SchemaViolation(prefix.empty() ? k : prefix + "." + k, "unknown key");
    }
}

inline void in_unit(double v, const std::string& key, bool allow_zero = false) {
    if (!(v <= 1.0 && (allow_zero ? v >= 0.0 : v > 0.0))) {
        throw SchemaViolation(key, std::string("must lie in ") + (allow_zero ? "[0, 1]" : "(0, 1]"));
    }
}

inline void positive(long long v, const std::string& key) {
    if (v < 1) throw SchemaViolation(key, "must be a positive integer");
}

inline SourcePaths source_paths(const YAML::Node& n, const std::string& prefix, const std::string& base) {
    SourcePaths p;
    p.kernels = resolve(base, scalar<std::string>(n["kernels"], prefix + ".kernels", ""));
    p.pcsamples = resolve(base, scalar<std::string>(n["pcsamples"], prefix + ".pcsamples", ""));
    p.counters = resolve(base, scalar<std::string>(n["counters"], prefix + ".counters", ""));
    p.roofline = resolve(base, scalar<std::string>(n["roofline"], prefix + ".roofline", ""));
    return p;
}

} // namespace detail

inline PipelineConfig from_yaml(const YAML::Node& root, const std::string& base_dir) {
    using namespace detail;
    if (!root || !root.IsMap()) throw SchemaViolation("<root>", "expected a mapping");
    check_unknown(root, "", {"app", "sources", "profiler", "thresholds", "llm", "prompt", "eval", "ear", "output_root"});

    PipelineConfig c;
    c.base_dir = std::filesystem::absolute(base_dir.empty() ? "." : base_dir).lexically_normal().string();
    const auto& base = c.base_dir;

    // app
    auto app = root["app"];
    if (!app || !app.IsMap()) throw SchemaViolation("app", "required mapping");
    check_unknown(app, "app", {"name", "source", "kernels", "hw", "sw"});
    c.app.name = scalar<std::string>(app["name"], "app.name", "");
    if (c.app.name.empty()) throw SchemaViolation("app.name", "required");
    c.app.source = resolve(base, scalar<std::string>(app["source"], "app.source", ""));
    if (c.app.source.empty()) throw SchemaViolation("app.source", "required");
    require_map(app["kernels"], "app.kernels");
    if (app["kernels"]) {
        for (const auto& kv : app["kernels"]) {
            auto k = kv.first.as<std::string>();
            c.app.kernels[k] = resolve(base, scalar<std::string>(kv.second, "app.kernels." + k, ""));
        }
    }
    c.app.hw = scalar<std::string>(app["hw"], "app.hw", c.app.hw);
    c.app.sw = scalar<std::string>(app["sw"], "app.sw", c.app.sw);

    // sources
    auto src = root["sources"];
    if (!src || !src.IsMap()) throw SchemaViolation("sources", "required mapping");
    check_unknown(src, "sources", {"kernels", "pcsamples", "counters", "roofline", "counter_dictionary", "enable", "post"});
    c.sources.paths = source_paths(src, "sources", base);
    c.sources.counter_dictionary = resolve(base, scalar<std::string>(src["counter_dictionary"], "sources.counter_dictionary", ""));
    auto en = block(src["enable"], "sources.enable");
    check_unknown(en, "sources.enable", {"pc", "ia", "roofline"});
    c.sources.pc = scalar<bool>(en["pc"], "sources.enable.pc", !c.sources.paths.pcsamples.empty());
    c.sources.ia = scalar<bool>(en["ia"], "sources.enable.ia", !c.sources.paths.counters.empty());
    c.sources.roofline = scalar<bool>(en["roofline"], "sources.enable.roofline", !c.sources.paths.roofline.empty());
    if (!c.sources.pc && !c.sources.ia && !c.sources.roofline) throw SchemaViolation("sources", "at least one diagnostic source must be enabled");
    if (c.sources.pc && c.sources.paths.pcsamples.empty()) throw SchemaViolation("sources.pcsamples", "required when PC sampling is enabled");
    if (c.sources.ia && c.sources.paths.counters.empty()) throw SchemaViolation("sources.counters", "required when counter selection is enabled");
    if (c.sources.roofline && c.sources.paths.roofline.empty()) throw SchemaViolation("sources.roofline", "required when roofline is enabled");
    if (auto post = src["post"]; post && !post.IsNull()) {
        require_map(post, "sources.post");
        check_unknown(post, "sources.post", {"kernels", "pcsamples", "counters", "roofline"});
        c.sources.post = source_paths(post, "sources.post", base);
    }

    // profiler
    if (auto p = root["profiler"]; p && !p.IsNull()) {
        require_map(p, "profiler");
        check_unknown(p, "profiler", {"command", "outputs"});
        c.profiler.command = scalar<std::string>(p["command"], "profiler.command", "");
        c.profiler.outputs = string_list(p["outputs"], "profiler.outputs");
    }

    // thresholds
    auto th = block(root["thresholds"], "thresholds");
    check_unknown(th, "thresholds", {"alpha", "tau_sat", "tau_saliency", "top_n", "kappa", "tau_pool", "ensembles", "seed"});
    auto& t = c.thresholds;
    t.alpha = scalar<double>(th["alpha"], "thresholds.alpha", t.alpha);
    in_unit(t.alpha, "thresholds.alpha");
    t.tau_sat = scalar<double>(th["tau_sat"], "thresholds.tau_sat", t.tau_sat);
    in_unit(t.tau_sat, "thresholds.tau_sat");
    t.tau_saliency = scalar<double>(th["tau_saliency"], "thresholds.tau_saliency", t.tau_saliency);
    in_unit(t.tau_saliency, "thresholds.tau_saliency");
    t.top_n = scalar<int>(th["top_n"], "thresholds.top_n", t.top_n);
    positive(t.top_n, "thresholds.top_n");
    t.kappa = scalar<int>(th["kappa"], "thresholds.kappa", t.kappa);
    positive(t.kappa, "thresholds.kappa");
    t.tau_pool = scalar<int>(th["tau_pool"], "thresholds.tau_pool", t.tau_pool);
    positive(t.tau_pool, "thresholds.tau_pool");
    t.ensembles = scalar<int>(th["ensembles"], "thresholds.ensembles", t.ensembles);
    positive(t.ensembles, "thresholds.ensembles");
    t.seed = scalar<std::uint64_t>(th["seed"], "thresholds.seed", t.seed);

    // llm
    auto l = block(root["llm"], "llm");
    check_unknown(l, "llm", {"kind", "model", "temperature", "endpoint", "auth_env", "timeout_s", "max_output_tokens",
                             "in_flight_limit", "fixtures"});
    try {
        c.llm.kind = llm::parse_backend_kind(scalar<std::string>(l["kind"], "llm.kind", "scripted-mock"));
    } catch (const InvalidArgument& e) {
        throw SchemaViolation("llm.kind", e.what());
    }
    c.llm.model_name = scalar<std::string>(l["model"], "llm.model", c.llm.kind == llm::BackendKind::scripted_mock ? "mock" : "");
    if (c.llm.model_name.empty()) throw SchemaViolation("llm.model", "required for " + std::string(llm::to_string(c.llm.kind)));
    c.llm.temperature = scalar<double>(l["temperature"], "llm.temperature", llm::kDefaultTemperature);
    in_unit(c.llm.temperature, "llm.temperature", true);
    c.llm.endpoint = scalar<std::string>(l["endpoint"], "llm.endpoint", "");
    c.llm.auth_env_var = scalar<std::string>(l["auth_env"], "llm.auth_env", "");
    c.llm.request_timeout_s = scalar<int>(l["timeout_s"], "llm.timeout_s", c.llm.request_timeout_s);
    positive(c.llm.request_timeout_s, "llm.timeout_s");
    c.llm.max_output_tokens = scalar<int>(l["max_output_tokens"], "llm.max_output_tokens", c.llm.max_output_tokens);
    positive(c.llm.max_output_tokens, "llm.max_output_tokens");
    c.llm.in_flight_limit = scalar<int>(l["in_flight_limit"], "llm.in_flight_limit", c.llm.in_flight_limit);
    positive(c.llm.in_flight_limit, "llm.in_flight_limit");
    c.llm.mock_dir = resolve(base, scalar<std::string>(l["fixtures"], "llm.fixtures", ""));
    if (c.llm.kind == llm::BackendKind::scripted_mock && c.llm.mock_dir.empty()) throw SchemaViolation("llm.fixtures", "required for scripted-mock");
    if (c.llm.kind != llm::BackendKind::scripted_mock && c.llm.endpoint.empty()) throw SchemaViolation("llm.endpoint", "required for network backends");
    if (c.llm.kind == llm::BackendKind::remote_http && c.llm.auth_env_var.empty()) throw SchemaViolation("llm.auth_env", "required for remote-http");

    // prompt
    auto pr = block(root["prompt"], "prompt");
    check_unknown(pr, "prompt", {"chunk_limit", "pitfalls"});
    auto limit = scalar<long long>(pr["chunk_limit"], "prompt.chunk_limit", 0);
    if (limit < 0) throw SchemaViolation("prompt.chunk_limit", "must be non-negative");
    c.prompt.chunk_limit = static_cast<std::size_t>(limit);
    if (pr && pr["pitfalls"]) c.prompt.pitfalls = string_list(pr["pitfalls"], "prompt.pitfalls");

    // eval
    auto ev = block(root["eval"], "eval");
    check_unknown(ev, "eval", {"compile_cmd", "profile_compile_cmd", "exec_cmd", "args", "runs", "reference_capture",
                               "max_compile_retries", "output_files", "tolerance"});
    auto& e = c.eval;
    e.compile_cmd = scalar<std::string>(ev["compile_cmd"], "eval.compile_cmd", "");
    e.profile_compile_cmd = scalar<std::string>(ev["profile_compile_cmd"], "eval.profile_compile_cmd", "");
    e.exec_cmd = scalar<std::string>(ev["exec_cmd"], "eval.exec_cmd", e.exec_cmd);
    e.args = scalar<std::string>(ev["args"], "eval.args", "");
    e.runs = scalar<int>(ev["runs"], "eval.runs", e.runs);
    positive(e.runs, "eval.runs");
    e.reference_capture = scalar<std::string>(ev["reference_capture"], "eval.reference_capture", "auto");
    if (e.reference_capture != "auto") e.reference_capture = resolve(base, e.reference_capture);
    e.max_compile_retries = scalar<int>(ev["max_compile_retries"], "eval.max_compile_retries", e.max_compile_retries);
    if (e.max_compile_retries < 0) throw SchemaViolation("eval.max_compile_retries", "must be non-negative");
    e.output_files = string_list(ev["output_files"], "eval.output_files");
    e.tolerance = scalar<double>(ev["tolerance"], "eval.tolerance", 0.0);
    if (e.tolerance < 0) throw SchemaViolation("eval.tolerance", "must be non-negative");
    for (auto [cmd, key] : {std::pair{&e.compile_cmd, "eval.compile_cmd"}, {&e.profile_compile_cmd, "eval.profile_compile_cmd"}}) {
        if (cmd->empty()) continue;
        for (const char* p : {"{src}", "{bin}"}) {
            if (cmd->find(p) == std::string::npos) throw SchemaViolation(key, std::string("missing placeholder ") + p);
        }
    }
    if (e.exec_cmd.find("{bin}") == std::string::npos) throw SchemaViolation("eval.exec_cmd", "missing placeholder {bin}");

    // ear
    auto er = block(root["ear"], "ear");
    check_unknown(er, "ear", {"window", "rules"});
    c.ear.window = scalar<int>(er["window"], "ear.window", c.ear.window);
    if (c.ear.window < 0) throw SchemaViolation("ear.window", "must be non-negative");
    if (er && er["rules"]) {
        auto rules = er["rules"];
        if (!rules.IsSequence()) throw SchemaViolation("ear.rules", "expected a list");
        for (std::size_t i = 0; i < rules.size(); ++i) {
            auto key = "ear.rules[" + std::to_string(i) + "]";
            require_map(rules[i], key);
            ear::DirectionRule r;
            r.pattern = scalar<std::string>(rules[i]["pattern"], key + ".pattern", "");
            if (r.pattern.empty()) throw SchemaViolation(key + ".pattern", "required");
            try {
                std::regex re(r.pattern);
            } catch (const std::regex_error&) {
                throw SchemaViolation(key + ".pattern", "invalid regular expression");
            }
            r.metric = scalar<std::string>(rules[i]["metric"], key + ".metric", "");
            try {
                r.expected = ear::parse_direction(scalar<std::string>(rules[i]["expected"], key + ".expected", ""));
            } catch (const InvalidArgument& ex) {
                throw SchemaViolation(key + ".expected", ex.what());
            }
            c.ear.rules.push_back(std::move(r));
        }
    }

    c.output_root = resolve(base, scalar<std::string>(root["output_root"], "output_root", "runs"));
    return c;
}

inline PipelineConfig parse_config_text(const std::string& body, const std::string& base_dir) {
    YAML::Node root;
    try {
        root = YAML::Load(body);
    } catch (const YAML::Exception& e) {
        throw SchemaViolation("<document>", e.what());
    }
    return from_yaml(root, base_dir);
}

inline PipelineConfig load_config(const std::string& path) {
    if (!std::filesystem::exists(path)) throw IoError("config file not found: " + path);
    auto dir = std::filesystem::absolute(path).parent_path().string();
    return parse_config_text(text::read_file(path), dir);
}

// Fully resolved configuration, echoed into each run manifest.
inline nlohmann::json to_json(const PipelineConfig& c) {
    auto paths = [](const SourcePaths& p) {
        return nlohmann::json{{"kernels", p.kernels}, {"pcsamples", p.pcsamples}, {"counters", p.counters}, {"roofline", p.roofline}};
    };
    nlohmann::json rules = nlohmann::json::array();
    for (const auto& r : c.ear.rules) rules.push_back({{"pattern", r.pattern}, {"metric", r.metric}, {"expected", ear::to_string(r.expected)}});
    nlohmann::json j;
    j["app"] = {{"name", c.app.name}, {"source", c.app.source}, {"kernels", c.app.kernels}, {"hw", c.app.hw}, {"sw", c.app.sw}};
    j["sources"] = paths(c.sources.paths);
    j["sources"]["counter_dictionary"] = c.sources.counter_dictionary;
    j["sources"]["enable"] = {{"pc", c.sources.pc}, {"ia", c.sources.ia}, {"roofline", c.sources.roofline}};
    j["sources"]["post"] = c.sources.post ? paths(*c.sources.post) : nlohmann::json(nullptr);
    j["profiler"] = {{"command", c.profiler.command}, {"outputs", c.profiler.outputs}};
    j["thresholds"] = {{"alpha", c.thresholds.alpha},         {"tau_sat", c.thresholds.tau_sat},
                       {"tau_saliency", c.thresholds.tau_saliency}, {"top_n", c.thresholds.top_n},
                       {"kappa", c.thresholds.kappa},         {"tau_pool", c.thresholds.tau_pool},
                       {"ensembles", c.thresholds.ensembles}, {"seed", c.thresholds.seed}};
    j["llm"] = {{"kind", llm::to_string(c.llm.kind)},
                {"model", c.llm.model_name},
                {"temperature", c.llm.temperature},
                {"endpoint", c.llm.endpoint},
                {"auth_env", c.llm.auth_env_var},
                {"timeout_s", c.llm.request_timeout_s},
                {"max_output_tokens", c.llm.max_output_tokens},
                {"in_flight_limit", c.llm.in_flight_limit},
                {"fixtures", c.llm.mock_dir}};
    j["prompt"] = {{"chunk_limit", c.prompt.chunk_limit},
                   {"pitfalls", c.prompt.pitfalls ? nlohmann::json(*c.prompt.pitfalls) : nlohmann::json(nullptr)}};
    j["eval"] = {{"compile_cmd", c.eval.compile_cmd},
                 {"profile_compile_cmd", c.eval.profile_compile_cmd},
                 {"exec_cmd", c.eval.exec_cmd},
                 {"args", c.eval.args},
                 {"runs", c.eval.runs},
                 {"reference_capture", c.eval.reference_capture},
                 {"max_compile_retries", c.eval.max_compile_retries},
                 {"output_files", c.eval.output_files},
                 {"tolerance", c.eval.tolerance}};
    j["ear"] = {{"window", c.ear.window}, {"rules", rules}};
    j["output_root"] = c.output_root;
    return j;
}

// Dumps the resolved configuration back to YAML (JSON is valid YAML), so a
// snapshot can be reloaded with load_config.
inline std::string to_yaml_text(const PipelineConfig& c) {
    auto j = to_json(c);
    if (j["sources"]["post"].is_null()) j["sources"].erase("post");
    if (j["prompt"]["pitfalls"].is_null()) j["prompt"].erase("pitfalls");
    return j.dump(2) + "\n";
}

inline counters::EompConfig eomp_config(const PipelineConfig& c) {
    counters::EompConfig e;
    e.kappa = c.thresholds.kappa;
    e.tau_pool = c.thresholds.tau_pool;
    e.ensembles = c.thresholds.ensembles;
    e.seed = c.thresholds.seed;
    return e;
}

} // namespace optimas::config
