#pragma once

// Stage orchestration: profile → analyze → prompt → optimize → evaluate →
// score → record, plus manual re-profiling of a finished run.

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "optimas/config.hpp"
#include "optimas/corpus.hpp"
#include "optimas/counters.hpp"
#include "optimas/ear.hpp"
#include "optimas/error.hpp"
#include "optimas/gateway.hpp"
#include "optimas/harness.hpp"
#include "optimas/ingest.hpp"
#include "optimas/insight.hpp"
#include "optimas/prompt.hpp"

namespace optimas::pipeline {

// Error raised inside a stage, tagged with the stage name.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

inline constexpr const char* kAnalysisFile = "analysis.json";
inline constexpr const char* kSelectionFile = "selection.json";
inline constexpr const char* kBuildDir = "build";
inline constexpr const char* kPostDiagnosticsDir = "diagnostics_post";

template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

// ---------------------------------------------------------------------------
// Diagnostics loading
// ---------------------------------------------------------------------------

struct Enabled {
    bool pc = true;
    bool ia = true;
    bool roofline = true;
};

// Loads whichever files are named. Without kernel times every kernel that
// appears in the stall or roofline data is listed with zero time.
inline ingest::DiagnosticBundle load_bundle(const std::string& app, const config::SourcePaths& p, Enabled en = {}) {
    std::vector<ingest::KernelProfile> kernels;
    if (!p.kernels.empty()) kernels = ingest::parse_kernel_times(p.kernels);
    std::vector<ingest::StallSample> stalls;
    ingest::StallUnit unit = ingest::StallUnit::cycles;
    if (en.pc && !p.pcsamples.empty()) stalls = ingest::parse_pc_samples(p.pcsamples, &unit);
    std::optional<ingest::CounterMatrix> counters;
    if (en.ia && !p.counters.empty()) counters = ingest::parse_counter_matrix(p.counters);
    std::vector<ingest::RooflineRaw> roofline;
    if (en.roofline && !p.roofline.empty()) roofline = ingest::parse_roofline_json(p.roofline);

    if (p.kernels.empty()) {
        std::set<std::string> seen;
        for (const auto& s : stalls) seen.insert(s.kernel_name);
        for (const auto& r : roofline) seen.insert(r.kernel_name);
        for (const auto& k : seen) kernels.push_back({k, 0, std::nullopt});
    }
    return ingest::assemble_bundle(app, std::move(kernels), std::move(roofline), std::move(stalls), std::move(counters), unit);
}

// Normalized bundle directory (kernels.csv, pcsamples.csv, counters.csv,
// roofline.json); missing files leave their part empty.
inline config::SourcePaths paths_in_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    auto pick = [&](const char* name) {
        auto p = fs::path(dir) / name;
        return fs::exists(p) ? p.string() : std::string();
    };
    return {pick(ingest::kKernelsFile), pick(ingest::kPcSamplesFile), pick(ingest::kCountersFile), pick(ingest::kRooflineFile)};
}

// ---------------------------------------------------------------------------
// Analysis
// ---------------------------------------------------------------------------

struct Analysis {
    ingest::DiagnosticBundle bundle;
    std::string source;
    insight::KernelSet hot;
    std::vector<insight::RooflineSummary> roofline;
    std::vector<insight::SalientStall> salient; // one per stall line
    std::vector<counters::CounterImportance> selection;
    std::vector<std::string> dropped_counters;
    std::vector<insight::SummaryLine> stall_lines;
    std::vector<insight::SummaryLine> counter_lines;
    std::vector<insight::SummaryLine> roofline_lines;
    std::vector<ear::EvidenceItem> evidence;
};

inline std::map<std::string, std::string> kernel_sources(const config::PipelineConfig& cfg,
                                                         const ingest::DiagnosticBundle& b, const std::string& app_source) {
    std::map<std::string, std::string> out;
    std::map<std::string, std::string> cache;
    for (const auto& k : b.kernels) {
        auto it = cfg.app.kernels.find(k.kernel_name);
        if (it == cfg.app.kernels.end() || it->second == cfg.app.source) {
            out[k.kernel_name] = app_source;
            continue;
        }
        auto c = cache.find(it->second);
        if (c == cache.end()) c = cache.emplace(it->second, text::read_file(it->second)).first;
        out[k.kernel_name] = c->second;
    }
    return out;
}

// Kernels whose line numbers refer to the optimized source file.
inline bool kernel_in_app_source(const config::PipelineConfig& cfg, const std::string& kernel) {
    auto it = cfg.app.kernels.find(kernel);
    return it == cfg.app.kernels.end() || it->second == cfg.app.source;
}

inline Analysis analyze_bundle(const config::PipelineConfig& cfg, ingest::DiagnosticBundle bundle, std::string source) {
    Analysis a;
    a.source = std::move(source);
    a.bundle = std::move(bundle);
    const auto& th = cfg.thresholds;

    bool have_times = false;
    for (const auto& k : a.bundle.kernels) have_times = have_times || k.time_ns > 0;
    if (have_times) {
        a.hot = insight::select_hot_kernels(a.bundle.kernels, th.alpha);
    } else {
        for (const auto& k : a.bundle.kernels) a.hot.selected.push_back(k.kernel_name);
        a.hot.coverage_fraction = a.bundle.kernels.empty() ? 0.0 : 1.0;
        a.hot.alpha = th.alpha;
    }
    const std::set<std::string> hot(a.hot.selected.begin(), a.hot.selected.end());

    if (cfg.sources.roofline) {
        std::vector<ingest::RooflineRaw> entries;
        for (const auto& r : a.bundle.roofline) {
            if (hot.count(r.kernel_name)) entries.push_back(r);
        }
        a.roofline = insight::summarize_roofline(entries, th.tau_sat);
        for (const auto& s : a.roofline) a.roofline_lines.insert(a.roofline_lines.end(), s.summary_lines.begin(), s.summary_lines.end());
    }

    if (cfg.sources.pc) {
        insight::StallAggregator agg;
        for (const auto& s : a.bundle.stalls) {
            if (hot.count(s.kernel_name)) agg.add(s);
        }
        auto salient = insight::filter_salient(agg.result(), kernel_sources(cfg, a.bundle, a.source), th.tau_saliency, th.top_n);
        a.stall_lines = insight::render_stall_summary(salient);
        salient.resize(a.stall_lines.size());
        a.salient = std::move(salient);
    }

    if (cfg.sources.ia && a.bundle.counters) {
        auto norm = counters::zscore_normalize(*a.bundle.counters);
        a.dropped_counters = norm.dropped;
        auto ecfg = config::eomp_config(cfg);
        ecfg.kappa = std::min(ecfg.kappa, static_cast<int>(norm.counter_names.size()));
        a.selection = counters::eomp_select(norm, ecfg);
        std::map<std::string, std::string> dict;
        if (!cfg.sources.counter_dictionary.empty()) dict = ingest::load_counter_dictionary(cfg.sources.counter_dictionary);
        a.counter_lines = counters::describe_counters(a.selection, dict);
    }

    for (const auto* lines : {&a.stall_lines, &a.counter_lines, &a.roofline_lines}) {
        for (const auto& l : *lines) ingest::add_diagnostic(a.bundle, l.id, l.render());
    }
    auto pc = ear::evidence_for_stalls(a.salient, a.stall_lines);
    auto ia = ear::evidence_for_counters(a.selection, a.counter_lines);
    auto rl = ear::evidence_for_roofline(a.roofline);
    a.evidence = pc;
    a.evidence.insert(a.evidence.end(), ia.begin(), ia.end());
    a.evidence.insert(a.evidence.end(), rl.begin(), rl.end());
    return a;
}

inline Analysis analyze(const config::PipelineConfig& cfg) {
    auto bundle = stage("ingest", [&] {
        return load_bundle(cfg.app.name, cfg.sources.paths, {cfg.sources.pc, cfg.sources.ia, cfg.sources.roofline});
    });
    auto source = stage("ingest", [&] { return text::read_file(cfg.app.source); });
    return stage("analyze", [&] { return analyze_bundle(cfg, std::move(bundle), std::move(source)); });
}

// Salient lines that index into the optimized source file.
inline std::vector<insight::SalientStall> localizable(const config::PipelineConfig& cfg, const Analysis& a) {
    std::vector<insight::SalientStall> out;
    for (const auto& s : a.salient) {
        if (kernel_in_app_source(cfg, s.kernel_name)) out.push_back(s);
    }
    return out;
}

inline nlohmann::json selection_json(const Analysis& a) {
    auto sel = nlohmann::json::array();
    for (const auto& c : a.selection) {
        sel.push_back({{"id", c.diagnostic_id},
                       {"counter", c.counter_name},
                       {"avg_weight", c.avg_weight},
                       {"avg_coefficient", c.avg_coefficient},
                       {"selection_frequency", c.selection_frequency},
                       {"description", c.description}});
    }
    return {{"selection", sel}, {"dropped", a.dropped_counters}};
}

inline nlohmann::json salient_json(const std::vector<insight::SalientStall>& salient) {
    auto arr = nlohmann::json::array();
    for (const auto& s : salient) {
        arr.push_back({{"kernel", s.kernel_name},
                       {"line", s.source_line},
                       {"stall", s.stall_type},
                       {"line_cycles", s.line_cycles},
                       {"dominant_cycles", s.dominant_cycles},
                       {"dominance_share", s.dominance_share},
                       {"kernel_share", s.kernel_share},
                       {"snippet", s.code_snippet}});
    }
    return arr;
}

inline std::vector<insight::SalientStall> salient_from_json(const nlohmann::json& j) {
    std::vector<insight::SalientStall> out;
    for (const auto& s : j) {
        insight::SalientStall x;
        x.kernel_name = s.at("kernel").get<std::string>();
        x.source_line = s.at("line").get<std::int64_t>();
        x.stall_type = s.at("stall").get<std::string>();
        x.line_cycles = s.value("line_cycles", std::int64_t{0});
        x.dominant_cycles = s.value("dominant_cycles", std::int64_t{0});
        x.dominance_share = s.value("dominance_share", 0.0);
        x.kernel_share = s.value("kernel_share", 0.0);
        x.code_snippet = s.value("snippet", "");
        out.push_back(std::move(x));
    }
    return out;
}

inline nlohmann::json analysis_json(const config::PipelineConfig& cfg, const Analysis& a) {
    return {{"hot_kernels", a.hot.selected},
            {"hot_coverage", a.hot.coverage_fraction},
            {"salient", salient_json(a.salient)},
            {"localizable_salient", salient_json(localizable(cfg, a))},
            {"stall_lines", [&] {
                 std::vector<std::string> v;
                 for (const auto& l : a.stall_lines) v.push_back(l.render());
                 return v;
             }()},
            {"counter_lines", [&] {
                 std::vector<std::string> v;
                 for (const auto& l : a.counter_lines) v.push_back(l.render());
                 return v;
             }()},
            {"roofline_lines", [&] {
                 std::vector<std::string> v;
                 for (const auto& l : a.roofline_lines) v.push_back(l.render());
                 return v;
             }()}};
}

// ---------------------------------------------------------------------------
// Prompt
// ---------------------------------------------------------------------------

inline std::vector<prompt::PromptPackage> make_prompts(const config::PipelineConfig& cfg, const Analysis& a) {
    return stage("prompt", [&] {
        auto pkg = prompt::build_prompt(a.source, a.roofline_lines, a.stall_lines, a.counter_lines,
                                        cfg.prompt.pitfalls.value_or(std::vector<std::string>{}));
        if (cfg.prompt.pitfalls && cfg.prompt.pitfalls->empty()) {
            // An explicit empty list removes the pitfall guardrails entirely.
            prompt::PromptInputs in = pkg.inputs;
            in.guardrails = prompt::mandatory_guardrails();
            pkg = prompt::detail::render(in, 1);
        }
        if (cfg.prompt.chunk_limit == 0) return std::vector<prompt::PromptPackage>{pkg};
        return prompt::chunk_prompt(pkg, cfg.prompt.chunk_limit);
    });
}

inline std::set<std::string> embedded_ids(const std::vector<prompt::PromptPackage>& chunks) {
    std::set<std::string> ids;
    for (const auto& c : chunks) ids.insert(c.embedded_ids.begin(), c.embedded_ids.end());
    return ids;
}

// ---------------------------------------------------------------------------
// Run
// ---------------------------------------------------------------------------

struct RunOptions {
    std::string run_uuid;                      // pre-assigned id (empty: random)
    std::shared_ptr<llm::Backend> backend;     // overrides the configured backend
    llm::Gateway::Sleeper sleeper;             // transport backoff sleeper
    std::function<void(const std::string&)> on_stage; // progress callback
};

struct RunResult {
    std::string run_dir;
    harness::RunManifest manifest;
    ear::EARReport ear;
    corpus::CorpusRecord record;
};

inline std::string extension_of(const std::string& path) {
    auto ext = std::filesystem::path(path).extension().string();
    return ext.empty() ? ".src" : ext;
}

inline harness::BuildSpec build_spec(const config::PipelineConfig& cfg, const std::string& workdir) {
    harness::BuildSpec s;
    s.compile_cmd = cfg.eval.compile_cmd;
    s.exec_cmd = cfg.eval.exec_cmd;
    s.args = cfg.eval.args;
    s.runs = cfg.eval.runs;
    s.workdir = workdir;
    s.tolerance = cfg.eval.tolerance;
    return s;
}

inline harness::Reference load_reference(const config::PipelineConfig& cfg) {
    namespace fs = std::filesystem;
    const auto& dir = cfg.eval.reference_capture;
    harness::Reference ref;
    auto out = fs::path(dir) / "stdout";
    if (!fs::exists(out)) throw IoError("reference directory lacks a stdout file: " + dir);
    ref.stdout_bytes = text::read_file(out.string());
    for (const auto& f : cfg.eval.output_files) {
        auto bytes = text::read_file((fs::path(dir) / f).string());
        ref.files.push_back({f, hash::sha256_hex(bytes), bytes});
    }
    return ref;
}

inline std::vector<std::string> transformation_names(const prompt::OptimizedArtifact& art) {
    std::vector<std::string> v;
    for (const auto& e : art.applied) v.push_back(e.transformation);
    return v;
}

inline std::vector<std::string> withheld_names(const prompt::OptimizedArtifact& art) {
    std::vector<std::string> v;
    for (const auto& w : art.withheld) v.push_back(w.candidate);
    return v;
}

inline std::unique_ptr<llm::Gateway> make_gateway(const config::PipelineConfig& cfg, const RunOptions& opt) {
    if (opt.backend) return std::make_unique<llm::Gateway>(cfg.llm, opt.backend, opt.sleeper);
    return std::make_unique<llm::Gateway>(cfg.llm, std::shared_ptr<llm::HttpTransport>(), opt.sleeper);
}

inline ear::EARReport score(const config::PipelineConfig& cfg, const Analysis& a, const std::set<std::string>& ids,
                            const prompt::OptimizedArtifact& art, const ingest::DiagnosticBundle* post) {
    ear::EarInputs in;
    in.artifact = &art;
    in.embedded_ids = ids;
    in.evidence = a.evidence;
    in.salient = localizable(cfg, a);
    in.original_source = a.source;
    in.pre = &a.bundle;
    in.post = post;
    in.rules = cfg.ear.rules;
    in.window = cfg.ear.window;
    in.fallback_kernel = a.hot.selected.empty() ? std::string() : a.hot.selected.front();
    return ear::compute_report(in);
}

inline RunResult run_pipeline(const config::PipelineConfig& cfg, const RunOptions& opt = {}) {
    namespace fs = std::filesystem;
    auto note = [&](const std::string& s) {
        if (opt.on_stage) opt.on_stage(s);
    };
    if (cfg.eval.compile_cmd.empty()) throw config::SchemaViolation("eval.compile_cmd", "required to run the pipeline");

    auto rd = stage("persist", [&] { return harness::RunDirectory::create(cfg.output_root, opt.run_uuid); });
    auto& m = rd.manifest();
    m.config_snapshot = config::to_json(cfg);
    m.extra["app"] = cfg.app.name;
    m.extra["llm"] = cfg.llm.model_name;
    m.extra["backend"] = llm::to_string(cfg.llm.kind);
    m.extra["stage"] = "started";
    rd.write_manifest();

    // Profiler outputs with the normalized file names replace the configured paths.
    auto effective = cfg;
    if (!cfg.profiler.command.empty()) {
        note("profile");
        stage("profile", [&] {
            auto out = (fs::path(rd.path()) / "profile").string();
            std::map<std::string, std::string> subs{
                {"out", out}, {"app", cfg.app.name}, {"args", cfg.eval.args}, {"source", cfg.app.source}};
            // {bin} is the profiling build when one is configured
            if (!cfg.eval.profile_compile_cmd.empty()) {
                fs::create_directories(out);
                auto spec = build_spec(cfg, out);
                spec.compile_cmd = cfg.eval.profile_compile_cmd;
                auto bin = (fs::path(out) / "profiled.bin").string();
                auto r = harness::compile_source(text::read_file(cfg.app.source), spec,
                                                 (fs::path(out) / ("profiled" + extension_of(cfg.app.source))).string(), bin);
                if (r.exit_code != 0) throw ingest::NonZeroExit(r.exit_code, process::tail_lines(r.err, 20));
                subs["bin"] = bin;
            }
            ingest::invoke_profiler(cfg.profiler.command, subs, cfg.profiler.outputs, cfg.base_dir);
            auto produced = paths_in_dir(out);
            auto& p = effective.sources.paths;
            for (auto [dst, src] : {std::pair{&p.kernels, &produced.kernels}, {&p.pcsamples, &produced.pcsamples},
                                    {&p.counters, &produced.counters}, {&p.roofline, &produced.roofline}}) {
                if (!src->empty()) *dst = *src;
            }
            return 0;
        });
    }

    note("analyze");
    auto a = analyze(effective);
    auto chunks = make_prompts(cfg, a);
    auto ids = embedded_ids(chunks);

    stage("persist", [&] {
        auto diag = fs::path(rd.path()) / harness::kDiagnosticsDir;
        for (const auto& f : ingest::write_bundle(a.bundle, diag)) rd.adopt(std::string(harness::kDiagnosticsDir) + "/" + f);
        rd.put(harness::kOriginalFile, a.source);
        rd.put_json(harness::kEvidenceFile, ear::to_json(a.evidence));
        rd.put_json(kSelectionFile, selection_json(a));
        auto an = analysis_json(cfg, a);
        an["embedded_ids"] = std::vector<std::string>(ids.begin(), ids.end());
        an["fallback_kernel"] = a.hot.selected.empty() ? std::string() : a.hot.selected.front();
        rd.put_json(kAnalysisFile, an);
        return 0;
    });

    auto gateway = stage("optimize", [&] { return make_gateway(cfg, opt); });
    const auto build = (fs::path(rd.path()) / kBuildDir).string();

    // Baseline: compile the original, capture the reference, time it.
    note("baseline");
    auto base_spec = build_spec(cfg, build);
    base_spec.source_name = "original" + extension_of(cfg.app.source);
    base_spec.binary_name = "baseline.bin";
    harness::RuntimeStats base_stats;
    harness::Reference reference;
    stage("evaluate", [&] {
        fs::create_directories(build);
        auto src = (fs::path(build) / base_spec.source_name).string();
        auto bin = (fs::path(build) / base_spec.binary_name).string();
        auto r = harness::compile_source(a.source, base_spec, src, bin);
        rd.put(std::string(harness::kLogsDir) + "/baseline_compile.log", r.out + r.err);
        if (r.exit_code != 0) throw Error("baseline failed to compile (exit " + std::to_string(r.exit_code) + ")");
        reference = cfg.eval.reference_capture == "auto" ? harness::capture_reference(bin, base_spec, cfg.eval.output_files)
                                                         : load_reference(cfg);
        base_spec.reference_stdout = reference.stdout_bytes;
        base_spec.reference_files = reference.files;
        base_stats = harness::measure_runtime(bin, base_spec);
        rd.put_json(harness::kBaselineStatsFile, harness::to_json(base_stats));
        return 0;
    });

    note("optimize");
    auto opt_spec = build_spec(cfg, build);
    opt_spec.source_name = "optimized" + extension_of(cfg.app.source);
    opt_spec.binary_name = "optimized.bin";
    opt_spec.reference_stdout = reference.stdout_bytes;
    opt_spec.reference_files = reference.files;
    auto outcome = stage("optimize", [&] {
        return harness::compile_with_retry(chunks, opt_spec, *gateway, cfg.eval.max_compile_retries);
    });

    std::string errors;
    std::optional<harness::RuntimeStats> opt_stats;
    stage("persist", [&] {
        std::size_t pi = 0;
        for (std::size_t i = 0; i < outcome.attempts.size(); ++i) {
            const auto& at = outcome.attempts[i];
            for (const auto& p : at.prompts) rd.put(harness::prompt_file(pi++), p);
            rd.put(std::string(harness::kLogsDir) + "/response_" + std::to_string(i + 1) + ".txt", at.response);
            rd.put(std::string(harness::kLogsDir) + "/compile_" + std::to_string(i + 1) + ".log", at.log);
        }
        if (!outcome.attempts.empty()) rd.put(harness::kResponseFile, outcome.attempts.back().response);
        if (!outcome.artifact.full_source.empty()) rd.put(harness::kOptimizedFile, outcome.artifact.full_source);
        return 0;
    });
    m.compile_attempts = outcome.compile_attempts();
    m.gateway_calls = outcome.gateway_calls;
    m.extra["input_tokens"] = outcome.input_tokens;
    m.extra["output_tokens"] = outcome.output_tokens;
    m.extra["chunks"] = chunks.size();

    if (!outcome.success) {
        m.status = harness::Status::compile_failed;
        errors = "compilation failed after " + std::to_string(outcome.compile_attempts()) + " attempts: " +
                 process::tail_lines(outcome.attempts.back().log, 3);
    } else {
        note("evaluate");
        stage("evaluate", [&] {
            try {
                auto v = harness::validate_output(outcome.binary_path, opt_spec);
                if (!v.valid) {
                    m.status = harness::Status::invalid_output;
                    errors = v.reason;
                    m.extra["validation"] = v.reason;
                    return 0;
                }
                opt_stats = harness::measure_runtime(outcome.binary_path, opt_spec);
            } catch (const harness::ExecutionFailure& e) {
                m.status = harness::Status::runtime_error;
                errors = e.what();
                return 0;
            }
            rd.put_json(harness::kOptStatsFile, harness::to_json(*opt_stats));
            m.improvement = harness::improvement_percent(base_stats, *opt_stats);
            m.status = *m.improvement > 0 ? harness::Status::improved : harness::Status::no_gain;
            return 0;
        });
    }

    note("score");
    std::optional<ingest::DiagnosticBundle> post;
    if (cfg.sources.post) {
        post = stage("score", [&] { return load_bundle(cfg.app.name, *cfg.sources.post); });
        stage("persist", [&] {
            for (const auto& f : ingest::write_bundle(*post, fs::path(rd.path()) / kPostDiagnosticsDir)) {
                rd.adopt(std::string(kPostDiagnosticsDir) + "/" + f);
            }
            return 0;
        });
    }
    auto report = stage("score", [&] { return score(cfg, a, ids, outcome.artifact, post ? &*post : nullptr); });
    rd.put_json(harness::kEarReportFile, ear::to_json(report));

    note("record");
    m.extra["stage"] = "done";
    rd.write_manifest();
    corpus::RecordInputs ri;
    ri.app = cfg.app.name;
    ri.llm = cfg.llm.model_name;
    ri.hw = cfg.app.hw;
    ri.sw = cfg.app.sw;
    ri.compile = harness::render_compile(opt_spec, opt_spec.source_name, opt_spec.binary_name);
    ri.exec = harness::render_exec(opt_spec, opt_spec.binary_name);
    ri.config = cfg.eval.args;
    ri.applied = transformation_names(outcome.artifact);
    ri.ignored = withheld_names(outcome.artifact);
    ri.errors = errors;
    ri.base_mean_ns = base_stats.mean_ns;
    if (opt_stats) ri.opt_mean_ns = opt_stats->mean_ns;
    auto record = stage("record", [&] {
        auto r = corpus::emit_record(rd, ri);
        rd.put(harness::kCorpusRecordFile, corpus::dump(r, 2) + "\n");
        rd.write_manifest();
        corpus::append_record(cfg.output_root, m.run_uuid, r);
        return r;
    });
    return {rd.path(), m, report, record};
}

// ---------------------------------------------------------------------------
// Run lookup and re-profiling
// ---------------------------------------------------------------------------

// Run directories under root, oldest first (names start with a UTC stamp).
inline std::vector<std::string> list_runs(const std::string& root) {
    namespace fs = std::filesystem;
    std::vector<std::string> out;
    if (!fs::exists(root)) return out;
    for (const auto& e : fs::directory_iterator(root)) {
        if (e.is_directory() && fs::exists(e.path() / harness::kManifestFile)) out.push_back(e.path().string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Accepts a run directory path, a directory name, or a bare run uuid.
inline std::string find_run(const std::string& root, const std::string& id) {
    namespace fs = std::filesystem;
    if (fs::exists(fs::path(id) / harness::kManifestFile)) return fs::path(id).string();
    for (const auto& dir : list_runs(root)) {
        auto name = fs::path(dir).filename().string();
        if (name == id || (name.size() > id.size() && name.compare(name.size() - id.size(), id.size(), id) == 0 &&
                           name[name.size() - id.size() - 1] == '-')) {
            return dir;
        }
    }
    throw InvalidArgument("no run '" + id + "' under " + root);
}

// Recomputes the EAR report of a finished run against post-optimization
// diagnostics, rewriting ear_report.json and the manifest. Deterministic for
// the same inputs, so repeated calls are idempotent.
inline ear::EARReport reprofile(const std::string& run_dir, const config::SourcePaths& post_paths) {
    namespace fs = std::filesystem;
    auto rd = harness::RunDirectory::open(run_dir);
    const auto& snap = rd.manifest().config_snapshot;
    auto app = snap.at("app").value("name", "");

    auto pre = ingest::read_bundle(fs::path(rd.path()) / harness::kDiagnosticsDir, app);
    auto post = stage("reprofile", [&] { return load_bundle(app, post_paths); });
    auto analysis = nlohmann::json::parse(rd.read(kAnalysisFile));
    auto evidence = ear::evidence_list_from_json(nlohmann::json::parse(rd.read(harness::kEvidenceFile)));

    prompt::OptimizedArtifact art;
    if (rd.has(harness::kResponseFile)) {
        try {
            art = prompt::parse_response(rd.read(harness::kResponseFile));
        } catch (const Error&) {
            art = {};
        }
    }
    std::vector<ear::DirectionRule> rules;
    for (const auto& r : snap.at("ear").value("rules", nlohmann::json::array())) {
        rules.push_back({r.at("pattern").get<std::string>(), r.value("metric", ""), ear::parse_direction(r.at("expected").get<std::string>())});
    }

    ear::EarInputs in;
    in.artifact = &art;
    auto ids = analysis.at("embedded_ids").get<std::vector<std::string>>();
    in.embedded_ids = {ids.begin(), ids.end()};
    in.evidence = evidence;
    in.salient = salient_from_json(analysis.at("localizable_salient"));
    in.original_source = rd.read(harness::kOriginalFile);
    in.pre = &pre;
    in.post = &post;
    in.rules = rules;
    in.window = snap.at("ear").value("window", ear::kDefaultWindow);
    in.fallback_kernel = analysis.value("fallback_kernel", "");
    auto report = ear::compute_report(in);

    for (const auto& f : ingest::write_bundle(post, fs::path(rd.path()) / kPostDiagnosticsDir)) {
        rd.adopt(std::string(kPostDiagnosticsDir) + "/" + f);
    }
    rd.put_json(harness::kEarReportFile, ear::to_json(report));
    rd.manifest().extra["reprofiled"] = true;
    rd.write_manifest();
    return report;
}

} // namespace optimas::pipeline
