// optimas command-line front end.

#include <csignal>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "optimas/optimas.hpp"

namespace fs = std::filesystem;
using namespace optimas;

namespace {

int exit_code(harness::Status s) {
    switch (s) {
    case harness::Status::improved: return 0;
    case harness::Status::no_gain: return 3;
    case harness::Status::invalid_output: return 4;
    case harness::Status::compile_failed: return 5;
    case harness::Status::runtime_error: return 6;
    }
    return 1;
}

void print_section(const char* header, const std::vector<insight::SummaryLine>& lines) {
    std::cout << header << "\n";
    if (lines.empty()) std::cout << prompt::kNoData << "\n";
    for (const auto& l : lines) std::cout << l.render() << "\n";
}

std::string resolve_root(const std::string& root, const std::string& config_path) {
    if (!root.empty()) return root;
    if (!config_path.empty()) return config::load_config(config_path).output_root;
    throw InvalidArgument("either --root or --config is required");
}

config::SourcePaths post_paths(const std::string& post_dir, const std::string& config_path) {
    if (!post_dir.empty()) return pipeline::paths_in_dir(post_dir);
    if (!config_path.empty()) {
        auto cfg = config::load_config(config_path);
        if (cfg.sources.post) return *cfg.sources.post;
    }
    throw InvalidArgument("no post-optimization diagnostics: pass --post DIR or set sources.post in the config");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"optimas: diagnostics-guided GPU code optimization pipeline"};
    app.require_subcommand(1);

    std::string config_path, out, root, run_id, post_dir, source_path, prompt_path, host = "127.0.0.1";
    int port = 8080;
    bool as_json = false, validate = false;

    auto* ingest_cmd = app.add_subcommand("ingest", "Parse profiler exports into the normalized bundle format");
    ingest_cmd->add_option("-c,--config", config_path, "config.yml")->required();
    ingest_cmd->add_option("-o,--out", out, "output directory")->required();

    auto* analyze_cmd = app.add_subcommand("analyze", "Print hotspot, stall, counter and roofline summaries");
    analyze_cmd->add_option("-c,--config", config_path, "config.yml")->required();
    analyze_cmd->add_flag("--json", as_json, "emit JSON");

    auto* prompt_cmd = app.add_subcommand("prompt", "Assemble the optimization prompt");
    prompt_cmd->add_option("-c,--config", config_path, "config.yml")->required();
    prompt_cmd->add_option("-o,--out", out, "directory for prompt_<i>.txt (default: stdout)");

    auto* optimize_cmd = app.add_subcommand("optimize", "Send the prompt to the configured model and print the reply");
    optimize_cmd->add_option("-c,--config", config_path, "config.yml")->required();
    optimize_cmd->add_option("-p,--prompt", prompt_path, "send this prompt file instead of assembling one");
    optimize_cmd->add_option("-o,--out", out, "write the reply here (default: stdout)");

    auto* evaluate_cmd = app.add_subcommand("evaluate", "Compile, validate and time a candidate source against the baseline");
    evaluate_cmd->add_option("-c,--config", config_path, "config.yml")->required();
    evaluate_cmd->add_option("-s,--source", source_path, "candidate source")->required();
    evaluate_cmd->add_option("-w,--workdir", out, "build directory (default: a temporary directory)");

    auto* ear_cmd = app.add_subcommand("ear", "Show a run's EAR report, or recompute it against post-optimization diagnostics");
    ear_cmd->add_option("-r,--run", run_id, "run id or directory")->required();
    ear_cmd->add_option("--root", root, "run root");
    ear_cmd->add_option("-c,--config", config_path, "config.yml (for the run root and sources.post)");
    ear_cmd->add_option("--post", post_dir, "directory with post-optimization diagnostics");

    auto* report_cmd = app.add_subcommand("report", "List runs, show one run, or validate the corpus");
    report_cmd->add_option("--root", root, "run root");
    report_cmd->add_option("-c,--config", config_path, "config.yml (for the run root)");
    report_cmd->add_option("-r,--run", run_id, "show this run");
    report_cmd->add_flag("--validate", validate, "validate every corpus record");

    auto* run_cmd = app.add_subcommand("run", "Run every stage end to end");
    run_cmd->add_option("-c,--config", config_path, "config.yml")->required();

    auto* serve_cmd = app.add_subcommand("serve", "Serve the HTTP API");
    serve_cmd->add_option("--root", root, "run root");
    serve_cmd->add_option("-c,--config", config_path, "config.yml (for the run root and base directory)");
    serve_cmd->add_option("--host", host, "bind address");
    serve_cmd->add_option("--port", port, "port");

    auto* reprofile_cmd = app.add_subcommand("reprofile", "Attach post-optimization diagnostics to a run and rescore it");
    reprofile_cmd->add_option("run", run_id, "run id or directory")->required();
    reprofile_cmd->add_option("-c,--config", config_path, "config.yml");
    reprofile_cmd->add_option("--root", root, "run root");
    reprofile_cmd->add_option("--post", post_dir, "directory with post-optimization diagnostics");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest_cmd) {
            auto cfg = config::load_config(config_path);
            auto b = pipeline::load_bundle(cfg.app.name, cfg.sources.paths, {cfg.sources.pc, cfg.sources.ia, cfg.sources.roofline});
            for (const auto& f : ingest::write_bundle(b, out)) std::cout << (fs::path(out) / f).string() << "\n";
            return 0;
        }
        if (*analyze_cmd) {
            auto cfg = config::load_config(config_path);
            auto a = pipeline::analyze(cfg);
            if (as_json) {
                auto j = pipeline::analysis_json(cfg, a);
                j["selection"] = pipeline::selection_json(a);
                j["evidence"] = ear::to_json(a.evidence);
                std::cout << j.dump(2) << "\n";
            } else {
                std::cout << "hot kernels (" << text::whole_percent(a.hot.coverage_fraction) << "% of time): "
                          << text::join(a.hot.selected, ", ") << "\n";
                print_section(prompt::kStallHeader, a.stall_lines);
                print_section(prompt::kCounterHeader, a.counter_lines);
                print_section(prompt::kRooflineHeader, a.roofline_lines);
            }
            return 0;
        }
        if (*prompt_cmd) {
            auto cfg = config::load_config(config_path);
            auto chunks = pipeline::make_prompts(cfg, pipeline::analyze(cfg));
            for (std::size_t i = 0; i < chunks.size(); ++i) {
                if (out.empty()) {
                    std::cout << chunks[i].prompt_text;
                } else {
                    fs::create_directories(out);
                    auto p = fs::path(out) / harness::prompt_file(i);
                    text::write_file(p.string(), chunks[i].prompt_text);
                    std::cout << p.string() << "\n";
                }
            }
            return 0;
        }
        if (*optimize_cmd) {
            auto cfg = config::load_config(config_path);
            llm::Gateway gw(cfg.llm);
            llm::ModelResponse r;
            if (!prompt_path.empty()) {
                r = gw.complete_text(text::join(prompt::compose_guardrails(cfg.prompt.pitfalls.value_or(std::vector<std::string>{})), "\n"),
                                     text::read_file(prompt_path));
            } else {
                r = gw.complete_chunked(pipeline::make_prompts(cfg, pipeline::analyze(cfg)));
            }
            if (out.empty()) std::cout << r.text;
            else text::write_file(out, r.text);
            std::cerr << "backend " << r.backend_id << ", " << r.input_tokens << " in / " << r.output_tokens << " out tokens, "
                      << r.latency_ms << " ms\n";
            return 0;
        }
        if (*evaluate_cmd) {
            auto cfg = config::load_config(config_path);
            if (cfg.eval.compile_cmd.empty()) throw config::SchemaViolation("eval.compile_cmd", "required to evaluate");
            std::string workdir = out;
            if (workdir.empty()) {
                workdir = (fs::temp_directory_path() / ("optimas-eval-" + hash::random_uuid())).string();
            }
            fs::create_directories(workdir);
            auto base = pipeline::build_spec(cfg, workdir);
            base.source_name = "original" + pipeline::extension_of(cfg.app.source);
            base.binary_name = "baseline.bin";
            auto bin = (fs::path(workdir) / base.binary_name).string();
            auto r = harness::compile_source(text::read_file(cfg.app.source), base,
                                             (fs::path(workdir) / base.source_name).string(), bin);
            if (r.exit_code != 0) throw Error("baseline failed to compile:\n" + process::tail_lines(r.out + r.err, 20));
            auto ref = cfg.eval.reference_capture == "auto" ? harness::capture_reference(bin, base, cfg.eval.output_files)
                                                            : pipeline::load_reference(cfg);
            base.reference_stdout = ref.stdout_bytes;
            base.reference_files = ref.files;
            auto base_stats = harness::measure_runtime(bin, base);

            auto cand = base;
            cand.source_name = "optimized" + pipeline::extension_of(cfg.app.source);
            cand.binary_name = "optimized.bin";
            auto cbin = (fs::path(workdir) / cand.binary_name).string();
            nlohmann::json j{{"baseline", harness::to_json(base_stats)}};
            harness::Status status;
            auto cr = harness::compile_source(text::read_file(source_path), cand, (fs::path(workdir) / cand.source_name).string(), cbin);
            if (cr.exit_code != 0) {
                status = harness::Status::compile_failed;
                j["log"] = process::tail_lines(cr.out + cr.err, 60);
            } else {
                try {
                    auto v = harness::validate_output(cbin, cand);
                    if (!v.valid) {
                        status = harness::Status::invalid_output;
                        j["validation"] = v.reason;
                    } else {
                        auto opt_stats = harness::measure_runtime(cbin, cand);
                        auto imp = harness::improvement_percent(base_stats, opt_stats);
                        j["optimized"] = harness::to_json(opt_stats);
                        j["improvement_percent"] = imp;
                        status = imp > 0 ? harness::Status::improved : harness::Status::no_gain;
                    }
                } catch (const harness::ExecutionFailure& e) {
                    status = harness::Status::runtime_error;
                    j["error"] = e.what();
                }
            }
            j["status"] = harness::to_string(status);
            std::cout << j.dump(2) << "\n";
            return exit_code(status);
        }
        if (*ear_cmd || *reprofile_cmd) {
            auto dir = pipeline::find_run(resolve_root(root, config_path), run_id);
            if (*ear_cmd && post_dir.empty()) {
                std::cout << harness::RunDirectory::open(dir).read(harness::kEarReportFile);
                return 0;
            }
            auto report = pipeline::reprofile(dir, post_paths(post_dir, config_path));
            std::cout << ear::to_json(report).dump(2) << "\n";
            return 0;
        }
        if (*report_cmd) {
            auto r = resolve_root(root, config_path);
            if (!run_id.empty()) {
                auto rd = harness::RunDirectory::open(pipeline::find_run(r, run_id));
                auto j = harness::to_json(rd.manifest());
                j.erase("config_snapshot");
                j["ear"] = nlohmann::json::parse(rd.read(harness::kEarReportFile));
                std::cout << j.dump(2) << "\n";
                return 0;
            }
            if (validate) {
                int bad = 0;
                for (const auto& e : corpus::read_index(r)) {
                    auto v = corpus::validate_record(e.record, r);
                    for (const auto& msg : v) std::cout << e.id << ": " << msg << "\n";
                    bad += !v.empty();
                }
                std::cout << (bad ? std::to_string(bad) + " invalid record(s)" : std::string("corpus ok")) << "\n";
                return bad ? 1 : 0;
            }
            for (const auto& dir : pipeline::list_runs(r)) {
                auto m = nlohmann::json::parse(text::read_file((fs::path(dir) / harness::kManifestFile).string()));
                std::cout << fs::path(dir).filename().string() << "  " << m.value("status", "?") << "  "
                          << m.value("app", "") << "  " << m.value("llm", "");
                if (m.contains("improvement_percent") && m["improvement_percent"].is_number()) {
                    std::cout << "  " << text::printf_format("%.2f", m["improvement_percent"].get<double>()) << "%";
                }
                std::cout << "\n";
            }
            return 0;
        }
        if (*run_cmd) {
            auto cfg = config::load_config(config_path);
            pipeline::RunOptions opt;
            opt.on_stage = [](const std::string& s) { std::cerr << "[optimas] " << s << "\n"; };
            auto result = pipeline::run_pipeline(cfg, opt);
            std::cout << result.run_dir << "\n" << harness::to_string(result.manifest.status) << "\n";
            return exit_code(result.manifest.status);
        }
        if (*serve_cmd) {
            server::ServerConfig sc;
            sc.output_root = resolve_root(root, config_path);
            sc.base_dir = config_path.empty() ? fs::current_path().string() : fs::absolute(config_path).parent_path().string();
            sc.host = host;
            sc.port = port;
            server::Server srv(sc);
            std::cerr << "[optimas] serving " << sc.output_root << " on http://" << host << ":" << port << "\n";
            srv.run();
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "optimas: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
