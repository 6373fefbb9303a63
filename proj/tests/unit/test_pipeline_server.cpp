#include <gtest/gtest.h>

#include <chrono>
#include <thread>

#include "optimas/detail/http.hpp"
#include "support.hpp"

using namespace optimas;
using support::TempDir;
namespace fs = std::filesystem;

namespace {

const char* kMinimalConfig = R"(app:
  name: Tiny
  source: tiny.sh
sources:
  pcsamples: pc.csv
llm:
  fixtures: mock
eval:
  compile_cmd: cp {src} {bin}
)";

std::string demo_response() { return support::read(fs::path(OPTIMAS_DEMO_DIR) / "mock" / "default.txt"); }

std::string manifest_status(const pipeline::RunResult& r) { return harness::to_string(r.manifest.status); }

} // namespace

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

TEST(Config, MinimalUsesDefaults) {
    auto c = config::parse_config_text(kMinimalConfig, "/base");
    EXPECT_EQ(c.app.source, "/base/tiny.sh");
    EXPECT_EQ(c.sources.paths.pcsamples, "/base/pc.csv");
    EXPECT_TRUE(c.sources.pc);
    EXPECT_FALSE(c.sources.ia);
    EXPECT_DOUBLE_EQ(c.thresholds.alpha, 0.8);
    EXPECT_DOUBLE_EQ(c.thresholds.tau_sat, 0.70);
    EXPECT_DOUBLE_EQ(c.thresholds.tau_saliency, 0.30);
    EXPECT_EQ(c.thresholds.top_n, 10);
    EXPECT_EQ(c.thresholds.kappa, 5);
    EXPECT_EQ(c.thresholds.tau_pool, 5);
    EXPECT_EQ(c.thresholds.ensembles, 10);
    EXPECT_DOUBLE_EQ(c.llm.temperature, 0.15);
    EXPECT_EQ(c.eval.runs, 5);
    EXPECT_EQ(c.eval.max_compile_retries, 3);
    EXPECT_EQ(c.ear.window, 3);
    EXPECT_EQ(c.output_root, "/base/runs");
    EXPECT_EQ(c.app.hw, "unspecified");
}

TEST(Config, RejectsOutOfRangeAndUnknownKeys) {
    auto with = [](const std::string& extra) { return std::string(kMinimalConfig) + extra; };
    try {
        config::parse_config_text(with("thresholds:\n  alpha: 1.5\n"), "/b");
        FAIL();
    } catch (const config::SchemaViolation& e) {
        EXPECT_EQ(e.key(), "thresholds.alpha");
    }
    EXPECT_THROW(config::parse_config_text(with("thresholds:\n  top_n: 0\n"), "/b"), config::SchemaViolation);
    EXPECT_THROW(config::parse_config_text(with("bogus: 1\n"), "/b"), config::SchemaViolation);
    EXPECT_THROW(config::parse_config_text("app: [1]\n", "/b"), config::SchemaViolation);
    EXPECT_THROW(config::parse_config_text(with("ear:\n  rules:\n    - pattern: '('\n      expected: decrease\n"), "/b"),
                 config::SchemaViolation);
    try {
        config::parse_config_text("app:\n  name: X\n  source: x\nsources:\n  pcsamples: p\nllm:\n  kind: remote-http\n  model: m\n  endpoint: http://h\n", "/b");
        FAIL();
    } catch (const config::SchemaViolation& e) {
        EXPECT_EQ(e.key(), "llm.auth_env");
    }
}

TEST(Config, DemoConfigLoadsAndRoundTrips) {
    TempDir dir("cfg");
    auto c = support::demo_config(dir);
    EXPECT_EQ(c.app.name, "Accuracy");
    EXPECT_TRUE(c.sources.pc && c.sources.ia && c.sources.roofline);
    ASSERT_TRUE(c.sources.post);
    EXPECT_EQ(c.thresholds.seed, 42u);
    auto again = config::parse_config_text(config::to_yaml_text(c), c.base_dir);
    EXPECT_EQ(config::to_json(again), config::to_json(c));
}

// ---------------------------------------------------------------------------
// analysis
// ---------------------------------------------------------------------------

TEST(Analyze, DemoDiagnostics) {
    TempDir dir("an");
    auto cfg = support::demo_config(dir);
    auto a = pipeline::analyze(cfg);
    EXPECT_EQ(a.hot.selected, std::vector<std::string>{"accuracy_kernel"});
    ASSERT_FALSE(a.stall_lines.empty());
    EXPECT_EQ(a.salient[0].source_line, 28);
    EXPECT_EQ(a.salient[0].stall_type, "stall_wait");
    EXPECT_EQ(a.roofline_lines[0].text, "accuracy_kernel: Compute underutilized (62%), memory bandwidth saturated (91%)");
    EXPECT_EQ(a.selection.size(), 5u);
    EXPECT_EQ(a.dropped_counters, std::vector<std::string>{"launch__grid_size"});
    auto chunks = pipeline::make_prompts(cfg, a);
    ASSERT_EQ(chunks.size(), 1u);
    EXPECT_TRUE(chunks[0].embedded_ids.count("PC-01"));
    EXPECT_TRUE(chunks[0].embedded_ids.count("IA-05"));
    EXPECT_TRUE(chunks[0].embedded_ids.count("RL-01"));
}

TEST(Analyze, PcOnlyAblation) {
    TempDir dir("an");
    auto cfg = support::demo_config(dir);
    cfg.sources.ia = false;
    cfg.sources.roofline = false;
    auto a = pipeline::analyze(cfg);
    EXPECT_TRUE(a.counter_lines.empty());
    EXPECT_TRUE(a.roofline_lines.empty());
    auto text = pipeline::make_prompts(cfg, a)[0].prompt_text;
    EXPECT_NE(text.find(std::string(prompt::kCounterHeader) + "\n" + prompt::kNoData), std::string::npos);
    EXPECT_NE(text.find(std::string(prompt::kRooflineHeader) + "\n" + prompt::kNoData), std::string::npos);
    EXPECT_NE(text.find("PC-01: line 28"), std::string::npos);
}

TEST(Analyze, ChunkedPromptsCarryEveryId) {
    TempDir dir("an");
    auto cfg = support::demo_config(dir);
    auto a = pipeline::analyze(cfg);
    auto whole = pipeline::make_prompts(cfg, a)[0];
    cfg.prompt.chunk_limit = whole.prompt_text.size() - 400;
    auto chunks = pipeline::make_prompts(cfg, a);
    EXPECT_GE(chunks.size(), 2u);
    EXPECT_EQ(pipeline::embedded_ids(chunks), whole.embedded_ids);
}

// ---------------------------------------------------------------------------
// end to end
// ---------------------------------------------------------------------------

TEST(Pipeline, DemoRunImproves) {
    TempDir dir("e2e");
    auto cfg = support::demo_config(dir);
    std::vector<std::string> stages;
    pipeline::RunOptions opt;
    opt.on_stage = [&](const std::string& s) { stages.push_back(s); };
    auto r = pipeline::run_pipeline(cfg, opt);
    EXPECT_EQ(manifest_status(r), "improved");
    ASSERT_TRUE(r.manifest.improvement);
    EXPECT_GT(*r.manifest.improvement, 0);
    EXPECT_EQ(r.manifest.compile_attempts, 1);
    EXPECT_EQ(stages.front(), "analyze");
    EXPECT_EQ(stages.back(), "record");

    auto rd = harness::RunDirectory::open(r.run_dir);
    for (const auto* f : {harness::kResponseFile, harness::kOptimizedFile, harness::kOriginalFile, harness::kBaselineStatsFile,
                          harness::kOptStatsFile, harness::kEarReportFile, harness::kCorpusRecordFile, harness::kEvidenceFile,
                          pipeline::kAnalysisFile, pipeline::kSelectionFile}) {
        EXPECT_TRUE(rd.has(f)) << f;
    }
    EXPECT_TRUE(rd.has(harness::prompt_file(0)));
    EXPECT_TRUE(rd.has(std::string(harness::kDiagnosticsDir) + "/" + ingest::kIdMapFile));
    EXPECT_TRUE(rd.has(std::string(pipeline::kPostDiagnosticsDir) + "/" + ingest::kPcSamplesFile));

    EXPECT_DOUBLE_EQ(r.ear.evidence_coverage, 1.0);
    EXPECT_DOUBLE_EQ(r.ear.localization_agreement, 1.0);
    EXPECT_EQ(r.ear.implemented, 2);
    EXPECT_EQ(r.ear.withheld, 1);
    EXPECT_EQ(r.ear.hallucinated, 0);
    ASSERT_TRUE(r.ear.directional_consistency);
    EXPECT_DOUBLE_EQ(*r.ear.directional_consistency, 1.0);

    auto idx = corpus::read_index(cfg.output_root);
    ASSERT_EQ(idx.size(), 1u);
    EXPECT_EQ(idx[0].id, r.manifest.run_uuid);
    EXPECT_TRUE(corpus::validate_record(idx[0].record, cfg.output_root).empty());
    EXPECT_EQ(idx[0].record.app, "Accuracy");

    auto again = pipeline::run_pipeline(cfg);
    EXPECT_EQ(corpus::read_index(cfg.output_root).size(), 2u);
    EXPECT_NE(again.run_dir, r.run_dir);
}

TEST(Pipeline, PersistentCompileFailure) {
    TempDir dir("e2e");
    auto cfg = support::demo_config(dir);
    // The baseline shares the command; only the optimized build fails.
    cfg.eval.compile_cmd = "case {src} in *optimized*) echo 'error: nope' >&2; exit 1;; esac; cp {src} {bin} && chmod +x {bin}";
    auto r = pipeline::run_pipeline(cfg);
    EXPECT_EQ(manifest_status(r), "compile-failed");
    EXPECT_EQ(r.manifest.compile_attempts, 4);
    EXPECT_EQ(r.manifest.gateway_calls, 4);
    EXPECT_FALSE(r.record.errors.empty());
    EXPECT_TRUE(r.record.opt_rt.empty());
    auto rd = harness::RunDirectory::open(r.run_dir);
    EXPECT_TRUE(rd.has(harness::prompt_file(3)));
    EXPECT_NE(rd.read(harness::prompt_file(3)).find("error: nope"), std::string::npos);
    EXPECT_TRUE(corpus::validate_record(r.record, cfg.output_root).empty());
}

TEST(Pipeline, InvalidOutputIsReported) {
    TempDir dir("e2e");
    auto cfg = support::demo_config(dir);
    auto bad = demo_response();
    const std::string line = "printf '%s\\n' \"$correct\" > accuracy.out";
    auto pos = bad.find(line);
    ASSERT_NE(pos, std::string::npos);
    bad.replace(pos, line.size(), "printf '%s\\n' \"$((correct + 1))\" > accuracy.out");
    auto script = support::Script::with({bad});
    pipeline::RunOptions opt;
    opt.backend = script->backend();
    auto r = pipeline::run_pipeline(cfg, opt);
    EXPECT_EQ(manifest_status(r), "invalid-output");
    EXPECT_NE(r.record.errors.find("accuracy.out"), std::string::npos);
}

TEST(Pipeline, SameSeedIsDeterministic) {
    TempDir a("det"), b("det");
    auto ca = support::demo_config(a);
    auto cb = support::demo_config(b);
    auto ra = pipeline::run_pipeline(ca);
    auto rb = pipeline::run_pipeline(cb);
    auto da = harness::RunDirectory::open(ra.run_dir), db = harness::RunDirectory::open(rb.run_dir);
    EXPECT_EQ(da.read(harness::prompt_file(0)), db.read(harness::prompt_file(0)));
    EXPECT_EQ(da.read(pipeline::kSelectionFile), db.read(pipeline::kSelectionFile));
    EXPECT_EQ(da.read(harness::kEarReportFile), db.read(harness::kEarReportFile));
}

TEST(Pipeline, ReprofileIsIdempotent) {
    TempDir dir("rep");
    auto cfg = support::demo_config(dir);
    cfg.sources.post.reset();
    auto r = pipeline::run_pipeline(cfg);
    EXPECT_FALSE(r.ear.directional_consistency);
    auto post = pipeline::paths_in_dir((fs::path(cfg.base_dir) / "post").string());
    auto first = pipeline::reprofile(r.run_dir, post);
    ASSERT_TRUE(first.directional_consistency);
    EXPECT_DOUBLE_EQ(*first.directional_consistency, 1.0);
    auto second = pipeline::reprofile(r.run_dir, post);
    EXPECT_EQ(first, second);
    auto rd = harness::RunDirectory::open(r.run_dir);
    EXPECT_EQ(ear::report_from_json(nlohmann::json::parse(rd.read(harness::kEarReportFile))), first);
    EXPECT_EQ(pipeline::find_run(cfg.output_root, r.manifest.run_uuid), r.run_dir);
}

TEST(Pipeline, ProfilerStageFeedsAnalysis) {
    TempDir dir("prof");
    auto cfg = support::demo_config(dir);
    auto diag = fs::path(cfg.base_dir) / "diagnostics";
    cfg.sources.paths = {};
    cfg.profiler.command = "mkdir -p {out} && cp " + diag.string() + "/kernels.csv " + diag.string() + "/pcsamples.csv " +
                           diag.string() + "/counters.csv " + diag.string() + "/roofline.json {out}/";
    cfg.profiler.outputs = {"kernels.csv", "pcsamples.csv"};
    auto r = pipeline::run_pipeline(cfg);
    EXPECT_EQ(manifest_status(r), "improved");
    auto rd = harness::RunDirectory::open(r.run_dir);
    EXPECT_NE(rd.read(harness::prompt_file(0)).find("PC-01: line 28"), std::string::npos);
}

TEST(Pipeline, ProfilerSeesProfilingBuild) {
    TempDir dir("profbin");
    auto cfg = support::demo_config(dir);
    auto diag = fs::path(cfg.base_dir) / "diagnostics";
    cfg.eval.profile_compile_cmd = "{ cat {src}; echo '# profiled'; } > {bin}";
    cfg.profiler.command = "mkdir -p {out} && tail -n 1 {bin} > {out}/marker.txt && cp " + diag.string() +
                           "/pcsamples.csv {out}/";
    cfg.profiler.outputs = {"marker.txt", "pcsamples.csv"};
    auto r = pipeline::run_pipeline(cfg);
    EXPECT_EQ(manifest_status(r), "improved");
    EXPECT_EQ(support::read(fs::path(r.run_dir) / "profile" / "marker.txt"), "# profiled\n");
}

// ---------------------------------------------------------------------------
// HTTP API
// ---------------------------------------------------------------------------

namespace {

struct ApiFixture {
    TempDir dir{"api"};
    fs::path app = support::copy_demo(dir);
    std::string root = (dir / "served").string();
    server::Server srv{server::ServerConfig{root, app.string(), "127.0.0.1", 0}};
    int port = srv.start();
    httplib::Client client{"127.0.0.1", port};

    nlohmann::json get(const std::string& path, int expect = 200) {
        auto res = client.Get(path);
        EXPECT_TRUE(res) << path;
        if (!res) return nullptr;
        EXPECT_EQ(res->status, expect) << path << ": " << res->body;
        return nlohmann::json::parse(res->body, nullptr, false);
    }

    std::string config_body() {
        auto body = support::read(app / "config.yml");
        auto pos = body.find("runs: 5");
        body.replace(pos, 7, "runs: 2");
        return body;
    }

    nlohmann::json wait_for(const std::string& id) {
        for (int i = 0; i < 600; ++i) {
            auto s = get("/runs/" + id);
            auto st = s.value("status", "");
            if (st != "queued" && st != "running") return s;
            std::this_thread::sleep_for(std::chrono::milliseconds(100));
        }
        return nullptr;
    }
};

} // namespace

TEST(Server, EndToEnd) {
    ApiFixture f;
    EXPECT_EQ(f.get("/runs"), nlohmann::json::array());
    EXPECT_EQ(f.get("/corpus"), nlohmann::json::array());
    f.get("/runs/nope", 404);

    auto bad = f.client.Post("/runs", "app: 3\n", "application/yaml");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 400);

    auto res = f.client.Post("/runs", f.config_body(), "application/yaml");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 202) << res->body;
    auto id = nlohmann::json::parse(res->body).at("id").get<std::string>();
    auto done = f.wait_for(id);
    ASSERT_FALSE(done.is_null());
    EXPECT_EQ(done["status"], "improved") << done.dump();
    EXPECT_EQ(done["app"], "Accuracy");

    auto runs = f.get("/runs");
    ASSERT_EQ(runs.size(), 1u);
    EXPECT_EQ(runs[0]["id"], id);
    EXPECT_DOUBLE_EQ(runs[0]["ear"]["evidence_coverage"].get<double>(), 1.0);

    auto earj = f.get("/runs/" + id + "/ear");
    EXPECT_EQ(earj["implemented"], 2);

    auto diff = f.get("/runs/" + id + "/diff");
    ASSERT_FALSE(diff["hunks"].empty());
    EXPECT_EQ(diff["hunks"][0]["edit_ids"], nlohmann::json::array({"A1", "A2"}));
    EXPECT_TRUE(diff["hunks"][0]["evidence_text"].contains("PC-01"));
    EXPECT_FALSE(diff["salient"].empty());

    auto art = f.client.Get("/runs/" + id + "/artifacts/" + harness::kOptimizedFile);
    ASSERT_TRUE(art);
    EXPECT_EQ(art->status, 200);
    EXPECT_NE(art->body.find("awk"), std::string::npos);
    f.get("/runs/" + id + "/artifacts/not-there.txt", 404);

    auto corpus = f.get("/corpus");
    ASSERT_EQ(corpus.size(), 1u);
    EXPECT_EQ(corpus[0]["record"]["App"], "Accuracy");

    auto rep = f.client.Post("/runs/" + id + "/reprofile", "", "application/json");
    ASSERT_TRUE(rep);
    EXPECT_EQ(rep->status, 200) << rep->body;
    EXPECT_DOUBLE_EQ(nlohmann::json::parse(rep->body)["directional_consistency"].get<double>(), 1.0);
    auto rep2 = f.client.Post("/runs/" + id + "/reprofile", R"({"dir": "post"})", "application/json");
    ASSERT_TRUE(rep2);
    EXPECT_EQ(rep2->status, 200) << rep2->body;
    EXPECT_EQ(nlohmann::json::parse(rep2->body), nlohmann::json::parse(rep->body));
    f.srv.stop();
}

TEST(Server, FailedRunReportsError) {
    ApiFixture f;
    auto body = f.config_body();
    body.replace(body.find("fixtures: mock"), 14, "fixtures: missing-dir");
    auto res = f.client.Post("/runs", body, "application/yaml");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 202);
    auto id = nlohmann::json::parse(res->body).at("id").get<std::string>();
    auto done = f.wait_for(id);
    EXPECT_EQ(done["status"], "failed") << done.dump();
    EXPECT_NE(done["error"].get<std::string>().find("no mock fixture"), std::string::npos);
    f.srv.stop();
}

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

TEST(Cli, AnalyzeRunReport) {
    TempDir dir("cli");
    auto app = support::copy_demo(dir);
    auto cfg = (app / "config.yml").string();
    const std::string cli = OPTIMAS_CLI_PATH;

    auto an = process::run_shell(cli + " analyze -c " + cfg);
    ASSERT_EQ(an.exit_code, 0) << an.err;
    EXPECT_NE(an.out.find("PC-01: line 28"), std::string::npos);
    EXPECT_NE(an.out.find("Compute underutilized (62%), memory bandwidth saturated (91%)"), std::string::npos);

    auto pr = process::run_shell(cli + " prompt -c " + cfg);
    ASSERT_EQ(pr.exit_code, 0) << pr.err;
    EXPECT_NE(pr.out.find(prompt::kStallHeader), std::string::npos);

    auto run = process::run_shell(cli + " run -c " + cfg);
    ASSERT_EQ(run.exit_code, 0) << run.err;
    EXPECT_NE(run.out.find("improved"), std::string::npos);

    auto rep = process::run_shell(cli + " report --validate -c " + cfg);
    EXPECT_EQ(rep.exit_code, 0) << rep.out << rep.err;

    auto bad = process::run_shell(cli + " analyze -c " + (dir / "missing.yml").string());
    EXPECT_NE(bad.exit_code, 0);
    EXPECT_FALSE(bad.err.empty());
}
