#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include "optimas/detail/http.hpp"
#include "oracles/generators.hpp"
#include "support.hpp"

using namespace optimas;
using support::TempDir;

namespace {

// Diagnostics shaped like a worked example for an Accuracy kernel: one
// memory-bound roofline entry, three stall lines, two counters.
prompt::PromptPackage accuracy_prompt() {
    auto source = text::read_file(std::string(OPTIMAS_FIXTURE_DIR) + "/accuracy_kernel.cu");
    ingest::RooflineRaw raw{"accuracy_kernel", 0.62 * 6.7e13, 6.7e13, 0.91 * 3.35e12, 3.35e12, 0.5, {"uncoalesced global loads"}};
    auto roof = insight::summarize_roofline({raw});
    auto agg = insight::aggregate_stalls({{"accuracy_kernel", 10, "stall_long_sb", 61000},
                                          {"accuracy_kernel", 10, "stall_wait", 9000},
                                          {"accuracy_kernel", 11, "stall_wait", 45387},
                                          {"accuracy_kernel", 16, "stall_membar", 5200},
                                          {"accuracy_kernel", 16, "stall_wait", 4800}});
    auto stalls = insight::render_stall_summary(insight::filter_salient(agg, {{"accuracy_kernel", source}}));
    std::vector<counters::CounterImportance> sel(2);
    sel[0].counter_name = "lts__t_sectors_evict_first_lookup_miss.sum";
    sel[0].avg_weight = 0.189;
    sel[1].counter_name = "smsp__warps_eligible.avg.per_cycle_active";
    sel[1].avg_weight = 0.0731;
    auto ia = counters::describe_counters(sel, {{"lts__t_sectors_evict_first_lookup_miss.sum", "high L2 cache evictions"},
                                                {"smsp__warps_eligible.avg.per_cycle_active", "eligible warps per cycle"}});
    return prompt::build_prompt(source, roof[0].summary_lines, stalls, ia);
}

std::vector<insight::SummaryLine> one_stall() { return {{"PC-01", "line 2 `b` — stall_wait: 90%", "k", 2}}; }

// Local HTTP server on an ephemeral port.
class FakeServer {
public:
    explicit FakeServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server_.Post(".*", [handler](const httplib::Request& req, httplib::Response& res) { handler(req, res); });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~FakeServer() {
        server_.stop();
        thread_.join();
    }
    std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port_) + path; }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

struct SleepLog {
    std::vector<long long> ms;
    llm::Gateway::Sleeper sleeper() {
        return [this](std::chrono::milliseconds d) { ms.push_back(d.count()); };
    }
};

} // namespace

// ---------------------------------------------------------------------------
// prompt-forge
// ---------------------------------------------------------------------------

TEST(NumberSource, Examples) {
    EXPECT_EQ(prompt::number_source("a\nb"), "   1| a\n   2| b");
    EXPECT_EQ(prompt::number_source(""), "");
}

TEST(NumberSource, LongFileRoundTrips) {
    std::string src;
    for (int i = 0; i < 1200; ++i) src += "line " + std::to_string(i) + (i % 7 == 0 ? " | with bar" : "") + "\n";
    auto numbered = prompt::number_source(src);
    EXPECT_EQ(prompt::strip_line_numbers(numbered), src);
    long prev = 0;
    for (const auto& l : text::split_lines(numbered)) {
        long n = std::stol(l.substr(0, l.find('|')));
        EXPECT_EQ(n, prev + 1);
        prev = n;
    }
    EXPECT_EQ(prev, 1200);
}

TEST(BuildPrompt, AllSectionsInOrder) {
    auto p = accuracy_prompt();
    const auto& t = p.prompt_text;
    auto src = t.find("# Begin Source Code"), st = t.find(prompt::kStallHeader), ia = t.find(prompt::kCounterHeader),
         rl = t.find(prompt::kRooflineHeader), ins = t.find("# Instructions");
    ASSERT_NE(src, std::string::npos);
    EXPECT_LT(src, st);
    EXPECT_LT(st, ia);
    EXPECT_LT(ia, rl);
    EXPECT_LT(rl, ins);
    EXPECT_EQ(p.embedded_ids, (std::set<std::string>{"PC-01", "PC-02", "PC-03", "IA-01", "IA-02", "RL-01", "RL-02", "RL-03"}));
    EXPECT_NE(t.find("0.189"), std::string::npos);
    EXPECT_NE(t.find("memory-bound (arithmetic intensity 0.5 ops/byte"), std::string::npos);
}

TEST(BuildPrompt, GoldenFixture) {
    auto path = std::string(OPTIMAS_FIXTURE_DIR) + "/accuracy_prompt.golden.txt";
    auto text = accuracy_prompt().prompt_text;
    if (std::getenv("OPTIMAS_REGENERATE_GOLDEN")) text::write_file(path, text);
    ASSERT_TRUE(std::filesystem::exists(path));
    EXPECT_EQ(text, text::read_file(path));
}

TEST(BuildPrompt, AblationMarksMissingSections) {
    std::vector<insight::SummaryLine> ia{{"IA-01", "c — d (impact 0.5)", {}, {}}};
    auto p = prompt::build_prompt("x\n", {}, {}, ia);
    auto no_data = std::string(prompt::kStallHeader) + "\n" + prompt::kNoData + "\n";
    EXPECT_NE(p.prompt_text.find(no_data), std::string::npos);
    EXPECT_NE(p.prompt_text.find(std::string(prompt::kRooflineHeader) + "\n" + prompt::kNoData), std::string::npos);
    EXPECT_THROW(prompt::build_prompt("x\n", {}, {}, {}), prompt::NoDiagnostics);
}

TEST(BuildPrompt, Guardrails) {
    auto p = prompt::build_prompt("x\n", {}, one_stall(), {});
    for (const auto& g : prompt::mandatory_guardrails()) EXPECT_NE(p.prompt_text.find("- " + g), std::string::npos);
    for (const auto& g : prompt::default_pitfall_guardrails()) EXPECT_NE(p.prompt_text.find(g), std::string::npos);
    auto custom = prompt::build_prompt("x\n", {}, one_stall(), {}, {"Keep shared memory usage unchanged."});
    EXPECT_NE(custom.prompt_text.find("Keep shared memory usage unchanged."), std::string::npos);
    EXPECT_EQ(custom.prompt_text.find(prompt::default_pitfall_guardrails()[0]), std::string::npos);
}

TEST(ChunkPrompt, UnderLimitIsSingle) {
    auto p = prompt::build_prompt("a\nb\n", {}, one_stall(), {});
    auto chunks = prompt::chunk_prompt(p, p.prompt_text.size() + 1);
    ASSERT_EQ(chunks.size(), 1u);
    EXPECT_EQ(chunks[0].chunk_total, 1u);
    EXPECT_EQ(chunks[0].prompt_text, p.prompt_text);
}

TEST(ChunkPrompt, SplitsAtLineBoundariesAndReassembles) {
    std::string src;
    for (int i = 0; i < 300; ++i) src += "statement_" + std::to_string(i) + "();\n";
    std::vector<insight::SummaryLine> stalls{{"PC-01", "first", "k", 2}, {"PC-02", "late", "k", 290}};
    std::vector<insight::SummaryLine> ia{{"IA-01", "counter", {}, {}}};
    auto p = prompt::build_prompt(src, {}, stalls, ia);
    auto limit = p.prompt_text.size() / 2 + 500;
    auto chunks = prompt::chunk_prompt(p, limit);
    ASSERT_GE(chunks.size(), 2u);
    std::string joined;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        EXPECT_LE(chunks[i].prompt_text.size(), limit);
        EXPECT_EQ(chunks[i].chunk_index, i);
        EXPECT_EQ(chunks[i].chunk_total, chunks.size());
        EXPECT_TRUE(chunks[i].embedded_ids.count("IA-01"));
        joined += chunks[i].inputs.source;
        // Numbering continues from the original line numbers.
        EXPECT_EQ(chunks[i].numbered_source.substr(0, 6), prompt::number_source("x", chunks[i].first_line).substr(0, 6));
    }
    EXPECT_EQ(joined, src);
    EXPECT_TRUE(chunks.front().embedded_ids.count("PC-01"));
    EXPECT_FALSE(chunks.front().embedded_ids.count("PC-02"));
    EXPECT_TRUE(chunks.back().embedded_ids.count("PC-02"));
}

TEST(ChunkPrompt, OverlongLine) {
    auto p = prompt::build_prompt("short\n", {}, one_stall(), {});
    auto limit = p.prompt_text.size() + 100;
    auto big = prompt::build_prompt(std::string(2 * limit, 'x') + "\n", {}, one_stall(), {});
    EXPECT_THROW(prompt::chunk_prompt(big, limit), prompt::LineTooLong);
    EXPECT_THROW(prompt::chunk_prompt(big, 10), InvalidArgument);
}

TEST(CompilerFeedback, AppendsTail) {
    auto t = prompt::with_compiler_feedback("prompt\n", "err: x\n", 2);
    EXPECT_EQ(t.rfind("prompt\n# Compiler Feedback\n", 0), 0u);
    EXPECT_NE(t.find("Attempt 2 failed"), std::string::npos);
    EXPECT_NE(t.find("err: x\n# End Compiler Feedback\n"), std::string::npos);
}

TEST(ParseResponse, WellFormed) {
    auto r = support::response("int main() {}\n",
                               {"- [A1] lines 28-31 | add __restrict__ | evidence: PC-01, IA-02",
                                "- [A2] lines 40-40 | unroll loop | evidence: RL-01"},
                               {"- use shared memory tiling | reason: register pressure"});
    auto a = prompt::parse_response("Here you go.\n" + r);
    EXPECT_EQ(a.full_source, "int main() {}\n");
    ASSERT_EQ(a.applied.size(), 2u);
    EXPECT_EQ(a.applied[0], (prompt::EditRecord{"A1", 28, 31, "add __restrict__", {"PC-01", "IA-02"}, true}));
    ASSERT_EQ(a.withheld.size(), 1u);
    EXPECT_EQ(a.withheld[0], (prompt::WithheldItem{"use shared memory tiling", "register pressure"}));
}

TEST(ParseResponse, Failures) {
    EXPECT_THROW(prompt::parse_response("no code here"), prompt::MissingCodeBlock);
    EXPECT_THROW(prompt::parse_response("### OPTIMIZED CODE\n```\na\n```\n```\nb\n```\n"), prompt::MultipleCodeBlocks);
    EXPECT_THROW(prompt::parse_response("### OPTIMIZED CODE\n```\na\n"), prompt::MissingCodeBlock);
    EXPECT_THROW(prompt::parse_response("### OPTIMIZED CODE\n```\n\n```\n"), prompt::MissingCodeBlock);
}

TEST(ParseResponse, UnparsedAndNoneLines) {
    auto a = prompt::parse_response(support::response("x\n", {"- made it faster", "- [A1] lines 9-3 | bad range | evidence: PC-01"},
                                                      {"- none"}));
    ASSERT_EQ(a.applied.size(), 2u);
    EXPECT_FALSE(a.applied[0].parsed);
    EXPECT_EQ(a.applied[0].edit_id, "U1");
    EXPECT_FALSE(a.applied[1].parsed);
    EXPECT_TRUE(a.withheld.empty());
}

TEST(ParseResponse, BareFenceWithoutHeaders) {
    auto a = prompt::parse_response("```cpp\nint x;\n```\n");
    EXPECT_EQ(a.full_source, "int x;\n");
    EXPECT_TRUE(a.applied.empty());
}

// ---------------------------------------------------------------------------
// llm-gateway
// ---------------------------------------------------------------------------

TEST(Gateway, DefaultTemperature) {
    EXPECT_DOUBLE_EQ(llm::BackendConfig{}.temperature, 0.15);
    EXPECT_DOUBLE_EQ(llm::ChatRequest{}.temperature, 0.15);
}

TEST(Gateway, ScriptedMockByPromptHash) {
    TempDir dir("mock");
    auto pkg = support::tiny_prompt("echo hi\n");
    support::write(dir / (hash::sha256_hex(pkg.prompt_text) + ".txt"), "canned reply");
    support::write(dir / "default.txt", "fallback");
    llm::BackendConfig cfg;
    cfg.mock_dir = dir.str();
    llm::Gateway gw(cfg);
    EXPECT_FALSE(gw.uses_network());
    auto r = gw.complete(pkg);
    EXPECT_EQ(r.text, "canned reply");
    EXPECT_GE(r.latency_ms, 0);
    EXPECT_EQ(r.output_tokens, 2);
    EXPECT_EQ(gw.complete(support::tiny_prompt("other\n")).text, "fallback");
    std::filesystem::remove(dir / "default.txt");
    EXPECT_THROW(gw.complete(support::tiny_prompt("other\n")), llm::BackendRefused);
}

TEST(Gateway, ChunkedSendsEveryPart) {
    auto script = support::Script::with({"r1", "r2", "final"});
    llm::Gateway gw(support::mock_config(), script->backend());
    std::vector<prompt::PromptPackage> chunks(3, support::tiny_prompt("a\n"));
    auto r = gw.complete_chunked(chunks);
    EXPECT_EQ(gw.calls(), 3);
    ASSERT_EQ(script->seen.size(), 3u);
    EXPECT_EQ(r.text, "final");
    long long in = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(script->seen[i].user.rfind(llm::chunk_prefix(i, 3), 0), 0u);
        in += static_cast<long long>(script->seen[i].user.size() / 4);
    }
    EXPECT_EQ(r.input_tokens, in);
    EXPECT_EQ(r.output_tokens, 0 + 0 + 1); // "r1","r2" -> 0 each, "final" -> 1
}

TEST(Gateway, SingleChunkMatchesComplete) {
    auto script = support::Script::with({"same"});
    llm::Gateway gw(support::mock_config(), script->backend());
    auto pkg = support::tiny_prompt("a\n");
    auto a = gw.complete_chunked({pkg});
    auto b = gw.complete(pkg);
    EXPECT_EQ(a.text, b.text);
    EXPECT_EQ(script->seen[0].user, script->seen[1].user);
    EXPECT_EQ(script->seen[0].user, pkg.prompt_text);
    EXPECT_EQ(script->seen[0].system, text::join(pkg.guardrails, "\n"));
}

TEST(Gateway, RemoteHttpRequestShape) {
    ::setenv("OPTIMAS_TEST_KEY", "sk-test", 1);
    nlohmann::json seen;
    std::string auth;
    FakeServer server([&](const httplib::Request& req, httplib::Response& res) {
        seen = nlohmann::json::parse(req.body);
        auth = req.get_header_value("Authorization");
        res.set_content(R"({"choices":[{"message":{"content":"ok"}}],"usage":{"prompt_tokens":11,"completion_tokens":2}})",
                        "application/json");
    });
    llm::BackendConfig cfg;
    cfg.kind = llm::BackendKind::remote_http;
    cfg.model_name = "gpt-test";
    cfg.endpoint = server.url("/v1/chat/completions");
    cfg.auth_env_var = "OPTIMAS_TEST_KEY";
    llm::Gateway gw(cfg);
    EXPECT_TRUE(gw.uses_network());
    auto r = gw.complete_text("sys", "user");
    EXPECT_EQ(r.text, "ok");
    EXPECT_EQ(r.input_tokens, 11);
    EXPECT_EQ(r.output_tokens, 2);
    EXPECT_EQ(auth, "Bearer sk-test");
    EXPECT_EQ(seen["model"], "gpt-test");
    EXPECT_DOUBLE_EQ(seen["temperature"].get<double>(), 0.15);
    EXPECT_EQ(seen["messages"][0]["role"], "system");
    EXPECT_EQ(seen["messages"][1]["content"], "user");
}

TEST(Gateway, RemoteHttpNeedsCredential) {
    ::unsetenv("OPTIMAS_MISSING_KEY");
    llm::BackendConfig cfg;
    cfg.kind = llm::BackendKind::remote_http;
    cfg.endpoint = "http://127.0.0.1:9/v1";
    cfg.auth_env_var = "OPTIMAS_MISSING_KEY";
    EXPECT_THROW(llm::Gateway gw(cfg), llm::AuthMissing);
}

TEST(Gateway, LocalServerRetriesServerErrors) {
    std::atomic<int> hits{0};
    FakeServer server([&](const httplib::Request&, httplib::Response& res) {
        if (++hits < 3) {
            res.status = 503;
            res.set_content("busy", "text/plain");
            return;
        }
        res.set_content(R"({"message":{"content":"done"},"prompt_eval_count":5,"eval_count":1})", "application/json");
    });
    llm::BackendConfig cfg;
    cfg.kind = llm::BackendKind::local_server;
    cfg.endpoint = server.url("/api/chat");
    SleepLog sleeps;
    llm::Gateway gw(cfg, std::shared_ptr<llm::HttpTransport>(), sleeps.sleeper());
    auto r = gw.complete_text("s", "u");
    EXPECT_EQ(r.text, "done");
    EXPECT_EQ(r.input_tokens, 5);
    EXPECT_EQ(gw.calls(), 3);
    EXPECT_EQ(sleeps.ms, (std::vector<long long>{1000, 2000}));
}

TEST(Gateway, ClientErrorsAreFinal) {
    std::atomic<int> hits{0};
    FakeServer server([&](const httplib::Request&, httplib::Response& res) {
        ++hits;
        res.status = 400;
        res.set_content("bad request", "text/plain");
    });
    llm::BackendConfig cfg;
    cfg.kind = llm::BackendKind::local_server;
    cfg.endpoint = server.url("/api/chat");
    SleepLog sleeps;
    llm::Gateway gw(cfg, std::shared_ptr<llm::HttpTransport>(), sleeps.sleeper());
    try {
        gw.complete_text("s", "u");
        FAIL();
    } catch (const llm::BackendRefused& e) {
        EXPECT_EQ(e.status(), 400);
        EXPECT_EQ(e.body_tail(), "bad request");
    }
    EXPECT_EQ(hits.load(), 1);
    EXPECT_TRUE(sleeps.ms.empty());
}

TEST(Gateway, UnreachableEndpointExhaustsAfterThreeAttempts) {
    llm::BackendConfig cfg;
    cfg.kind = llm::BackendKind::local_server;
    cfg.endpoint = "http://127.0.0.1:1/api/chat";
    cfg.request_timeout_s = 2;
    SleepLog sleeps;
    llm::Gateway gw(cfg, std::shared_ptr<llm::HttpTransport>(), sleeps.sleeper());
    EXPECT_THROW(gw.complete_text("s", "u"), llm::TransportExhausted);
    EXPECT_EQ(gw.calls(), 3);
    EXPECT_EQ(sleeps.ms, (std::vector<long long>{1000, 2000}));
}

TEST(Gateway, InFlightLimitIsRespected) {
    std::atomic<int> active{0}, peak{0};
    auto backend = std::make_shared<llm::FunctionBackend>([&](const llm::ChatRequest&) {
        int now = ++active;
        int p = peak.load();
        while (now > p && !peak.compare_exchange_weak(p, now)) {}
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
        --active;
        return llm::ModelResponse{"x", 0, 0, 0, "fn"};
    });
    auto cfg = support::mock_config();
    cfg.in_flight_limit = 2;
    llm::Gateway gw(cfg, backend);
    std::vector<std::thread> ts;
    for (int i = 0; i < 6; ++i) ts.emplace_back([&] { gw.complete_text("s", "u"); });
    for (auto& t : ts) t.join();
    EXPECT_LE(peak.load(), 2);
    EXPECT_EQ(gw.calls(), 6);
}

TEST(Gateway, ConfigValidation) {
    llm::BackendConfig cfg;
    cfg.mock_dir = "x";
    cfg.temperature = 1.5;
    EXPECT_THROW(llm::validate(cfg), InvalidArgument);
    cfg.temperature = 0.2;
    cfg.kind = llm::BackendKind::local_server;
    EXPECT_THROW(llm::validate(cfg), InvalidArgument);
    EXPECT_EQ(llm::parse_backend_kind("remote-http"), llm::BackendKind::remote_http);
    EXPECT_THROW(llm::parse_backend_kind("carrier-pigeon"), InvalidArgument);
}
