#pragma once

// Shared fixtures: scratch directories, stub compilers, scripted backends.

#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <optimas/optimas.hpp>

namespace support {

namespace fs = std::filesystem;
using namespace optimas;

class TempDir {
public:
    explicit TempDir(const std::string& tag = "t")
        : path_(fs::temp_directory_path() / ("optimas-" + tag + "-" + hash::random_uuid())) {
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    std::string str() const { return path_.string(); }
    fs::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    fs::path path_;
};

inline void write(const fs::path& p, std::string_view body) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    text::write_file(p.string(), body);
}

inline std::string read(const fs::path& p) { return text::read_file(p.string()); }

// The demo application tree copied into `dir/app`.
inline fs::path copy_demo(const TempDir& dir) {
    auto dst = dir / "app";
    fs::copy(OPTIMAS_DEMO_DIR, dst, fs::copy_options::recursive);
    return dst;
}

// Demo configuration with fewer timed runs so tests stay quick.
inline config::PipelineConfig demo_config(const TempDir& dir) {
    auto app = copy_demo(dir);
    auto cfg = config::load_config((app / "config.yml").string());
    cfg.eval.runs = 2;
    return cfg;
}

inline std::string copy_compiler() { return "cp {src} {bin} && chmod +x {bin}"; }

// Fails its first `failures` invocations, then behaves like copy_compiler.
// The invocation count lives in a state file next to the script.
inline std::string flaky_compiler(const fs::path& dir, int failures) {
    auto script = dir / "flaky_cc.sh";
    write(script,
          "#!/bin/sh\n"
          "state=\"$1\"; limit=\"$2\"; src=\"$3\"; bin=\"$4\"\n"
          "c=$(cat \"$state\" 2>/dev/null || echo 0)\n"
          "if [ \"$c\" -lt \"$limit\" ]; then\n"
          "  echo $((c + 1)) > \"$state\"\n"
          "  echo \"$src:1:1: error: stub failure $((c + 1))\" >&2\n"
          "  exit 1\n"
          "fi\n"
          "cp \"$src\" \"$bin\" && chmod +x \"$bin\"\n");
    return "sh " + script.string() + " " + (dir / "cc.state").string() + " " + std::to_string(failures) + " {src} {bin}";
}

inline std::string response(const std::string& code, const std::vector<std::string>& applied,
                            const std::vector<std::string>& withheld = {}) {
    std::string r = "### OPTIMIZED CODE\n```sh\n" + code;
    if (!code.empty() && code.back() != '\n') r += '\n';
    r += "```\n\n### APPLIED\n";
    for (const auto& a : applied) r += a + "\n";
    r += "\n### WITHHELD\n";
    for (const auto& w : withheld) r += w + "\n";
    return r;
}

// Backend that replays `replies` in order (the last one repeats) and keeps
// every request it saw.
struct Script {
    std::vector<std::string> replies;
    std::vector<llm::ChatRequest> seen;
    std::mutex mu;

    static std::shared_ptr<Script> with(std::vector<std::string> replies) {
        auto s = std::make_shared<Script>();
        s->replies = std::move(replies);
        return s;
    }

    std::shared_ptr<llm::Backend> backend() {
        auto self = this;
        return std::make_shared<llm::FunctionBackend>([self](const llm::ChatRequest& req) {
            std::lock_guard lock(self->mu);
            self->seen.push_back(req);
            llm::ModelResponse r;
            r.text = self->replies.at(std::min(self->seen.size(), self->replies.size()) - 1);
            r.input_tokens = static_cast<long long>(req.user.size() / 4);
            r.output_tokens = static_cast<long long>(r.text.size() / 4);
            r.backend_id = "script";
            return r;
        });
    }
};

inline llm::BackendConfig mock_config() {
    llm::BackendConfig c;
    c.kind = llm::BackendKind::scripted_mock;
    c.mock_dir = "unused";
    return c;
}

inline harness::BuildSpec shell_spec(const fs::path& workdir, const std::string& compile = copy_compiler()) {
    harness::BuildSpec s;
    s.compile_cmd = compile;
    s.exec_cmd = "{bin} {args}";
    s.workdir = workdir.string();
    s.source_name = "candidate.sh";
    s.binary_name = "candidate.bin";
    s.runs = 1;
    s.host_lock = (workdir / "measure.lock").string();
    return s;
}

// Minimal prompt package around `source` with one stall line.
inline prompt::PromptPackage tiny_prompt(const std::string& source) {
    std::vector<insight::SummaryLine> stall{{"PC-01", "line 1 `echo` — stall_wait: 90% of line stalls, 90% of kernel stalls", "k", 1}};
    return prompt::build_prompt(source, {}, stall, {});
}

} // namespace support
