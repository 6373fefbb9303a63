#pragma once

// HTTP API over a run root: run listing and inspection, asynchronous run
// submission, re-profiling, and the corpus index.

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "optimas/detail/http.hpp"

#include "optimas/config.hpp"
#include "optimas/corpus.hpp"
#include "optimas/ear.hpp"
#include "optimas/error.hpp"
#include "optimas/harness.hpp"
#include "optimas/hash.hpp"
#include "optimas/pipeline.hpp"

namespace optimas::server {

class PortInUse : public Error {
public:
    PortInUse(const std::string& host, int port)
        : Error("cannot listen on " + host + ":" + std::to_string(port) + " (address in use or unavailable)") {}
};

struct ServerConfig {
    std::string output_root;      // runs and corpus live here
    std::string base_dir;         // relative paths in submitted configs resolve here
    std::string host = "127.0.0.1";
    int port = 8080;              // 0 picks a free port
};

namespace detail {

inline nlohmann::json error_body(const std::string& msg) { return {{"error", msg}}; }

inline void send_json(httplib::Response& res, const nlohmann::json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(2), "application/json");
}

inline std::string content_type_for(const std::string& name) {
    auto ext = std::filesystem::path(name).extension().string();
    if (ext == ".json") return "application/json";
    return "text/plain; charset=utf-8";
}

inline std::optional<double> json_number(const nlohmann::json& j, const char* key) {
    if (j.contains(key) && j[key].is_number()) return j[key].get<double>();
    return std::nullopt;
}

} // namespace detail

class Server {
public:
    // Called for every submitted run; tests use it to inject a backend.
    using OptionsHook = std::function<void(pipeline::RunOptions&)>;

    explicit Server(ServerConfig cfg, OptionsHook hook = nullptr) : cfg_(std::move(cfg)), hook_(std::move(hook)) {
        std::filesystem::create_directories(cfg_.output_root);
        if (cfg_.base_dir.empty()) cfg_.base_dir = std::filesystem::current_path().string();
        routes();
    }

    ~Server() { stop(); }
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    // Binds and serves on a background thread; returns the bound port.
    int start() {
        int port = cfg_.port;
        if (port == 0) {
            port = http_.bind_to_any_port(cfg_.host);
            if (port < 0) throw PortInUse(cfg_.host, 0);
        } else if (!http_.bind_to_port(cfg_.host, port)) {
            throw PortInUse(cfg_.host, port);
        }
        port_ = port;
        listener_ = std::thread([this] { http_.listen_after_bind(); });
        http_.wait_until_ready();
        return port_;
    }

    // Serves on the calling thread until stop() is called elsewhere.
    void run() {
        if (!http_.bind_to_port(cfg_.host, cfg_.port)) throw PortInUse(cfg_.host, cfg_.port);
        port_ = cfg_.port;
        http_.listen_after_bind();
    }

    void stop() {
        http_.stop();
        if (listener_.joinable()) listener_.join();
        std::vector<std::thread> workers;
        {
            std::lock_guard lock(jobs_m_);
            workers.swap(workers_);
        }
        for (auto& w : workers) {
            if (w.joinable()) w.join();
        }
    }

    int port() const { return port_; }

    // Blocks until every submitted run has finished.
    void wait_idle() {
        std::vector<std::thread> workers;
        {
            std::lock_guard lock(jobs_m_);
            workers.swap(workers_);
        }
        for (auto& w : workers) {
            if (w.joinable()) w.join();
        }
    }

private:
    struct Job {
        std::string status = "queued"; // queued, running, done, failed
        std::string stage;
        std::string error;
        std::string run_dir;
    };

    nlohmann::json run_summary(const std::string& dir) const {
        auto m = nlohmann::json::parse(text::read_file((std::filesystem::path(dir) / harness::kManifestFile).string()));
        nlohmann::json s;
        s["id"] = m.value("run_uuid", "");
        s["dir"] = std::filesystem::path(dir).filename().string();
        s["created_at"] = m.value("created_at", "");
        s["app"] = m.value("app", "");
        s["llm"] = m.value("llm", "");
        // Unfinished directories not owned by a live job were interrupted.
        s["status"] = m.value("stage", "") == "done" ? m.value("status", "") : std::string("incomplete");
        s["improvement_percent"] = m.contains("improvement_percent") ? m["improvement_percent"] : nlohmann::json(nullptr);
        s["compile_attempts"] = m.value("compile_attempts", 0);
        auto ear_path = std::filesystem::path(dir) / harness::kEarReportFile;
        if (std::filesystem::exists(ear_path)) {
            auto e = nlohmann::json::parse(text::read_file(ear_path.string()));
            s["ear"] = {{"evidence_coverage", e.value("evidence_coverage", 0.0)},
                        {"localization_agreement", e.value("localization_agreement", 0.0)},
                        {"directional_consistency", e.value("directional_consistency", nlohmann::json(ear::kNotMeasured))}};
        } else {
            s["ear"] = nullptr;
        }
        std::lock_guard lock(jobs_m_);
        if (auto it = jobs_.find(s["id"].get<std::string>()); it != jobs_.end() && it->second.status != "done") {
            s["status"] = it->second.status;
            s["stage"] = it->second.stage;
            if (!it->second.error.empty()) s["error"] = it->second.error;
        }
        return s;
    }

    std::string locate(const std::string& id) const { return pipeline::find_run(cfg_.output_root, id); }

    void routes() {
        http_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                   {"Access-Control-Allow-Headers", "Content-Type"},
                                   {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
        http_.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
        http_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            std::string msg = "internal error";
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                msg = e.what();
            } catch (...) {
            }
            detail::send_json(res, detail::error_body(msg), 500);
        });

        http_.Get("/runs", [this](const httplib::Request&, httplib::Response& res) {
            auto arr = nlohmann::json::array();
            std::set<std::string> listed;
            for (const auto& dir : pipeline::list_runs(cfg_.output_root)) {
                auto s = run_summary(dir);
                listed.insert(s["id"].get<std::string>());
                arr.push_back(std::move(s));
            }
            std::lock_guard lock(jobs_m_);
            for (const auto& [id, job] : jobs_) {
                if (listed.count(id)) continue;
                arr.push_back({{"id", id}, {"status", job.status}, {"stage", job.stage}, {"error", job.error}});
            }
            detail::send_json(res, arr);
        });

        http_.Get(R"(/runs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            const auto id = req.matches[1].str();
            std::string dir;
            try {
                dir = locate(id);
            } catch (const InvalidArgument&) {
                std::lock_guard lock(jobs_m_);
                if (auto it = jobs_.find(id); it != jobs_.end()) {
                    return detail::send_json(res, {{"id", id}, {"status", it->second.status}, {"stage", it->second.stage},
                                                   {"error", it->second.error}});
                }
                return detail::send_json(res, detail::error_body("unknown run " + id), 404);
            }
            auto body = run_summary(dir);
            body["manifest"] = nlohmann::json::parse(text::read_file((std::filesystem::path(dir) / harness::kManifestFile).string()));
            detail::send_json(res, body);
        });

        http_.Get(R"(/runs/([^/]+)/artifacts/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
            auto dir = locate_or_404(req.matches[1].str(), res);
            if (dir.empty()) return;
            const auto name = req.matches[2].str();
            auto m = nlohmann::json::parse(text::read_file((std::filesystem::path(dir) / harness::kManifestFile).string()));
            if (name != harness::kManifestFile && !m.at("digests").contains(name)) {
                return detail::send_json(res, detail::error_body("no artifact " + name), 404);
            }
            res.set_content(text::read_file((std::filesystem::path(dir) / name).string()), detail::content_type_for(name));
        });

        http_.Get(R"(/runs/([^/]+)/ear)", [this](const httplib::Request& req, httplib::Response& res) {
            auto dir = locate_or_404(req.matches[1].str(), res);
            if (dir.empty()) return;
            auto p = std::filesystem::path(dir) / harness::kEarReportFile;
            if (!std::filesystem::exists(p)) return detail::send_json(res, detail::error_body("run has no EAR report yet"), 404);
            res.set_content(text::read_file(p.string()), "application/json");
        });

        http_.Get(R"(/runs/([^/]+)/diff)", [this](const httplib::Request& req, httplib::Response& res) {
            auto dir = locate_or_404(req.matches[1].str(), res);
            if (dir.empty()) return;
            namespace fs = std::filesystem;
            auto orig = fs::path(dir) / harness::kOriginalFile;
            auto resp = fs::path(dir) / harness::kResponseFile;
            if (!fs::exists(orig) || !fs::exists(resp)) return detail::send_json(res, {{"unified_diff", ""}, {"hunks", nlohmann::json::array()}});
            prompt::OptimizedArtifact art;
            try {
                art = prompt::parse_response(text::read_file(resp.string()));
            } catch (const Error&) {
                return detail::send_json(res, {{"unified_diff", ""}, {"hunks", nlohmann::json::array()}});
            }
            std::map<std::string, std::string> id_map;
            auto idp = fs::path(dir) / harness::kDiagnosticsDir / ingest::kIdMapFile;
            if (fs::exists(idp)) id_map = nlohmann::json::parse(text::read_file(idp.string())).get<std::map<std::string, std::string>>();
            auto body = ear::to_json(ear::annotate_hunks(text::read_file(orig.string()), art), id_map);
            auto an = fs::path(dir) / pipeline::kAnalysisFile;
            if (fs::exists(an)) body["salient"] = nlohmann::json::parse(text::read_file(an.string())).value("localizable_salient", nlohmann::json::array());
            detail::send_json(res, body);
        });

        http_.Post("/runs", [this](const httplib::Request& req, httplib::Response& res) {
            config::PipelineConfig cfg;
            try {
                cfg = config::parse_config_text(req.body, cfg_.base_dir);
                if (cfg.eval.compile_cmd.empty()) throw config::SchemaViolation("eval.compile_cmd", "required to run the pipeline");
            } catch (const config::SchemaViolation& e) {
                return detail::send_json(res, {{"error", e.what()}, {"key", e.key()}, {"reason", e.reason()}}, 400);
            } catch (const Error& e) {
                return detail::send_json(res, detail::error_body(e.what()), 400);
            }
            cfg.output_root = cfg_.output_root;
            const auto id = hash::random_uuid();
            {
                std::lock_guard lock(jobs_m_);
                jobs_[id] = Job{};
                workers_.emplace_back([this, cfg, id] { execute(cfg, id); });
            }
            detail::send_json(res, {{"id", id}, {"status", "queued"}}, 202);
        });

        http_.Post(R"(/runs/([^/]+)/reprofile)", [this](const httplib::Request& req, httplib::Response& res) {
            auto dir = locate_or_404(req.matches[1].str(), res);
            if (dir.empty()) return;
            config::SourcePaths paths;
            bool have = false;
            if (!text::trim(req.body).empty()) {
                nlohmann::json b;
                try {
                    b = nlohmann::json::parse(req.body);
                } catch (const nlohmann::json::exception& e) {
                    return detail::send_json(res, detail::error_body(std::string("body is not JSON: ") + e.what()), 400);
                }
                auto resolve = [&](const char* k) { return config::detail::resolve(cfg_.base_dir, b.value(k, "")); };
                if (b.contains("dir")) {
                    paths = pipeline::paths_in_dir(resolve("dir"));
                } else {
                    paths = {resolve("kernels"), resolve("pcsamples"), resolve("counters"), resolve("roofline")};
                }
                have = true;
            } else {
                auto m = nlohmann::json::parse(text::read_file((std::filesystem::path(dir) / harness::kManifestFile).string()));
                const auto& post = m.at("config_snapshot").at("sources").value("post", nlohmann::json(nullptr));
                if (post.is_object()) {
                    paths = {post.value("kernels", ""), post.value("pcsamples", ""), post.value("counters", ""), post.value("roofline", "")};
                    have = true;
                }
            }
            if (!have) return detail::send_json(res, detail::error_body("no post-optimization diagnostics configured or supplied"), 409);
            try {
                std::lock_guard lock(reprofile_m_);
                auto report = pipeline::reprofile(dir, paths);
                detail::send_json(res, ear::to_json(report));
            } catch (const Error& e) {
                detail::send_json(res, detail::error_body(e.what()), 422);
            }
        });

        http_.Get("/corpus", [this](const httplib::Request&, httplib::Response& res) {
            auto arr = nlohmann::json::array();
            for (const auto& e : corpus::read_index(cfg_.output_root)) {
                arr.push_back({{"id", e.id}, {"path", e.path}, {"record", corpus::to_json(e.record)}});
            }
            detail::send_json(res, arr);
        });
    }

    std::string locate_or_404(const std::string& id, httplib::Response& res) const {
        try {
            return locate(id);
        } catch (const InvalidArgument&) {
            detail::send_json(res, detail::error_body("unknown run " + id), 404);
            return {};
        }
    }

    void execute(config::PipelineConfig cfg, std::string id) {
        pipeline::RunOptions opt;
        opt.run_uuid = id;
        opt.on_stage = [this, id](const std::string& s) {
            std::lock_guard lock(jobs_m_);
            jobs_[id].status = "running";
            jobs_[id].stage = s;
        };
        if (hook_) hook_(opt);
        try {
            auto r = pipeline::run_pipeline(cfg, opt);
            std::lock_guard lock(jobs_m_);
            jobs_[id].status = "done";
            jobs_[id].run_dir = r.run_dir;
        } catch (const std::exception& e) {
            std::lock_guard lock(jobs_m_);
            jobs_[id].status = "failed";
            jobs_[id].error = e.what();
        }
    }

    ServerConfig cfg_;
    OptionsHook hook_;
    httplib::Server http_;
    std::thread listener_;
    int port_ = 0;
    mutable std::mutex jobs_m_;
    std::map<std::string, Job> jobs_;
    std::vector<std::thread> workers_;
    std::mutex reprofile_m_;
};

} // namespace optimas::server
