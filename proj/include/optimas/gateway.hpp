#pragma once

// Uniform completion interface over interchangeable backends: an
// OpenAI-style chat endpoint, a local Ollama-style server, and a scripted
// mock that replays canned responses from a fixture directory.

#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "optimas/detail/http.hpp"

#include "optimas/error.hpp"
#include "optimas/hash.hpp"
#include "optimas/prompt.hpp"
#include "optimas/text.hpp"

namespace optimas::llm {

inline constexpr double kDefaultTemperature = 0.15;
inline constexpr int kTransportAttempts = 3;

enum class BackendKind { remote_http, local_server, scripted_mock };

inline const char* to_string(BackendKind k) {
    switch (k) {
    case BackendKind::remote_http: return "remote-http";
    case BackendKind::local_server: return "local-server";
    case BackendKind::scripted_mock: return "scripted-mock";
    }
    return "?";
}

inline BackendKind parse_backend_kind(const std::string& s) {
    if (s == "remote-http") return BackendKind::remote_http;
    if (s == "local-server") return BackendKind::local_server;
    if (s == "scripted-mock") return BackendKind::scripted_mock;
    throw InvalidArgument("unknown llm kind '" + s + "' (expected remote-http, local-server or scripted-mock)");
}

struct BackendConfig {
    BackendKind kind = BackendKind::scripted_mock;
    std::string model_name = "mock";
    double temperature = kDefaultTemperature;
    int max_output_tokens = 8192;
    std::string endpoint;     // full URL of the chat endpoint
    std::string auth_env_var; // environment variable holding the credential
    int request_timeout_s = 300;
    int in_flight_limit = 2;
    std::string mock_dir;     // scripted-mock fixture directory
};

inline void validate(const BackendConfig& cfg) {
    if (!(cfg.temperature >= 0.0 && cfg.temperature <= 1.0)) throw InvalidArgument("temperature must lie in [0, 1]");
    if (cfg.kind != BackendKind::scripted_mock && cfg.endpoint.empty()) {
        throw InvalidArgument(std::string("endpoint is required for ") + to_string(cfg.kind));
    }
    if (cfg.kind == BackendKind::scripted_mock && cfg.mock_dir.empty()) {
        throw InvalidArgument("scripted-mock requires a fixture directory");
    }
    if (cfg.in_flight_limit < 1) throw InvalidArgument("in_flight_limit must be positive");
    if (cfg.max_output_tokens < 1) throw InvalidArgument("max_output_tokens must be positive");
}

struct ModelResponse {
    std::string text;
    long long input_tokens = 0;
    long long output_tokens = 0;
    long long latency_ms = 0;
    std::string backend_id;
};

struct ChatRequest {
    std::string model;
    double temperature = kDefaultTemperature;
    int max_output_tokens = 0;
    std::string system;
    std::string user;
};

class AuthMissing : public Error {
public:
    explicit AuthMissing(const std::string& var)
        : Error("credential environment variable '" + var + "' is not set") {}
};
class BackendRefused : public Error {
public:
    BackendRefused(int status, std::string body_tail)
        : Error("backend refused request with status " + std::to_string(status) + ": " + body_tail),
          status_(status), body_tail_(std::move(body_tail)) {}
    int status() const noexcept { return status_; }
    const std::string& body_tail() const noexcept { return body_tail_; }

private:
    int status_;
    std::string body_tail_;
};
// Retryable failure of a single attempt.
class TransportError : public Error {
public:
    using Error::Error;
};
class TransportExhausted : public Error {
public:
    TransportExhausted(int attempts, const std::string& last)
        : Error("transport failed after " + std::to_string(attempts) + " attempts: " + last), last_(last) {}
    const std::string& last_error() const noexcept { return last_; }

private:
    std::string last_;
};

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

struct HttpReply {
    int status = 0;
    std::string body;
};

class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    // Throws TransportError when no HTTP reply was obtained.
    virtual HttpReply post(const std::string& url, const std::vector<std::pair<std::string, std::string>>& headers,
                           const std::string& body, int timeout_s) = 0;
};

class HttplibTransport final : public HttpTransport {
public:
    HttpReply post(const std::string& url, const std::vector<std::pair<std::string, std::string>>& headers,
                   const std::string& body, int timeout_s) override {
        auto scheme_end = url.find("://");
        if (scheme_end == std::string::npos) throw InvalidArgument("endpoint must be an absolute URL: " + url);
        auto path_start = url.find('/', scheme_end + 3);
        std::string origin = path_start == std::string::npos ? url : url.substr(0, path_start);
        std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);

        httplib::Client client(origin);
        client.set_connection_timeout(std::chrono::seconds(std::min(timeout_s, 30)));
        client.set_read_timeout(std::chrono::seconds(timeout_s));
        client.set_write_timeout(std::chrono::seconds(timeout_s));
        httplib::Headers h;
        for (const auto& [k, v] : headers) h.emplace(k, v);
        auto res = client.Post(path, h, body, "application/json");
        if (!res) throw TransportError(httplib::to_string(res.error()) + " (" + url + ")");
        return {res->status, res->body};
    }
};

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

class Backend {
public:
    virtual ~Backend() = default;
    // Throws TransportError (retryable) or BackendRefused (not retryable).
    virtual ModelResponse send(const ChatRequest& req) = 0;
    virtual bool uses_network() const = 0;
};

namespace detail {

inline std::string body_tail(const std::string& body) {
    return body.size() > 512 ? body.substr(body.size() - 512) : body;
}

// 429 and 5xx are worth retrying; other non-2xx replies are final.
inline void check_status(const HttpReply& reply) {
    if (reply.status >= 200 && reply.status < 300) return;
    if (reply.status == 429 || reply.status >= 500) {
        throw TransportError("HTTP " + std::to_string(reply.status) + ": " + body_tail(reply.body));
    }
    throw BackendRefused(reply.status, body_tail(reply.body));
}

inline nlohmann::json parse_reply(const HttpReply& reply) {
    try {
        return nlohmann::json::parse(reply.body);
    } catch (const nlohmann::json::parse_error&) {
        throw BackendRefused(reply.status, "unparseable reply: " + body_tail(reply.body));
    }
}

inline std::string resolve_credential(const std::string& var, bool required) {
    if (var.empty()) {
        if (required) throw AuthMissing("<unset>");
        return {};
    }
    const char* v = std::getenv(var.c_str());
    if (!v || !*v) throw AuthMissing(var);
    return v;
}

inline long long word_count(const std::string& s) {
    std::istringstream in(s);
    long long n = 0;
    std::string w;
    while (in >> w) ++n;
    return n;
}

} // namespace detail

// OpenAI-compatible chat completions.
class RemoteHttpBackend final : public Backend {
public:
    RemoteHttpBackend(BackendConfig cfg, std::shared_ptr<HttpTransport> transport)
        : cfg_(std::move(cfg)), transport_(std::move(transport)),
          key_(detail::resolve_credential(cfg_.auth_env_var, true)) {}

    ModelResponse send(const ChatRequest& req) override {
        nlohmann::json body = {{"model", req.model},
                               {"temperature", req.temperature},
                               {"max_tokens", req.max_output_tokens},
                               {"messages",
                                {{{"role", "system"}, {"content", req.system}}, {{"role", "user"}, {"content", req.user}}}}};
        auto reply = transport_->post(cfg_.endpoint, {{"Authorization", "Bearer " + key_}}, body.dump(),
                                      cfg_.request_timeout_s);
        detail::check_status(reply);
        auto doc = detail::parse_reply(reply);
        ModelResponse r;
        try {
            r.text = doc.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception&) {
            throw BackendRefused(reply.status, "reply has no choices[0].message.content");
        }
        if (doc.contains("usage")) {
            r.input_tokens = doc["usage"].value("prompt_tokens", 0LL);
            r.output_tokens = doc["usage"].value("completion_tokens", 0LL);
        }
        r.backend_id = std::string("remote-http:") + req.model;
        return r;
    }
    bool uses_network() const override { return true; }

private:
    BackendConfig cfg_;
    std::shared_ptr<HttpTransport> transport_;
    std::string key_;
};

// Ollama-style /api/chat.
class LocalServerBackend final : public Backend {
public:
    LocalServerBackend(BackendConfig cfg, std::shared_ptr<HttpTransport> transport)
        : cfg_(std::move(cfg)), transport_(std::move(transport)),
          key_(detail::resolve_credential(cfg_.auth_env_var, false)) {}

    ModelResponse send(const ChatRequest& req) override {
        nlohmann::json body = {
            {"model", req.model},
            {"stream", false},
            {"options", {{"temperature", req.temperature}, {"num_predict", req.max_output_tokens}}},
            {"messages",
             {{{"role", "system"}, {"content", req.system}}, {{"role", "user"}, {"content", req.user}}}}};
        std::vector<std::pair<std::string, std::string>> headers;
        if (!key_.empty()) headers.emplace_back("Authorization", "Bearer " + key_);
        auto reply = transport_->post(cfg_.endpoint, headers, body.dump(), cfg_.request_timeout_s);
        detail::check_status(reply);
        auto doc = detail::parse_reply(reply);
        ModelResponse r;
        try {
            r.text = doc.at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception&) {
            throw BackendRefused(reply.status, "reply has no message.content");
        }
        r.input_tokens = doc.value("prompt_eval_count", 0LL);
        r.output_tokens = doc.value("eval_count", 0LL);
        r.backend_id = std::string("local-server:") + req.model;
        return r;
    }
    bool uses_network() const override { return true; }

private:
    BackendConfig cfg_;
    std::shared_ptr<HttpTransport> transport_;
    std::string key_;
};

// Replays `<dir>/<sha256(user text)>[.txt]`, falling back to `<dir>/default.txt`.
// Token counts are whitespace-separated word counts.
class ScriptedMockBackend final : public Backend {
public:
    explicit ScriptedMockBackend(std::string dir) : dir_(std::move(dir)) {}

    ModelResponse send(const ChatRequest& req) override {
        namespace fs = std::filesystem;
        const auto key = hash::sha256_hex(req.user);
        ModelResponse r;
        for (const auto& name : {key, key + ".txt", std::string("default.txt")}) {
            auto p = fs::path(dir_) / name;
            if (fs::is_regular_file(p)) {
                r.text = text::read_file(p.string());
                r.backend_id = "scripted-mock:" + name;
                r.input_tokens = detail::word_count(req.user) + detail::word_count(req.system);
                r.output_tokens = detail::word_count(r.text);
                return r;
            }
        }
        throw BackendRefused(404, "no mock fixture for prompt " + key + " in " + dir_);
    }
    bool uses_network() const override { return false; }

private:
    std::string dir_;
};

// In-process backend driven by a callable; used by tests and embedders.
class FunctionBackend final : public Backend {
public:
    using Fn = std::function<ModelResponse(const ChatRequest&)>;
    explicit FunctionBackend(Fn fn) : fn_(std::move(fn)) {}
    ModelResponse send(const ChatRequest& req) override { return fn_(req); }
    bool uses_network() const override { return false; }

private:
    Fn fn_;
};

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

class Semaphore {
public:
    explicit Semaphore(int n) : count_(n) {}
    void acquire() {
        std::unique_lock lock(m_);
        cv_.wait(lock, [&] { return count_ > 0; });
        --count_;
    }
    void release() {
        {
            std::lock_guard lock(m_);
            ++count_;
        }
        cv_.notify_one();
    }

private:
    std::mutex m_;
    std::condition_variable cv_;
    int count_;
};

inline std::string chunk_prefix(std::size_t index, std::size_t total) {
    return "part " + std::to_string(index + 1) + "/" + std::to_string(total) + "; reply only to the final part\n";
}

class Gateway {
public:
    using Sleeper = std::function<void(std::chrono::milliseconds)>;

    explicit Gateway(BackendConfig cfg, std::shared_ptr<HttpTransport> transport = nullptr, Sleeper sleeper = nullptr)
        : cfg_(std::move(cfg)), sleeper_(std::move(sleeper)), slots_(cfg_.in_flight_limit) {
        validate(cfg_);
        if (!transport) transport = std::make_shared<HttplibTransport>();
        switch (cfg_.kind) {
        case BackendKind::remote_http: backend_ = std::make_shared<RemoteHttpBackend>(cfg_, transport); break;
        case BackendKind::local_server: backend_ = std::make_shared<LocalServerBackend>(cfg_, transport); break;
        case BackendKind::scripted_mock: backend_ = std::make_shared<ScriptedMockBackend>(cfg_.mock_dir); break;
        }
        if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    }

    Gateway(BackendConfig cfg, std::shared_ptr<Backend> backend, Sleeper sleeper = nullptr)
        : cfg_(std::move(cfg)), backend_(std::move(backend)), sleeper_(std::move(sleeper)),
          slots_(std::max(1, cfg_.in_flight_limit)) {
        if (!(cfg_.temperature >= 0.0 && cfg_.temperature <= 1.0)) throw InvalidArgument("temperature must lie in [0, 1]");
        if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    }

    const BackendConfig& config() const { return cfg_; }
    bool uses_network() const { return backend_->uses_network(); }
    long long calls() const {
        std::lock_guard lock(stats_m_);
        return calls_;
    }

    // Sends system + user text; transport failures retry with 1 s, 2 s, ...
    // backoff for up to kTransportAttempts attempts.
    ModelResponse complete_text(const std::string& system, const std::string& user) {
        ChatRequest req{cfg_.model_name, cfg_.temperature, cfg_.max_output_tokens, system, user};
        slots_.acquire();
        struct Release {
            Semaphore& s;
            ~Release() { s.release(); }
        } release{slots_};

        std::string last;
        auto backoff = std::chrono::milliseconds(1000);
        for (int attempt = 1; attempt <= kTransportAttempts; ++attempt) {
            {
                std::lock_guard lock(stats_m_);
                ++calls_;
            }
            auto start = std::chrono::steady_clock::now();
            try {
                auto r = backend_->send(req);
                r.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
                return r;
            } catch (const TransportError& e) {
                last = e.what();
            }
            if (attempt < kTransportAttempts) {
                sleeper_(backoff);
                backoff *= 2;
            }
        }
        throw TransportExhausted(kTransportAttempts, last);
    }

    // System message carries the guardrails; the user message is the prompt.
    ModelResponse complete(const prompt::PromptPackage& pkg) {
        return complete_text(text::join(pkg.guardrails, "\n"), pkg.prompt_text);
    }

    // Sends every chunk in order, each prefixed "part i/n; ...". Returns the
    // final reply with token counts and latency summed over all calls.
    ModelResponse complete_chunked(const std::vector<prompt::PromptPackage>& chunks) {
        if (chunks.empty()) throw InvalidArgument("no chunks to send");
        if (chunks.size() == 1) return complete(chunks.front());
        ModelResponse total;
        for (std::size_t i = 0; i < chunks.size(); ++i) {
            auto r = complete_text(text::join(chunks[i].guardrails, "\n"),
                                   chunk_prefix(i, chunks.size()) + chunks[i].prompt_text);
            total.input_tokens += r.input_tokens;
            total.output_tokens += r.output_tokens;
            total.latency_ms += r.latency_ms;
            if (i + 1 == chunks.size()) {
                total.text = std::move(r.text);
                total.backend_id = std::move(r.backend_id);
            }
        }
        return total;
    }

private:
    BackendConfig cfg_;
    std::shared_ptr<Backend> backend_;
    Sleeper sleeper_;
    Semaphore slots_;
    mutable std::mutex stats_m_;
    long long calls_ = 0;
};

inline ModelResponse complete(const prompt::PromptPackage& pkg, const BackendConfig& cfg) {
    Gateway gw(cfg);
    return gw.complete(pkg);
}

inline ModelResponse complete_chunked(const std::vector<prompt::PromptPackage>& chunks, const BackendConfig& cfg) {
    Gateway gw(cfg);
    return gw.complete_chunked(chunks);
}

} // namespace optimas::llm
