#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>

#include "turnlm/decoding.hpp"

namespace httplib {
class Server;
}

namespace turnlm {

class KeyValueConfig;

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::filesystem::path checkpoint;
    std::filesystem::path vocab;  // defaults to <checkpoint>.vocab
    DecodeConfig decode;
    std::size_t max_sessions = 64;
    std::chrono::seconds idle_timeout{1800};
    std::string cors_origin = "*";

    /// Keys: host, port, checkpoint, vocab, max_sessions,
    /// session_timeout_seconds, cors_origin, decode.*. TURNLM_PORT overrides port.
    static ServiceConfig from(const KeyValueConfig& kv);
};

using SteadyClock = std::chrono::steady_clock;

struct SessionEntry {
    explicit SessionEntry(ChatSession s) : session(std::move(s)) {}

    ChatSession session;
    std::mutex busy;  // held for the duration of one generation
    SteadyClock::time_point last_activity = SteadyClock::now();
};

/// Thread-safe map of opaque session ids with idle eviction.
class SessionStore {
public:
    SessionStore(std::size_t max_sessions, std::chrono::seconds idle_timeout);

    /// Evicts idle sessions first; nullopt when still at capacity.
    std::optional<std::string> create(ChatSession session);
    std::shared_ptr<SessionEntry> find(const std::string& id);
    bool erase(const std::string& id);
    std::size_t evict_idle(SteadyClock::time_point now);
    std::size_t size() const;

private:
    std::size_t max_sessions_;
    std::chrono::seconds idle_timeout_;
    mutable std::mutex mutex_;
    std::unordered_map<std::string, std::shared_ptr<SessionEntry>> sessions_;
};

/// 32 hex characters from std::random_device.
std::string random_session_id();

struct HttpResponse {
    int status = 200;
    std::string body;  // JSON, empty for 204
};

/// Request handling independent of the socket layer; the HTTP server and
/// the tests share it.
class ChatService {
public:
    ChatService(ServiceConfig config, std::shared_ptr<const ModelParameters> params,
                std::shared_ptr<const Vocabulary> vocab);
    ~ChatService();

    /// Loads checkpoint and vocabulary named by the config.
    static std::unique_ptr<ChatService> from_config(ServiceConfig config);

    HttpResponse handle(const std::string& method, const std::string& path, const std::string& body);

    /// Binds the socket; port 0 picks a free port. Returns the bound port.
    int bind();
    /// Serves until stop(); call after bind().
    void listen();
    void stop();

    SessionStore& sessions() noexcept { return sessions_; }
    const ServiceConfig& config() const noexcept { return config_; }

private:
    HttpResponse create_session();
    HttpResponse chat(const std::string& body);
    HttpResponse context(const std::string& id);
    HttpResponse delete_session(const std::string& id);
    HttpResponse health() const;

    ServiceConfig config_;
    std::shared_ptr<const ModelParameters> params_;
    std::shared_ptr<const Vocabulary> vocab_;
    SessionStore sessions_;
    std::unique_ptr<httplib::Server> server_;
};

/// {"tokens": [...], "ids": [...], "types": [...], "positions": [...], "turns": [...]}
std::string context_json(const AssembledSequence& seq, const std::vector<Turn>& turns, const Vocabulary& vocab);

}  // namespace turnlm
