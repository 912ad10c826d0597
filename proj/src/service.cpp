#include "turnlm/service.hpp"

#include <charconv>
#include <cstdlib>
#include <random>

#include "httplib.h"
#include "json.hpp"

#include "turnlm/checkpoint.hpp"
#include "turnlm/errors.hpp"
#include "turnlm/keyvalue.hpp"

namespace turnlm {

namespace {

using nlohmann::json;

HttpResponse error_response(int status, const std::string& msg) { return {status, json{{"error", msg}}.dump()}; }

}  // namespace

ServiceConfig ServiceConfig::from(const KeyValueConfig& kv) {
    ServiceConfig c;
    c.host = kv.get_string("host", c.host);
    c.port = static_cast<int>(kv.get_int("port", c.port));
    if (const char* env = std::getenv("TURNLM_PORT"); env && *env) {
        const std::string_view text(env);
        auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), c.port);
        if (ec != std::errc() || ptr != text.data() + text.size())
            throw ParseError("TURNLM_PORT is not a port number: " + std::string(text));
    }
    c.checkpoint = kv.get_string("checkpoint", "");
    c.vocab = kv.get_string("vocab", "");
    if (c.vocab.empty() && !c.checkpoint.empty()) c.vocab = c.checkpoint.string() + ".vocab";
    c.decode = decode_config_from(kv);
    c.max_sessions = static_cast<std::size_t>(kv.get_int("max_sessions", static_cast<long long>(c.max_sessions)));
    c.idle_timeout = std::chrono::seconds(kv.get_int("session_timeout_seconds", c.idle_timeout.count()));
    c.cors_origin = kv.get_string("cors_origin", c.cors_origin);
    if (c.port < 0 || c.port > 65535) throw ContractError("port out of range: " + std::to_string(c.port));
    return c;
}

// ---------------------------------------------------------------------------
// Sessions

SessionStore::SessionStore(std::size_t max_sessions, std::chrono::seconds idle_timeout)
    : max_sessions_(max_sessions), idle_timeout_(idle_timeout) {}

std::string random_session_id() {
    static thread_local std::random_device device;
    static constexpr char kHex[] = "0123456789abcdef";
    std::string id;
    for (int i = 0; i < 4; ++i) {
        std::uint32_t word = device();
        for (int k = 0; k < 8; ++k, word >>= 4) id.push_back(kHex[word & 0xF]);
    }
    return id;
}

std::optional<std::string> SessionStore::create(ChatSession session) {
    evict_idle(SteadyClock::now());
    std::lock_guard lock(mutex_);
    if (sessions_.size() >= max_sessions_) return std::nullopt;
    std::string id;
    do {
        id = random_session_id();
    } while (sessions_.contains(id));
    sessions_.emplace(id, std::make_shared<SessionEntry>(std::move(session)));
    return id;
}

std::shared_ptr<SessionEntry> SessionStore::find(const std::string& id) {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
}

bool SessionStore::erase(const std::string& id) {
    std::lock_guard lock(mutex_);
    return sessions_.erase(id) > 0;
}

std::size_t SessionStore::evict_idle(SteadyClock::time_point now) {
    std::lock_guard lock(mutex_);
    std::size_t evicted = 0;
    for (auto it = sessions_.begin(); it != sessions_.end();) {
        // An in-flight generation keeps the session alive.
        std::unique_lock busy(it->second->busy, std::try_to_lock);
        if (busy.owns_lock() && now - it->second->last_activity > idle_timeout_) {
            busy.unlock();
            it = sessions_.erase(it);
            ++evicted;
        } else {
            ++it;
        }
    }
    return evicted;
}

std::size_t SessionStore::size() const {
    std::lock_guard lock(mutex_);
    return sessions_.size();
}

// ---------------------------------------------------------------------------
// Service

std::string context_json(const AssembledSequence& seq, const std::vector<Turn>& turns, const Vocabulary& vocab) {
    json tokens = json::array();
    for (TokenId id : seq.token_ids) tokens.push_back(vocab.token(id));
    json turn_list = json::array();
    for (const auto& t : turns) turn_list.push_back({{"speaker", to_string(t.speaker)}, {"text", t.text}});
    return json{{"tokens", tokens},
                {"ids", seq.token_ids},
                {"types", seq.token_types},
                {"positions", seq.positions},
                {"turns", turn_list}}
        .dump();
}

ChatService::ChatService(ServiceConfig config, std::shared_ptr<const ModelParameters> params,
                         std::shared_ptr<const Vocabulary> vocab)
    : config_(std::move(config)),
      params_(std::move(params)),
      vocab_(std::move(vocab)),
      sessions_(config_.max_sessions, config_.idle_timeout),
      server_(std::make_unique<httplib::Server>()) {
    if (!params_ || !vocab_) throw ContractError("ChatService needs a model and a vocabulary");
    if (vocab_->size() != params_->config.vocab_size) throw ContractError("vocabulary does not match checkpoint");

    auto adapt = [this](const char* method) {
        return [this, method](const httplib::Request& req, httplib::Response& res) {
            const auto out = handle(method, req.path, req.body);
            res.status = out.status;
            if (!out.body.empty()) res.set_content(out.body, "application/json");
        };
    };
    server_->set_default_headers({{"Access-Control-Allow-Origin", config_.cors_origin},
                                  {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                                  {"Access-Control-Allow-Headers", "Content-Type"}});
    server_->Get(R"(/.*)", adapt("GET"));
    server_->Post(R"(/.*)", adapt("POST"));
    server_->Delete(R"(/.*)", adapt("DELETE"));
    server_->Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
}

ChatService::~ChatService() = default;

std::unique_ptr<ChatService> ChatService::from_config(ServiceConfig config) {
    auto params = std::make_shared<const ModelParameters>(load_checkpoint(config.checkpoint));
    auto vocab = std::make_shared<const Vocabulary>(Vocabulary::load(config.vocab));
    return std::make_unique<ChatService>(std::move(config), std::move(params), std::move(vocab));
}

HttpResponse ChatService::handle(const std::string& method, const std::string& path, const std::string& body) {
    static const std::string kSessionPrefix = "/session/";
    static const std::string kContextSuffix = "/context";
    try {
        if (method == "GET" && path == "/health") return health();
        if (method == "POST" && path == "/session") return create_session();
        if (method == "POST" && path == "/chat") return chat(body);
        if (path.starts_with(kSessionPrefix)) {
            std::string rest = path.substr(kSessionPrefix.size());
            if (method == "GET" && rest.ends_with(kContextSuffix))
                return context(rest.substr(0, rest.size() - kContextSuffix.size()));
            if (method == "DELETE" && rest.find('/') == std::string::npos) return delete_session(rest);
        }
        return error_response(404, "no route for " + method + " " + path);
    } catch (const CapacityError& e) {
        return error_response(413, e.what());
    } catch (const std::exception& e) {
        return error_response(500, e.what());
    }
}

HttpResponse ChatService::create_session() {
    auto id = sessions_.create(ChatSession(params_, vocab_, config_.decode));
    if (!id) return error_response(503, "session capacity exceeded");
    return {200, json{{"session_id", *id}}.dump()};
}

HttpResponse ChatService::chat(const std::string& body) {
    json req;
    try {
        req = json::parse(body);
    } catch (const json::parse_error& e) {
        return error_response(400, std::string("malformed body: ") + e.what());
    }
    if (!req.is_object() || !req.contains("session_id") || !req["session_id"].is_string() ||
        !req.contains("utterance") || !req["utterance"].is_string())
        return error_response(400, "body needs string fields session_id and utterance");
    const auto utterance = req["utterance"].get<std::string>();

    auto entry = sessions_.find(req["session_id"].get<std::string>());
    if (!entry) return error_response(404, "unknown session");
    if (tokenize(utterance).empty()) return error_response(400, "empty utterance");

    std::unique_lock busy(entry->busy, std::try_to_lock);
    if (!busy.owns_lock()) return error_response(409, "generation already in flight for this session");
    const auto reply = entry->session.generate_reply(utterance);
    entry->last_activity = SteadyClock::now();
    return {200, json{{"reply", reply.text}, {"turn_index", entry->session.exchanges()}}.dump()};
}

HttpResponse ChatService::context(const std::string& id) {
    auto entry = sessions_.find(id);
    if (!entry) return error_response(404, "unknown session");
    std::lock_guard busy(entry->busy);
    entry->last_activity = SteadyClock::now();
    return {200, context_json(entry->session.context_view(), entry->session.history(), *vocab_)};
}

HttpResponse ChatService::delete_session(const std::string& id) {
    if (!sessions_.erase(id)) return error_response(404, "unknown session");
    return {204, ""};
}

HttpResponse ChatService::health() const {
    return {200, json{{"status", "ok"}, {"checkpoint", config_.checkpoint.string()}}.dump()};
}

int ChatService::bind() {
    if (config_.port == 0) return server_->bind_to_any_port(config_.host);
    if (!server_->bind_to_port(config_.host, config_.port))
        throw std::runtime_error("cannot bind " + config_.host + ":" + std::to_string(config_.port));
    return config_.port;
}

void ChatService::listen() { server_->listen_after_bind(); }

void ChatService::stop() { server_->stop(); }

}  // namespace turnlm
