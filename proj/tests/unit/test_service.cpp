#include <set>
#include <thread>

#include "doctest.h"

#include "testing.hpp"
#include "turnlm/service.hpp"

#include "httplib.h"
#include "json.hpp"

using namespace turnlm;
using nlohmann::json;

namespace {

std::unique_ptr<ChatService> make_service(std::size_t max_sessions = 8, std::chrono::seconds timeout = std::chrono::seconds(1800)) {
    auto vocab = std::make_shared<const Vocabulary>(Vocabulary(testing::word_pool(20)));
    auto cfg = testing::tiny_config(vocab->size());
    cfg.max_positions = 64;
    auto p = init_parameters(cfg, 3);
    testing::randomize(p, 4, 0.5);
    ServiceConfig sc;
    sc.checkpoint = "in-memory.ckpt";
    sc.port = 0;
    sc.max_sessions = max_sessions;
    sc.idle_timeout = timeout;
    sc.decode.max_new_tokens = 8;
    return std::make_unique<ChatService>(sc, std::make_shared<const ModelParameters>(std::move(p)), vocab);
}

std::string new_session(ChatService& s) {
    const auto r = s.handle("POST", "/session", "");
    REQUIRE(r.status == 200);
    return json::parse(r.body).at("session_id").get<std::string>();
}

std::string chat_body(const std::string& id, const std::string& text) {
    return json{{"session_id", id}, {"utterance", text}}.dump();
}

}  // namespace

TEST_CASE("session ids are 32 random hex characters") {
    std::set<std::string> ids;
    for (int i = 0; i < 200; ++i) {
        const auto id = random_session_id();
        CHECK(id.size() == 32);
        CHECK(id.find_first_not_of("0123456789abcdef") == std::string::npos);
        ids.insert(id);
    }
    CHECK(ids.size() == 200);
}

TEST_CASE("health reports the checkpoint") {
    auto s = make_service();
    const auto r = s->handle("GET", "/health", "");
    CHECK(r.status == 200);
    const auto j = json::parse(r.body);
    CHECK(j["status"] == "ok");
    CHECK(j["checkpoint"] == "in-memory.ckpt");
}

TEST_CASE("happy path: create, chat, context, delete") {
    auto s = make_service();
    const auto id = new_session(*s);

    const auto empty_ctx = s->handle("GET", "/session/" + id + "/context", "");
    CHECK(empty_ctx.status == 200);
    CHECK(json::parse(empty_ctx.body)["types"].empty());

    const auto first = s->handle("POST", "/chat", chat_body(id, "w1 w2"));
    REQUIRE(first.status == 200);
    const auto fj = json::parse(first.body);
    CHECK(fj["turn_index"] == 1);
    CHECK(fj.contains("reply"));
    CHECK(json::parse(s->handle("POST", "/chat", chat_body(id, "w3")).body)["turn_index"] == 2);

    const auto ctx = s->handle("GET", "/session/" + id + "/context", "");
    REQUIRE(ctx.status == 200);
    const auto cj = json::parse(ctx.body);
    const auto entry = s->sessions().find(id);
    const auto expected = assemble(segment_conversation(Conversation{"x", entry->session.history()},
                                                         Vocabulary(testing::word_pool(20))));
    CHECK(cj["types"].get<std::vector<int>>() == std::vector<int>(expected.token_types.begin(), expected.token_types.end()));
    CHECK(cj["positions"].get<std::vector<int>>() == std::vector<int>(expected.positions.begin(), expected.positions.end()));
    CHECK(cj["ids"].get<std::vector<int>>() == std::vector<int>(expected.token_ids.begin(), expected.token_ids.end()));
    CHECK(cj["tokens"].size() == expected.size());
    CHECK(cj["turns"].size() == 4);
    const auto types = cj["types"].get<std::vector<int>>();
    CHECK(std::count(types.begin(), types.end(), 0) > 0);
    CHECK(std::count(types.begin(), types.end(), 1) > 0);

    const auto del = s->handle("DELETE", "/session/" + id, "");
    CHECK(del.status == 204);
    CHECK(del.body.empty());
    CHECK(s->handle("DELETE", "/session/" + id, "").status == 404);
    CHECK(s->handle("GET", "/session/" + id + "/context", "").status == 404);
}

TEST_CASE("chat error statuses") {
    auto s = make_service();
    const auto id = new_session(*s);
    auto error_of = [](const HttpResponse& r) { return json::parse(r.body).at("error").get<std::string>(); };

    const auto unknown = s->handle("POST", "/chat", chat_body("nope", "hello"));
    CHECK(unknown.status == 404);
    CHECK_FALSE(error_of(unknown).empty());
    CHECK(s->handle("POST", "/chat", chat_body(id, "   ")).status == 400);
    CHECK(s->handle("POST", "/chat", "{not json").status == 400);
    CHECK(s->handle("POST", "/chat", R"({"session_id": 5, "utterance": "x"})").status == 400);
    CHECK(s->handle("POST", "/chat", R"(["x"])").status == 400);
    CHECK(s->handle("GET", "/nothing", "").status == 404);

    std::string many;
    for (int i = 0; i < 80; ++i) many += "w1 ";
    CHECK(s->handle("POST", "/chat", chat_body(id, many)).status == 413);

    auto entry = s->sessions().find(id);
    {
        std::lock_guard busy(entry->busy);
        const auto r = s->handle("POST", "/chat", chat_body(id, "hello"));
        CHECK(r.status == 409);
    }
    CHECK(s->handle("POST", "/chat", chat_body(id, "w2")).status == 200);
}

TEST_CASE("session capacity and idle eviction") {
    auto s = make_service(2);
    new_session(*s);
    new_session(*s);
    CHECK(s->handle("POST", "/session", "").status == 503);

    SessionStore store(4, std::chrono::seconds(10));
    auto vocab = std::make_shared<const Vocabulary>(Vocabulary(testing::word_pool(20)));
    auto params = std::make_shared<const ModelParameters>(init_parameters(testing::tiny_config(vocab->size()), 1));
    const auto a = store.create(ChatSession(params, vocab));
    const auto b = store.create(ChatSession(params, vocab));
    REQUIRE(a);
    REQUIRE(b);
    store.find(*b)->last_activity = SteadyClock::now() + std::chrono::seconds(30);
    CHECK(store.evict_idle(SteadyClock::now() + std::chrono::seconds(20)) == 1);
    CHECK(store.find(*a) == nullptr);
    CHECK(store.find(*b) != nullptr);
    {
        auto entry = store.find(*b);
        std::lock_guard busy(entry->busy);
        CHECK(store.evict_idle(SteadyClock::now() + std::chrono::hours(1)) == 0);
    }
    CHECK(store.evict_idle(SteadyClock::now() + std::chrono::hours(1)) == 1);
    CHECK(store.size() == 0);
}

TEST_CASE("greedy replies are reproducible across service instances") {
    auto a = make_service();
    auto b = make_service();
    const auto ia = new_session(*a);
    const auto ib = new_session(*b);
    for (const char* text : {"w1 w2", "w5", "w7 w7 w3"})
        CHECK(a->handle("POST", "/chat", chat_body(ia, text)).body == b->handle("POST", "/chat", chat_body(ib, text)).body);
}

TEST_CASE("http server round trip with concurrent sessions") {
    auto s = make_service();
    const int port = s->bind();
    REQUIRE(port > 0);
    std::thread server([&] { s->listen(); });

    httplib::Client client("127.0.0.1", port);
    client.set_read_timeout(10, 0);
    auto health = client.Get("/health");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");

    auto preflight = client.Options("/chat");
    REQUIRE(preflight);
    CHECK(preflight->status == 204);

    std::vector<std::thread> workers;
    std::vector<int> statuses(4, 0);
    for (int w = 0; w < 4; ++w) {
        workers.emplace_back([&, w] {
            httplib::Client c("127.0.0.1", port);
            auto created = c.Post("/session", "", "application/json");
            if (!created || created->status != 200) return;
            const auto id = json::parse(created->body)["session_id"].get<std::string>();
            auto r = c.Post("/chat", chat_body(id, "w" + std::to_string(w + 1)), "application/json");
            auto ctx = c.Get("/session/" + id + "/context");
            auto del = c.Delete("/session/" + id);
            if (r && ctx && del && ctx->status == 200) statuses[static_cast<std::size_t>(w)] = r->status * 1000 + del->status;
        });
    }
    for (auto& t : workers) t.join();
    for (int st : statuses) CHECK(st == 200 * 1000 + 204);

    auto bad = client.Post("/chat", "{", "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 400);
    CHECK(json::parse(bad->body).contains("error"));

    s->stop();
    server.join();
}
