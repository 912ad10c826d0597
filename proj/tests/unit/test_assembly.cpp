#include <numeric>

#include "doctest.h"

#include "json.hpp"

#include "testing.hpp"
#include "turnlm/assembly.hpp"
#include "turnlm/errors.hpp"

using namespace turnlm;

namespace {

Segment seg(Speaker s, std::size_t n) {
    Segment out{s, std::vector<TokenId>(n - 1, 3)};
    out.token_ids.push_back(Vocabulary::kEos);
    return out;
}

Conversation conv(std::initializer_list<const char*> texts) {
    Conversation c{"t", {}};
    std::size_t i = 0;
    for (const char* t : texts) c.turns.push_back(Turn{i++ % 2 == 0 ? Speaker::User : Speaker::Bot, t});
    return c;
}

const Vocabulary kVocab({"u1", "b1", "u2", "b2", "u3", "hi", "a", "b", "c"});

}  // namespace

TEST_CASE("segment_conversation follows the parity rule and frames with EOS") {
    const auto segs = segment_conversation(conv({"u1", "b1", "u2", "b2", "u3"}), kVocab);
    REQUIRE(segs.size() == 5);
    for (std::size_t k = 1; k <= segs.size(); ++k)
        CHECK(segs[k - 1].speaker == (k % 2 == 0 ? Speaker::Bot : Speaker::User));

    const auto hi = segment_conversation(conv({"hi"}), kVocab);
    REQUIRE(hi.size() == 1);
    CHECK(hi[0].speaker == Speaker::User);
    CHECK(hi[0].token_ids == std::vector<TokenId>{kVocab.id_of("hi"), Vocabulary::kEos});
}

TEST_CASE("segment of an unencodable turn is [UNK, EOS]") {
    Conversation c{"t", {Turn{Speaker::User, "a"}, Turn{Speaker::Bot, "\xE3\x80\x80"}}};
    const auto segs = segment_conversation(c, kVocab);
    CHECK(segs[1].token_ids == std::vector<TokenId>{Vocabulary::kUnk, Vocabulary::kEos});
}

TEST_CASE("segment_conversation rejects unnormalized input") {
    Conversation c{"t", {Turn{Speaker::Bot, "a"}}};
    CHECK_THROWS_AS(segment_conversation(c, kVocab), ContractError);
}

TEST_CASE("assemble examples") {
    const std::vector<Segment> s{seg(Speaker::User, 3), seg(Speaker::Bot, 2), seg(Speaker::User, 2)};
    const auto a = assemble(s);
    CHECK(a.token_types == std::vector<std::uint8_t>{0, 0, 0, 1, 1, 0, 0});
    CHECK(a.positions == std::vector<std::int32_t>{0, 1, 2, 3, 4, 5, 6});

    const std::vector<Segment> one{seg(Speaker::User, 4)};
    CHECK(assemble(one).token_types == std::vector<std::uint8_t>{0, 0, 0, 0});

    const std::vector<Segment> pair{seg(Speaker::User, 1), seg(Speaker::Bot, 1)};
    CHECK(assemble(pair).spans ==
          std::vector<SegmentSpan>{{0, 1, Speaker::User}, {1, 2, Speaker::Bot}});
}

TEST_CASE("assemble rejects empty and non-alternating input") {
    CHECK_THROWS_AS(assemble(std::vector<Segment>{}), ContractError);
    CHECK_THROWS_AS(assemble(std::vector<Segment>{seg(Speaker::Bot, 2)}), ContractError);
    CHECK_THROWS_AS(assemble(std::vector<Segment>{seg(Speaker::User, 2), seg(Speaker::User, 2)}), ContractError);
}

TEST_CASE("make_training_instances examples") {
    const auto c = conv({"u1", "b1", "u2", "b2", "u3"});
    const auto inst = make_training_instances(c, kVocab);
    REQUIRE(inst.size() == 2);
    const auto segs = segment_conversation(c, kVocab);
    CHECK(inst[0].input == assemble(std::span(segs).first(2)));
    CHECK(inst[1].input == assemble(std::span(segs).first(4)));

    const auto abc = conv({"a b c", "a"});
    const auto one = make_training_instances(abc, kVocab);
    REQUIRE(one.size() == 1);
    CHECK(std::accumulate(one[0].loss_mask.begin(), one[0].loss_mask.end(), 0) == 2);
    CHECK(one[0].target_start == 4);
    CHECK(one[0].target_end == 6);
    CHECK(one[0].loss_mask == std::vector<std::uint8_t>{0, 0, 0, 1, 1, 0});
    CHECK(one[0].next_token_targets() ==
          std::vector<TokenId>{kVocab.id_of("b"), kVocab.id_of("c"), Vocabulary::kEos, kVocab.id_of("a"),
                               Vocabulary::kEos, Vocabulary::kPad});

    CHECK(make_training_instances(conv({"u1"}), kVocab).empty());
}

TEST_CASE("truncate_context examples") {
    const std::vector<Segment> ten{seg(Speaker::User, 5), seg(Speaker::Bot, 5)};
    const auto a = assemble(ten);
    CHECK(truncate_context(a, 16) == a);

    const std::vector<Segment> three{seg(Speaker::User, 4), seg(Speaker::Bot, 4), seg(Speaker::User, 4)};
    const auto t = truncate_context(assemble(three), 8);
    CHECK(t.size() == 4);
    CHECK(t.positions == std::vector<std::int32_t>{0, 1, 2, 3});
    CHECK(t.spans.front().speaker == Speaker::User);
}

TEST_CASE("truncate_context names the oversized tail") {
    const std::vector<Segment> s{seg(Speaker::User, 2), seg(Speaker::Bot, 2), seg(Speaker::User, 6)};
    try {
        truncate_context(assemble(s), 5);
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        CHECK(std::string(e.what()).find("6") != std::string::npos);
    }
    const std::vector<Segment> even{seg(Speaker::User, 3), seg(Speaker::Bot, 3)};
    CHECK_THROWS_AS(truncate_context(assemble(even), 5), ContractError);
}

TEST_CASE("truncated instances keep the whole target and a consistent mask") {
    const auto c = conv({"a b c", "a", "b b", "c c c", "a"});
    const auto inst = make_training_instances(c, kVocab, 8);
    REQUIRE(inst.size() == 2);
    const auto& last = inst[1];
    CHECK(last.input.size() == 7);
    CHECK(last.target_length() == 4);
    CHECK(last.input.spans.front().speaker == Speaker::User);
    CHECK(std::accumulate(last.loss_mask.begin(), last.loss_mask.end(), 0) == 4);
    for (std::size_t i = last.target_start; i < last.target_end; ++i) CHECK(last.input.token_types[i] == 1);
}

TEST_CASE("instance_to_json layout") {
    const auto inst = make_training_instances(conv({"a", "b"}), kVocab).front();
    const auto j = nlohmann::json::parse(instance_to_json(inst));
    CHECK(j["ids"].get<std::vector<int>>() == std::vector<int>{kVocab.id_of("a"), 2, kVocab.id_of("b"), 2});
    CHECK(j["types"].get<std::vector<int>>() == std::vector<int>{0, 0, 1, 1});
    CHECK(j["mask"].get<std::vector<int>>() == std::vector<int>{0, 1, 1, 0});
    CHECK(j["target"].get<std::vector<int>>() == std::vector<int>{2, 4});
}

TEST_CASE("assembly properties over random conversations") {
    std::mt19937_64 rng(77);
    const auto words = testing::word_pool(30);
    const Vocabulary vocab(std::vector<std::string>(words.begin(), words.begin() + 20));
    for (int trial = 0; trial < 300; ++trial) {
        const auto c = testing::random_conversation(rng, words, 9, 6);
        const auto segs = segment_conversation(c, vocab);
        const auto a = assemble(segs);
        CHECK(types_from_spans(a.spans) == a.token_types);
        const auto inst = make_training_instances(c, vocab);
        CHECK(inst.size() == c.bot_turns());
        for (std::size_t j = 0; j < inst.size(); ++j) {
            std::size_t expected = 0;
            for (std::size_t k = 0; k < 2 * (j + 1); ++k) expected += segs[k].token_ids.size();
            CHECK(inst[j].input.size() == expected);
            for (std::size_t i = 0; i < inst[j].loss_mask.size(); ++i)
                if (inst[j].loss_mask[i]) CHECK(inst[j].input.token_types[i + 1] == 1);
        }
        const auto cut = truncate_context(a, std::max<std::size_t>(a.size() / 2, 16));
        std::vector<std::int32_t> expect(cut.size());
        std::iota(expect.begin(), expect.end(), 0);
        CHECK(cut.positions == expect);
        CHECK(types_from_spans(cut.spans) == cut.token_types);
    }
}
