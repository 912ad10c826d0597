#include <algorithm>
#include <map>

#include "doctest.h"

#include "testing.hpp"
#include "turnlm/errors.hpp"
#include "turnlm/experiments.hpp"

using namespace turnlm;

namespace {

SyntheticSpec small_spec(std::size_t n = 30) {
    SyntheticSpec s;
    s.num_conversations = n;
    s.turns_per_conversation = 5;
    s.vocab_symbols = 8;
    s.seed = 4;
    return s;
}

}  // namespace

TEST_CASE("role_echo bot turns reverse the user turn and append the marker") {
    const auto convs = generate_synthetic(small_spec(50));
    REQUIRE(convs.size() == 50);
    std::size_t bots = 0;
    std::size_t markers = 0;
    for (const auto& c : convs) {
        REQUIRE(c.turns.size() == 5);
        CHECK(normalize_turns(c.turns) == c.turns);
        for (std::size_t t = 0; t < c.turns.size(); ++t) {
            const auto words = tokenize(c.turns[t].text);
            markers += static_cast<std::size_t>(std::count(words.begin(), words.end(), std::string(kRoleEchoMarker)));
            if (t % 2 == 0) {
                CHECK(words.size() >= 3);
                CHECK(words.size() <= 6);
                continue;
            }
            ++bots;
            auto expected = tokenize(c.turns[t - 1].text);
            std::reverse(expected.begin(), expected.end());
            expected.emplace_back(kRoleEchoMarker);
            CHECK(words == expected);
        }
    }
    CHECK(markers == bots);
    CHECK(generate_synthetic(small_spec(50)) == convs);
    auto other = small_spec(50);
    other.seed = 5;
    CHECK(generate_synthetic(other) != convs);
}

TEST_CASE("synthetic spec validation") {
    auto s = small_spec();
    s.turns_per_conversation = 4;
    CHECK_THROWS_AS(s.validate(), ContractError);
    s = small_spec();
    s.turns_per_conversation = 1;
    CHECK_THROWS_AS(s.validate(), ContractError);
    s = small_spec();
    s.vocab_symbols = 3;
    CHECK_THROWS_AS(s.validate(), ContractError);
}

TEST_CASE("ablation arms share step 0 and the no-type arm ignores T") {
    const auto corpus = generate_synthetic(small_spec(30));
    const auto split = split_dataset(corpus, 1);
    const auto vocab = Vocabulary::build(corpus, 1, 1000);
    auto cfg = testing::tiny_config(vocab.size(), 16, 1, 2);
    cfg.max_positions = 64;
    TrainConfig tc;
    tc.epochs = 1;
    tc.max_steps = 3;
    tc.base_lr = 1e-2;

    const auto with = run_ablation_arm(split, vocab, cfg, tc, 7, true);
    const auto without = run_ablation_arm(split, vocab, cfg, tc, 7, false);
    CHECK(with.initial_loss == without.initial_loss);
    CHECK(with.validation_perplexity != without.validation_perplexity);

    auto no_types = cfg;
    no_types.token_types = false;
    auto p = init_parameters(no_types, 7, {0.02, true});
    TrainConfig longer = tc;
    longer.max_steps = 5;
    train(p, split.train, {}, vocab, longer);
    CHECK(p.embeddings.type.isZero(0.0));
    std::mt19937_64 rng(3);
    for (const auto& inst : instances_for(split.validation, vocab, 0)) {
        auto shuffled = inst;
        std::shuffle(shuffled.input.token_types.begin(), shuffled.input.token_types.end(), rng);
        CHECK(testing::instance_loss(p, inst, {}) == testing::instance_loss(p, shuffled, {}));
    }
}

TEST_CASE("run_ablation contract and report") {
    auto cfg = testing::tiny_config(3, 8, 1, 2);
    cfg.max_positions = 64;
    TrainConfig tc;
    tc.epochs = 1;
    tc.max_steps = 2;
    const auto spec = small_spec(20);
    const std::vector<std::uint64_t> two{1, 2};
    CHECK_THROWS_AS(run_ablation(spec, cfg, tc, two), ContractError);

    const std::vector<std::uint64_t> three{1, 2, 3};
    const auto a = run_ablation(spec, cfg, tc, three, true);
    const auto b = run_ablation(spec, cfg, tc, three, false);
    REQUIRE(a.runs.size() == 3);
    const auto lines = a.to_json_lines();
    CHECK(lines.size() == 7);
    CHECK(lines == b.to_json_lines());
    double delta = 0.0;
    for (const auto& r : a.runs) delta += r.without_types.validation_perplexity - r.with_types.validation_perplexity;
    CHECK(a.mean_delta == doctest::Approx(delta / 3.0));
    CHECK(lines.back().find("\"summary\":true") != std::string::npos);
}
