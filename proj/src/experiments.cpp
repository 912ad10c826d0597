#include "turnlm/experiments.hpp"

#include <algorithm>
#include <future>
#include <random>

#include "json.hpp"

#include "turnlm/errors.hpp"
#include "turnlm/keyvalue.hpp"

namespace turnlm {

void SyntheticSpec::validate() const {
    if (turns_per_conversation < 3 || turns_per_conversation % 2 == 0)
        throw ContractError("turns_per_conversation must be odd and at least 3");
    if (vocab_symbols < 4) throw ContractError("vocab_symbols must be at least 4");
    if (num_conversations == 0) throw ContractError("num_conversations must be positive");
}

SyntheticSpec synthetic_spec_from(const KeyValueConfig& kv) {
    SyntheticSpec s;
    s.num_conversations = static_cast<std::size_t>(
        kv.get_int("synthetic.num_conversations", static_cast<long long>(s.num_conversations)));
    s.turns_per_conversation = static_cast<std::size_t>(
        kv.get_int("synthetic.turns_per_conversation", static_cast<long long>(s.turns_per_conversation)));
    s.vocab_symbols =
        static_cast<std::size_t>(kv.get_int("synthetic.vocab_symbols", static_cast<long long>(s.vocab_symbols)));
    s.seed = static_cast<std::uint64_t>(kv.get_int("synthetic.seed", 0));
    const auto rule = kv.get_string("synthetic.rule", "role_echo");
    if (rule != "role_echo") throw ParseError("unknown synthetic.rule '" + rule + "'");
    s.validate();
    return s;
}

std::string synthetic_symbol(std::size_t index) { return "s" + std::to_string(index); }

std::vector<Conversation> generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_int_distribution<std::size_t> length(3, 6);
    std::uniform_int_distribution<std::size_t> symbol(0, spec.vocab_symbols - 1);

    std::vector<Conversation> convs;
    convs.reserve(spec.num_conversations);
    for (std::size_t c = 0; c < spec.num_conversations; ++c) {
        Conversation conv;
        conv.id = "role_echo-" + std::to_string(c);
        std::vector<std::string> last_user;
        for (std::size_t t = 0; t < spec.turns_per_conversation; ++t) {
            std::string text;
            if (t % 2 == 0) {
                last_user.assign(length(rng), "");
                for (auto& s : last_user) s = synthetic_symbol(symbol(rng));
                for (const auto& s : last_user) text += (text.empty() ? "" : " ") + s;
                conv.turns.push_back(Turn{Speaker::User, text});
            } else {
                for (auto it = last_user.rbegin(); it != last_user.rend(); ++it) text += (text.empty() ? "" : " ") + *it;
                text += " ";
                text += kRoleEchoMarker;
                conv.turns.push_back(Turn{Speaker::Bot, text});
            }
        }
        convs.push_back(std::move(conv));
    }
    return convs;
}

double SeedResult::relative_improvement() const {
    return (without_types.validation_perplexity - with_types.validation_perplexity) / without_types.validation_perplexity;
}

std::vector<std::string> AblationResult::to_json_lines() const {
    std::vector<std::string> lines;
    auto arm_json = [](std::uint64_t seed, const char* arm, const ArmResult& r) {
        return nlohmann::json{{"seed", seed},
                              {"arm", arm},
                              {"initial_loss", r.initial_loss},
                              {"final_train_loss", r.final_train_loss},
                              {"validation_perplexity", r.validation_perplexity}}
            .dump();
    };
    std::vector<std::uint64_t> seeds;
    for (const auto& run : runs) {
        lines.push_back(arm_json(run.seed, "with_types", run.with_types));
        lines.push_back(arm_json(run.seed, "without_types", run.without_types));
        seeds.push_back(run.seed);
    }
    lines.push_back(nlohmann::json{{"summary", true},
                                   {"seeds", seeds},
                                   {"mean_delta", mean_delta},
                                   {"mean_relative_improvement", mean_relative_improvement},
                                   {"type_embedding_init", "zero"}}
                        .dump());
    return lines;
}

ArmResult run_ablation_arm(const DatasetSplit& split, const Vocabulary& vocab, const ModelConfig& model,
                           const TrainConfig& train_cfg, std::uint64_t seed, bool with_types) {
    ModelConfig cfg = model;
    cfg.vocab_size = vocab.size();
    cfg.token_types = with_types;
    cfg.lora_enabled = false;
    InitOptions init;
    init.zero_type_embeddings = true;
    ModelParameters params = init_parameters(cfg, seed, init);

    TrainConfig tc = train_cfg;
    tc.seed = seed;
    const char* arm = with_types ? "with_types" : "without_types";
    try {
        const auto report = train(params, split.train, {}, vocab, tc);
        ArmResult r;
        r.initial_loss = report.steps.front().loss;
        r.final_train_loss = report.epochs.back().train_loss;
        r.validation_perplexity = evaluate_perplexity(params, split.validation, vocab, tc.max_len);
        return r;
    } catch (const NumericError& e) {
        throw NumericError(std::string("ablation arm ") + arm + ", seed " + std::to_string(seed) + ": " + e.what());
    }
}

AblationResult run_ablation(const SyntheticSpec& spec, const ModelConfig& model, const TrainConfig& train_cfg,
                            std::span<const std::uint64_t> seeds, bool parallel) {
    if (seeds.size() < 3) throw ContractError("run_ablation needs at least 3 seeds");
    const auto corpus = generate_synthetic(spec);
    const auto split = split_dataset(corpus, spec.seed);
    const auto vocab = Vocabulary::build(corpus, 1, 1u << 20);

    AblationResult result;
    std::vector<std::future<ArmResult>> with_runs;
    std::vector<std::future<ArmResult>> without_runs;
    const auto policy = parallel ? std::launch::async : std::launch::deferred;
    for (auto seed : seeds) {
        with_runs.push_back(std::async(policy, [&, seed] { return run_ablation_arm(split, vocab, model, train_cfg, seed, true); }));
        without_runs.push_back(
            std::async(policy, [&, seed] { return run_ablation_arm(split, vocab, model, train_cfg, seed, false); }));
    }
    double delta = 0.0;
    double relative = 0.0;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        SeedResult run;
        run.seed = seeds[i];
        run.with_types = with_runs[i].get();
        run.without_types = without_runs[i].get();
        delta += run.without_types.validation_perplexity - run.with_types.validation_perplexity;
        relative += run.relative_improvement();
        result.runs.push_back(run);
    }
    result.mean_delta = delta / static_cast<double>(seeds.size());
    result.mean_relative_improvement = relative / static_cast<double>(seeds.size());
    return result;
}

}  // namespace turnlm
