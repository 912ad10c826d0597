#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "turnlm/corpus.hpp"
#include "turnlm/model.hpp"
#include "turnlm/training.hpp"

namespace turnlm {

class KeyValueConfig;

enum class SyntheticRule { RoleEcho };

/// role_echo: user turns are 3-6 uniform random symbols; each bot turn is
/// the preceding user turn reversed, followed by the marker symbol.
struct SyntheticSpec {
    std::size_t num_conversations = 300;
    std::size_t turns_per_conversation = 5;
    std::size_t vocab_symbols = 16;
    std::uint64_t seed = 0;
    SyntheticRule rule = SyntheticRule::RoleEcho;

    void validate() const;
};

/// Reads synthetic.num_conversations, synthetic.turns_per_conversation,
/// synthetic.vocab_symbols, synthetic.seed, synthetic.rule.
SyntheticSpec synthetic_spec_from(const KeyValueConfig& kv);

inline constexpr std::string_view kRoleEchoMarker = "mark";
std::string synthetic_symbol(std::size_t index);

std::vector<Conversation> generate_synthetic(const SyntheticSpec& spec);

struct ArmResult {
    double initial_loss = 0.0;           // first step's batch loss
    double final_train_loss = 0.0;       // last epoch's mean step loss
    double validation_perplexity = 0.0;  // token weighted, eval mode
};

struct SeedResult {
    std::uint64_t seed = 0;
    ArmResult with_types;
    ArmResult without_types;

    /// (ppl_without - ppl_with) / ppl_without
    double relative_improvement() const;
};

struct AblationResult {
    std::vector<SeedResult> runs;
    double mean_delta = 0.0;  // mean of ppl_without - ppl_with
    double mean_relative_improvement = 0.0;

    /// One record per (seed, arm) plus a summary record.
    std::vector<std::string> to_json_lines() const;
};

/// Both arms share the corpus, split, vocabulary, initialization seed,
/// data order and dropout draws; W_t starts at zero in both and only the
/// with-types arm updates it. Arms run on separate threads when parallel.
/// NumericError names the arm and seed of a diverging run.
AblationResult run_ablation(const SyntheticSpec& spec, const ModelConfig& model, const TrainConfig& train,
                            std::span<const std::uint64_t> seeds, bool parallel = true);

/// Trains one arm and reports it; exposed for the step-0 equality check.
ArmResult run_ablation_arm(const DatasetSplit& split, const Vocabulary& vocab, const ModelConfig& model,
                           const TrainConfig& train, std::uint64_t seed, bool with_types);

}  // namespace turnlm
