#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "turnlm/assembly.hpp"
#include "turnlm/model.hpp"

namespace turnlm {

class KeyValueConfig;

enum class DecodeMode { Greedy, Sample };

struct DecodeConfig {
    DecodeMode mode = DecodeMode::Greedy;
    double temperature = 1.0;
    std::size_t top_k = 0;  // 0: no restriction
    std::size_t max_new_tokens = 32;
    std::uint64_t seed = 0;
};

/// Reads decode.mode (greedy|sample), decode.temperature, decode.top_k,
/// decode.max_new_tokens, decode.seed.
DecodeConfig decode_config_from(const KeyValueConfig& kv, DecodeConfig defaults = {});

/// Picks the next token from one logit row. PAD and UNK are never chosen.
/// Greedy ties resolve to the lowest id; top_k == 1 sampling equals greedy.
TokenId step_logits_to_token(const Vector& logits, DecodeMode mode, double temperature, std::size_t top_k,
                             std::mt19937_64& rng);

struct Reply {
    std::string text;
    std::vector<TokenId> ids;   // generated tokens, EOS excluded
    AssembledSequence prompt;   // model input before the first generated token
};

/// Decodes a reply to `context`, whose last turn must be a user turn.
/// Prior turns are used verbatim (ground-truth history).
Reply generate_from_context(const ModelParameters& params, const Vocabulary& vocab, const Conversation& context,
                            const DecodeConfig& config, std::mt19937_64& rng);

/// One conversation against an immutable parameter snapshot. Not thread safe;
/// run many sessions concurrently over the same snapshot instead.
class ChatSession {
public:
    ChatSession(std::shared_ptr<const ModelParameters> params, std::shared_ptr<const Vocabulary> vocab,
                DecodeConfig config = {});

    /// Appends the user turn, decodes a bot reply with type-1 tokens at the
    /// next positions, and appends the reply to the history. ContractError
    /// for a blank utterance, CapacityError when the utterance alone does not
    /// fit the position table.
    Reply generate_reply(std::string_view user_text);

    const std::vector<Turn>& history() const noexcept { return history_.turns; }
    std::size_t exchanges() const noexcept { return history_.turns.size() / 2; }

    /// assemble(segment_conversation(history)); empty before the first exchange.
    AssembledSequence context_view() const;

    void reset();
    const DecodeConfig& config() const noexcept { return config_; }

private:
    std::shared_ptr<const ModelParameters> params_;
    std::shared_ptr<const Vocabulary> vocab_;
    DecodeConfig config_;
    Conversation history_;
    std::mt19937_64 rng_;
};

}  // namespace turnlm
