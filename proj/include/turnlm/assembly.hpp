#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "turnlm/corpus.hpp"

namespace turnlm {

/// One tokenized turn; token_ids always end with exactly one EOS.
struct Segment {
    Speaker speaker = Speaker::User;
    std::vector<TokenId> token_ids;
};

struct SegmentSpan {
    std::size_t start = 0;
    std::size_t end = 0;  // exclusive
    Speaker speaker = Speaker::User;

    std::size_t size() const noexcept { return end - start; }
    bool operator==(const SegmentSpan&) const = default;
};

/// Concatenated segments with the parallel token-type and position vectors
/// the embedding stack consumes.
struct AssembledSequence {
    std::vector<TokenId> token_ids;
    std::vector<std::uint8_t> token_types;
    std::vector<std::int32_t> positions;
    std::vector<SegmentSpan> spans;

    std::size_t size() const noexcept { return token_ids.size(); }
    bool empty() const noexcept { return token_ids.empty(); }
    bool operator==(const AssembledSequence&) const = default;
};

/// Teacher-forced instance: logits at position i predict token i + 1, and
/// loss_mask[i] == 1 exactly when token i + 1 lies in [target_start, target_end).
struct TrainingInstance {
    AssembledSequence input;
    std::vector<std::uint8_t> loss_mask;
    std::size_t target_start = 0;
    std::size_t target_end = 0;

    std::size_t target_length() const noexcept { return target_end - target_start; }
    /// targets[i] = input.token_ids[i + 1], PAD at the last position.
    std::vector<TokenId> next_token_targets() const;
};

std::vector<Segment> segment_conversation(const Conversation& conv, const Vocabulary& vocab);

/// Throws ContractError unless segments are non-empty, USER-first and alternating.
AssembledSequence assemble(std::span<const Segment> segments);

/// Token types rebuilt from the span list alone.
std::vector<std::uint8_t> types_from_spans(std::span<const SegmentSpan> spans);

/// One instance per bot turn j, over segments 1..2j. When max_len > 0 each
/// instance is passed through truncate_instance.
std::vector<TrainingInstance> make_training_instances(const Conversation& conv, const Vocabulary& vocab,
                                                      std::size_t max_len = 0);

/// Drops leading (USER, BOT) segment pairs until size() <= max_len and
/// renumbers positions from 0. The final segment (odd segment count) or
/// final pair (even count) is never dropped; ContractError if that tail
/// alone exceeds max_len.
AssembledSequence truncate_context(const AssembledSequence& seq, std::size_t max_len);

TrainingInstance truncate_instance(const TrainingInstance& inst, std::size_t max_len);

/// {"ids": [...], "types": [...], "mask": [...], "target": [start, end]}
std::string instance_to_json(const TrainingInstance& inst);

}  // namespace turnlm
