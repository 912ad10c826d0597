#include "turnlm/assembly.hpp"

#include "json.hpp"

#include "turnlm/errors.hpp"

namespace turnlm {

namespace {

// Segments of the assembled sequence, recovered from its spans.
std::vector<Segment> split_segments(const AssembledSequence& seq) {
    std::vector<Segment> segments;
    segments.reserve(seq.spans.size());
    for (const auto& span : seq.spans)
        segments.push_back(Segment{span.speaker, std::vector<TokenId>(seq.token_ids.begin() + span.start,
                                                                      seq.token_ids.begin() + span.end)});
    return segments;
}

TrainingInstance instance_from(AssembledSequence seq) {
    TrainingInstance inst;
    const auto& target = seq.spans.back();
    inst.target_start = target.start;
    inst.target_end = target.end;
    inst.loss_mask.assign(seq.size(), 0);
    for (std::size_t i = target.start; i < target.end; ++i) inst.loss_mask[i - 1] = 1;
    inst.input = std::move(seq);
    return inst;
}

}  // namespace

std::vector<TokenId> TrainingInstance::next_token_targets() const {
    std::vector<TokenId> targets(input.size(), Vocabulary::kPad);
    for (std::size_t i = 0; i + 1 < input.size(); ++i) targets[i] = input.token_ids[i + 1];
    return targets;
}

std::vector<Segment> segment_conversation(const Conversation& conv, const Vocabulary& vocab) {
    std::vector<Segment> segments;
    segments.reserve(conv.turns.size());
    for (std::size_t k = 0; k < conv.turns.size(); ++k) {
        // 1-based segment index k + 1 is a bot response iff it is even.
        const Speaker speaker = (k + 1) % 2 == 0 ? Speaker::Bot : Speaker::User;
        if (conv.turns[k].speaker != speaker)
            throw ContractError("conversation '" + conv.id + "' is not normalized at turn " + std::to_string(k));
        Segment seg{speaker, vocab.encode(conv.turns[k].text)};
        if (seg.token_ids.empty()) seg.token_ids.push_back(Vocabulary::kUnk);
        seg.token_ids.push_back(Vocabulary::kEos);
        segments.push_back(std::move(seg));
    }
    return segments;
}

AssembledSequence assemble(std::span<const Segment> segments) {
    if (segments.empty()) throw ContractError("assemble: no segments");
    AssembledSequence seq;
    for (std::size_t k = 0; k < segments.size(); ++k) {
        const auto& seg = segments[k];
        const Speaker expected = k % 2 == 0 ? Speaker::User : Speaker::Bot;
        if (seg.speaker != expected)
            throw ContractError("assemble: segment " + std::to_string(k) + " breaks USER/BOT alternation");
        if (seg.token_ids.empty()) throw ContractError("assemble: empty segment " + std::to_string(k));
        const std::size_t start = seq.size();
        for (TokenId id : seg.token_ids) {
            seq.token_ids.push_back(id);
            seq.token_types.push_back(static_cast<std::uint8_t>(token_type(seg.speaker)));
            seq.positions.push_back(static_cast<std::int32_t>(seq.positions.size()));
        }
        seq.spans.push_back(SegmentSpan{start, seq.size(), seg.speaker});
    }
    return seq;
}

std::vector<std::uint8_t> types_from_spans(std::span<const SegmentSpan> spans) {
    std::vector<std::uint8_t> types;
    for (const auto& span : spans) types.insert(types.end(), span.size(), static_cast<std::uint8_t>(token_type(span.speaker)));
    return types;
}

std::vector<TrainingInstance> make_training_instances(const Conversation& conv, const Vocabulary& vocab,
                                                      std::size_t max_len) {
    const auto segments = segment_conversation(conv, vocab);
    std::vector<TrainingInstance> instances;
    for (std::size_t end = 2; end <= segments.size(); end += 2) {
        auto inst = instance_from(assemble(std::span(segments).first(end)));
        if (max_len > 0) inst = truncate_instance(inst, max_len);
        instances.push_back(std::move(inst));
    }
    return instances;
}

AssembledSequence truncate_context(const AssembledSequence& seq, std::size_t max_len) {
    if (seq.size() <= max_len) return seq;
    const std::size_t n = seq.spans.size();
    const std::size_t tail_segments = n % 2 == 0 ? 2 : 1;
    if (n < tail_segments) throw ContractError("truncate_context: malformed span list");

    std::size_t drop = 0;  // segments dropped, always even
    while (drop + tail_segments < n && seq.size() - seq.spans[drop].start > max_len) drop += 2;
    const std::size_t remaining = seq.size() - seq.spans[drop].start;
    if (remaining > max_len)
        throw ContractError("truncate_context: tail of " + std::to_string(remaining) + " tokens (segments " +
                            std::to_string(drop) + ".." + std::to_string(n - 1) + ") exceeds max_len " +
                            std::to_string(max_len));

    auto segments = split_segments(seq);
    return assemble(std::span(segments).subspan(drop));
}

TrainingInstance truncate_instance(const TrainingInstance& inst, std::size_t max_len) {
    if (inst.input.size() <= max_len) return inst;
    return instance_from(truncate_context(inst.input, max_len));
}

std::string instance_to_json(const TrainingInstance& inst) {
    nlohmann::json j;
    j["ids"] = inst.input.token_ids;
    j["types"] = inst.input.token_types;
    j["mask"] = inst.loss_mask;
    j["target"] = {inst.target_start, inst.target_end};
    return j.dump();
}

}  // namespace turnlm
