#include "turnlm/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "turnlm/errors.hpp"
#include "turnlm/keyvalue.hpp"

namespace turnlm {

namespace {

bool banned(TokenId id) { return id == Vocabulary::kPad || id == Vocabulary::kUnk; }

}  // namespace

DecodeConfig decode_config_from(const KeyValueConfig& kv, DecodeConfig c) {
    const auto mode = kv.get_string("decode.mode", c.mode == DecodeMode::Greedy ? "greedy" : "sample");
    if (mode == "greedy")
        c.mode = DecodeMode::Greedy;
    else if (mode == "sample")
        c.mode = DecodeMode::Sample;
    else
        throw ParseError("decode.mode must be greedy or sample, got " + mode);
    c.temperature = kv.get_double("decode.temperature", c.temperature);
    c.top_k = static_cast<std::size_t>(kv.get_int("decode.top_k", static_cast<long long>(c.top_k)));
    c.max_new_tokens =
        static_cast<std::size_t>(kv.get_int("decode.max_new_tokens", static_cast<long long>(c.max_new_tokens)));
    c.seed = static_cast<std::uint64_t>(kv.get_int("decode.seed", static_cast<long long>(c.seed)));
    if (c.mode == DecodeMode::Sample && !(c.temperature > 0.0))
        throw ContractError("decode.temperature must be positive for sampling");
    return c;
}

TokenId step_logits_to_token(const Vector& logits, DecodeMode mode, double temperature, std::size_t top_k,
                             std::mt19937_64& rng) {
    std::vector<TokenId> candidates;
    for (Eigen::Index i = 0; i < logits.size(); ++i)
        if (!banned(static_cast<TokenId>(i))) candidates.push_back(static_cast<TokenId>(i));
    if (candidates.empty()) throw ContractError("step_logits_to_token: no selectable token");

    // Highest logit first, lowest id among ties.
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](TokenId a, TokenId b) { return logits(a) > logits(b); });
    if (mode == DecodeMode::Greedy || top_k == 1) return candidates.front();

    if (!(temperature > 0.0)) throw ContractError("step_logits_to_token: temperature must be positive");
    if (top_k > 0 && top_k < candidates.size()) candidates.resize(top_k);
    const double peak = logits(candidates.front());
    std::vector<double> weights;
    weights.reserve(candidates.size());
    for (TokenId id : candidates) weights.push_back(std::exp((logits(id) - peak) / temperature));
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    return candidates[pick(rng)];
}

namespace {

AssembledSequence build_prompt(const ModelParameters& params, const Vocabulary& vocab, const Conversation& context,
                               std::size_t max_new_tokens) {
    const auto segments = segment_conversation(context, vocab);
    if (segments.empty() || segments.back().speaker != Speaker::User)
        throw ContractError("generation context must end with a user turn");
    AssembledSequence seq = assemble(segments);
    const std::size_t capacity = params.config.max_positions;
    const std::size_t user_len = segments.back().token_ids.size();
    if (user_len >= capacity)
        throw CapacityError("utterance of " + std::to_string(user_len) + " tokens leaves no room in " +
                            std::to_string(capacity) + " positions");
    std::size_t budget = capacity > max_new_tokens ? capacity - max_new_tokens : 0;
    budget = std::min(std::max(budget, user_len), capacity - 1);
    return truncate_context(seq, budget);
}

}  // namespace

Reply generate_from_context(const ModelParameters& params, const Vocabulary& vocab, const Conversation& context,
                            const DecodeConfig& config, std::mt19937_64& rng) {
    Reply reply;
    reply.prompt = build_prompt(params, vocab, context, config.max_new_tokens);
    std::vector<TokenId> ids = reply.prompt.token_ids;
    std::vector<std::uint8_t> types = reply.prompt.token_types;
    std::vector<std::int32_t> positions = reply.prompt.positions;
    const std::size_t capacity = params.config.max_positions;

    for (std::size_t t = 0; t < config.max_new_tokens && ids.size() < capacity; ++t) {
        const Matrix logits = forward(params, ids, types, positions);
        const Vector last = logits.row(logits.rows() - 1).transpose();
        const TokenId next = step_logits_to_token(last, config.mode, config.temperature, config.top_k, rng);
        if (next == Vocabulary::kEos) break;
        reply.ids.push_back(next);
        ids.push_back(next);
        types.push_back(1);
        positions.push_back(static_cast<std::int32_t>(positions.size()));
    }
    reply.text = vocab.decode(reply.ids);
    return reply;
}

ChatSession::ChatSession(std::shared_ptr<const ModelParameters> params, std::shared_ptr<const Vocabulary> vocab,
                         DecodeConfig config)
    : params_(std::move(params)), vocab_(std::move(vocab)), config_(config), rng_(config.seed) {
    if (!params_ || !vocab_) throw ContractError("ChatSession needs parameters and a vocabulary");
    if (vocab_->size() != params_->config.vocab_size)
        throw ContractError("vocabulary size " + std::to_string(vocab_->size()) + " differs from model vocab_size " +
                            std::to_string(params_->config.vocab_size));
    history_.id = "session";
}

AssembledSequence ChatSession::context_view() const {
    if (history_.turns.empty()) return {};
    const auto segments = segment_conversation(history_, *vocab_);
    return assemble(segments);
}

Reply ChatSession::generate_reply(std::string_view user_text) {
    if (tokenize(user_text).empty()) throw ContractError("empty utterance");
    Conversation pending = history_;
    // Not normalized: an empty bot reply stays in the history as its own turn.
    pending.turns.push_back(Turn{Speaker::User, std::string(user_text)});
    Reply reply = generate_from_context(*params_, *vocab_, pending, config_, rng_);
    history_.turns = std::move(pending.turns);
    history_.turns.push_back(Turn{Speaker::Bot, reply.text});
    return reply;
}

void ChatSession::reset() {
    history_.turns.clear();
    rng_.seed(config_.seed);
}

}  // namespace turnlm
