#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace turnlm {

enum class Speaker : std::uint8_t { User = 0, Bot = 1 };

/// Token type carried by every token of a turn from this speaker.
constexpr int token_type(Speaker s) noexcept { return s == Speaker::User ? 0 : 1; }

std::string_view to_string(Speaker s) noexcept;
Speaker speaker_from_string(std::string_view s);

struct Turn {
    Speaker speaker = Speaker::User;
    std::string text;

    bool operator==(const Turn&) const = default;
};

struct Conversation {
    std::string id;
    std::vector<Turn> turns;

    std::size_t bot_turns() const noexcept;
    bool operator==(const Conversation&) const = default;
};

using TokenId = std::int32_t;

/// Lowercase ASCII, split on (Unicode) whitespace, isolate ASCII punctuation.
std::vector<std::string> tokenize(std::string_view text);

/// Word-level vocabulary. Ids 0..2 are reserved for <pad>, <unk>, <eos>.
class Vocabulary {
public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kUnk = 1;
    static constexpr TokenId kEos = 2;
    static constexpr std::size_t kNumSpecials = 3;

    Vocabulary();
    /// `tokens` excludes the specials; must be unique.
    explicit Vocabulary(std::vector<std::string> tokens);

    /// Tokens with frequency >= min_freq, most frequent first, ties
    /// lexicographic, capped so that size() <= max(max_size, 3).
    static Vocabulary build(std::span<const Conversation> convs, int min_freq, std::size_t max_size);

    static Vocabulary load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    std::size_t size() const noexcept { return tokens_.size(); }
    TokenId id_of(std::string_view token) const;
    bool contains(std::string_view token) const;
    const std::string& token(TokenId id) const;
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }

    std::vector<TokenId> encode(std::string_view text) const;
    /// Throws std::out_of_range for ids outside [0, size()).
    std::string decode(std::span<const TokenId> ids) const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

/// Drops empty turns and leading bot turns, merges consecutive
/// same-speaker turns with a single space. Throws NormalizationError when
/// no user turn remains.
std::vector<Turn> normalize_turns(std::span<const Turn> raw, std::string_view conversation_id = "");

/// Reads one JSON record per line: {"id": ..., "turns": [{"speaker", "text"}]}.
std::vector<Conversation> load_conversations(const std::filesystem::path& path);
std::vector<Conversation> parse_conversations(std::string_view jsonl);
void save_conversations(const std::filesystem::path& path, std::span<const Conversation> convs);

struct DatasetSplit {
    std::vector<Conversation> train;
    std::vector<Conversation> validation;
    std::vector<Conversation> test;
    std::uint64_t seed = 0;
};

/// Seeded shuffle, then floor(0.7n) train, floor(0.1n) validation, the
/// remainder test. Requires n >= 10.
DatasetSplit split_dataset(std::span<const Conversation> convs, std::uint64_t seed);

}  // namespace turnlm
