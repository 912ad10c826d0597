#include "turnlm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "json.hpp"

#include "turnlm/errors.hpp"

namespace turnlm {

namespace {

bool is_ascii_space(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

bool is_ascii_punct(unsigned char c) {
    return (c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) || (c >= 123 && c <= 126);
}

// Byte length of a multi-byte Unicode whitespace sequence starting at i, or 0.
std::size_t unicode_space_length(std::string_view s, std::size_t i) {
    auto b = [&](std::size_t k) -> unsigned char { return i + k < s.size() ? static_cast<unsigned char>(s[i + k]) : 0; };
    const unsigned char c0 = b(0);
    if (c0 == 0xC2 && (b(1) == 0x85 || b(1) == 0xA0)) return 2;  // NEL, NBSP
    if (c0 == 0xE1 && b(1) == 0x9A && b(2) == 0x80) return 3;     // U+1680
    if (c0 == 0xE2 && b(1) == 0x80) {
        const unsigned char c2 = b(2);
        if ((c2 >= 0x80 && c2 <= 0x8A) || c2 == 0xA8 || c2 == 0xA9 || c2 == 0xAF) return 3;
    }
    if (c0 == 0xE2 && b(1) == 0x81 && b(2) == 0x9F) return 3;  // U+205F
    if (c0 == 0xE3 && b(1) == 0x80 && b(2) == 0x80) return 3;  // U+3000
    return 0;
}

std::string trim(std::string_view s) {
    std::size_t begin = 0;
    std::size_t end = s.size();
    while (begin < end) {
        if (is_ascii_space(static_cast<unsigned char>(s[begin]))) {
            ++begin;
        } else if (auto n = unicode_space_length(s, begin)) {
            begin += n;
        } else {
            break;
        }
    }
    std::size_t last_non_space = begin;
    for (std::size_t i = begin; i < end;) {
        if (is_ascii_space(static_cast<unsigned char>(s[i]))) {
            ++i;
        } else if (auto n = unicode_space_length(s, i)) {
            i += n;
        } else {
            ++i;
            last_non_space = i;
        }
    }
    return std::string(s.substr(begin, last_non_space - begin));
}

}  // namespace

std::string_view to_string(Speaker s) noexcept { return s == Speaker::User ? "user" : "bot"; }

Speaker speaker_from_string(std::string_view s) {
    if (s == "user") return Speaker::User;
    if (s == "bot") return Speaker::Bot;
    throw std::invalid_argument("unknown speaker '" + std::string(s) + "'");
}

std::size_t Conversation::bot_turns() const noexcept {
    return static_cast<std::size_t>(
        std::count_if(turns.begin(), turns.end(), [](const Turn& t) { return t.speaker == Speaker::Bot; }));
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) out.push_back(std::move(current));
        current.clear();
    };
    for (std::size_t i = 0; i < text.size();) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (is_ascii_space(c)) {
            flush();
            ++i;
        } else if (auto n = unicode_space_length(text, i)) {
            flush();
            i += n;
        } else if (is_ascii_punct(c)) {
            flush();
            out.emplace_back(1, static_cast<char>(c));
            ++i;
        } else {
            current.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c));
            ++i;
        }
    }
    flush();
    return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
    tokens_ = {"<pad>", "<unk>", "<eos>"};
    tokens_.reserve(tokens.size() + kNumSpecials);
    for (auto& t : tokens) tokens_.push_back(std::move(t));
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
        if (!inserted) throw std::invalid_argument("duplicate vocabulary token '" + tokens_[i] + "'");
    }
}

Vocabulary Vocabulary::build(std::span<const Conversation> convs, int min_freq, std::size_t max_size) {
    std::map<std::string, std::size_t> freq;
    for (const auto& conv : convs)
        for (const auto& turn : conv.turns)
            for (auto& tok : tokenize(turn.text)) ++freq[std::move(tok)];

    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [tok, n] : freq)
        if (n >= static_cast<std::size_t>(std::max(min_freq, 1))) kept.emplace_back(tok, n);
    // std::map iteration is already lexicographic; stable sort keeps that as the tie-break.
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

    const std::size_t budget = max_size > kNumSpecials ? max_size - kNumSpecials : 0;
    if (kept.size() > budget) kept.resize(budget);

    std::vector<std::string> tokens;
    tokens.reserve(kept.size());
    for (auto& [tok, n] : kept) tokens.push_back(tok);
    return Vocabulary(std::move(tokens));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocabulary file " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    if (lines.size() < kNumSpecials || lines[0] != "<pad>" || lines[1] != "<unk>" || lines[2] != "<eos>")
        throw ParseError("vocabulary must start with <pad>, <unk>, <eos>");
    return Vocabulary(std::vector<std::string>(lines.begin() + kNumSpecials, lines.end()));
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write vocabulary file " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
}

TokenId Vocabulary::id_of(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.contains(std::string(token)); }

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                                std::to_string(tokens_.size()));
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& tok : tokenize(text)) ids.push_back(id_of(tok));
    return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
        const auto& tok = token(id);
        if (id == kPad || id == kEos) continue;
        if (!out.empty()) out.push_back(' ');
        out += tok;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ingestion

std::vector<Turn> normalize_turns(std::span<const Turn> raw, std::string_view conversation_id) {
    std::vector<Turn> out;
    for (const auto& turn : raw) {
        std::string text = trim(turn.text);
        if (text.empty()) continue;
        if (out.empty() && turn.speaker == Speaker::Bot) continue;
        if (!out.empty() && out.back().speaker == turn.speaker) {
            out.back().text += ' ';
            out.back().text += text;
        } else {
            out.push_back(Turn{turn.speaker, std::move(text)});
        }
    }
    if (out.empty()) throw NormalizationError(std::string(conversation_id), "no user turn");
    return out;
}

std::vector<Conversation> parse_conversations(std::string_view jsonl) {
    std::vector<Conversation> convs;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < jsonl.size()) {
        auto nl = jsonl.find('\n', pos);
        if (nl == std::string_view::npos) nl = jsonl.size();
        std::string_view line = jsonl.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (trim(line).empty()) continue;

        nlohmann::json record;
        try {
            record = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(e.what(), line_no);
        }
        if (!record.is_object() || !record.contains("id") || !record["id"].is_string() ||
            !record.contains("turns") || !record["turns"].is_array())
            throw ParseError("record needs string 'id' and array 'turns'", line_no);

        Conversation conv;
        conv.id = record["id"].get<std::string>();
        std::vector<Turn> raw;
        for (const auto& t : record["turns"]) {
            if (!t.is_object() || !t.contains("speaker") || !t["speaker"].is_string() || !t.contains("text") ||
                !t["text"].is_string())
                throw ParseError("turn needs string 'speaker' and 'text'", line_no);
            try {
                raw.push_back(Turn{speaker_from_string(t["speaker"].get<std::string>()), t["text"].get<std::string>()});
            } catch (const std::invalid_argument& e) {
                throw ParseError(e.what(), line_no);
            }
        }
        conv.turns = normalize_turns(raw, conv.id);
        convs.push_back(std::move(conv));
    }
    return convs;
}

std::vector<Conversation> load_conversations(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open conversation file " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_conversations(buf.str());
}

void save_conversations(const std::filesystem::path& path, std::span<const Conversation> convs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write conversation file " + path.string());
    for (const auto& conv : convs) {
        nlohmann::json turns = nlohmann::json::array();
        for (const auto& t : conv.turns) turns.push_back({{"speaker", to_string(t.speaker)}, {"text", t.text}});
        out << nlohmann::json{{"id", conv.id}, {"turns", turns}}.dump() << '\n';
    }
}

DatasetSplit split_dataset(std::span<const Conversation> convs, std::uint64_t seed) {
    const std::size_t n = convs.size();
    if (n < 10) throw ContractError("split needs at least 10 conversations, got " + std::to_string(n));

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t n_train = n * 7 / 10;
    const std::size_t n_val = n / 10;
    DatasetSplit split;
    split.seed = seed;
    for (std::size_t k = 0; k < n; ++k) {
        const auto& conv = convs[order[k]];
        if (k < n_train)
            split.train.push_back(conv);
        else if (k < n_train + n_val)
            split.validation.push_back(conv);
        else
            split.test.push_back(conv);
    }
    return split;
}

}  // namespace turnlm
