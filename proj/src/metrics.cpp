#include "turnlm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

#include "turnlm/corpus.hpp"
#include "turnlm/errors.hpp"

namespace turnlm {

namespace {

using NGram = std::vector<std::string>;

std::map<NGram, std::size_t> ngram_counts(const Tokens& tokens, int n) {
    std::map<NGram, std::size_t> counts;
    const auto order = static_cast<std::size_t>(n);
    for (std::size_t i = 0; i + order <= tokens.size(); ++i)
        ++counts[NGram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                       tokens.begin() + static_cast<std::ptrdiff_t>(i + order))];
    return counts;
}

std::size_t ngram_total(const Tokens& tokens, int n) {
    const auto order = static_cast<std::size_t>(n);
    return tokens.size() >= order ? tokens.size() - order + 1 : 0;
}

std::size_t clipped_overlap(const std::map<NGram, std::size_t>& hyp, const std::map<NGram, std::size_t>& ref) {
    std::size_t overlap = 0;
    for (const auto& [gram, count] : hyp)
        if (auto it = ref.find(gram); it != ref.end()) overlap += std::min(count, it->second);
    return overlap;
}

double f1(double precision, double recall) {
    return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

void check_pairs(std::span<const EvalPair> pairs, const char* who) {
    if (pairs.empty()) throw ContractError(std::string(who) + ": no pairs");
    for (const auto& p : pairs)
        if (p.reference.empty()) throw ContractError(std::string(who) + ": empty reference");
}

void check_order(int n, const char* who) {
    if (n < 1) throw ContractError(std::string(who) + ": n-gram order must be positive");
}

}  // namespace

EvalPair make_eval_pair(const std::string& hypothesis, const std::string& reference) {
    EvalPair p{tokenize(hypothesis), tokenize(reference)};
    if (p.reference.empty()) throw ContractError("evaluation reference is empty");
    return p;
}

std::vector<EvalPair> parse_eval_pairs(std::string_view jsonl) {
    std::vector<EvalPair> pairs;
    std::size_t line_no = 0;
    std::istringstream in{std::string(jsonl)};
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto record = nlohmann::json::parse(line);
            pairs.push_back(make_eval_pair(record.at("hyp").get<std::string>(), record.at("ref").get<std::string>()));
        } catch (const std::exception& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return pairs;
}

std::vector<EvalPair> load_eval_pairs(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open evaluation file " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_eval_pairs(buf.str());
}

double bleu(std::span<const EvalPair> pairs, int max_n) {
    check_pairs(pairs, "bleu");
    check_order(max_n, "bleu");
    std::size_t hyp_len = 0;
    std::size_t ref_len = 0;
    for (const auto& p : pairs) {
        hyp_len += p.hypothesis.size();
        ref_len += p.reference.size();
    }
    if (hyp_len == 0) return 0.0;

    double log_sum = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        std::size_t matched = 0;
        std::size_t total = 0;
        for (const auto& p : pairs) {
            matched += clipped_overlap(ngram_counts(p.hypothesis, n), ngram_counts(p.reference, n));
            total += ngram_total(p.hypothesis, n);
        }
        if (matched == 0 || total == 0) return 0.0;
        log_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
    }
    const double brevity =
        std::exp(std::min(0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)));
    return brevity * std::exp(log_sum / max_n);
}

double rouge_n(std::span<const EvalPair> pairs, int n) {
    check_pairs(pairs, "rouge_n");
    check_order(n, "rouge_n");
    double sum = 0.0;
    for (const auto& p : pairs) {
        const std::size_t hyp_total = ngram_total(p.hypothesis, n);
        const std::size_t ref_total = ngram_total(p.reference, n);
        if (hyp_total == 0 || ref_total == 0) continue;
        const auto overlap =
            static_cast<double>(clipped_overlap(ngram_counts(p.hypothesis, n), ngram_counts(p.reference, n)));
        sum += f1(overlap / static_cast<double>(hyp_total), overlap / static_cast<double>(ref_total));
    }
    return sum / static_cast<double>(pairs.size());
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
    std::vector<std::size_t> prev(b.size() + 1, 0);
    std::vector<std::size_t> cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l(std::span<const EvalPair> pairs) {
    check_pairs(pairs, "rouge_l");
    double sum = 0.0;
    for (const auto& p : pairs) {
        if (p.hypothesis.empty()) continue;
        const auto lcs = static_cast<double>(lcs_length(p.hypothesis, p.reference));
        sum += f1(lcs / static_cast<double>(p.hypothesis.size()), lcs / static_cast<double>(p.reference.size()));
    }
    return sum / static_cast<double>(pairs.size());
}

double distinct_n(std::span<const Tokens> hypotheses, int n) {
    check_order(n, "distinct_n");
    std::set<NGram> unique;
    std::size_t total = 0;
    for (const auto& h : hypotheses) {
        for (auto& [gram, count] : ngram_counts(h, n)) unique.insert(gram);
        total += ngram_total(h, n);
    }
    if (total == 0) throw ContractError("distinct_n: hypotheses contain no n-gram of order " + std::to_string(n));
    return static_cast<double>(unique.size()) / static_cast<double>(total);
}

double meteor_lite(std::span<const EvalPair> pairs) {
    check_pairs(pairs, "meteor_lite");
    double sum = 0.0;
    for (const auto& p : pairs) {
        const auto& hyp = p.hypothesis;
        const auto& ref = p.reference;
        std::vector<bool> used(ref.size(), false);
        std::size_t matches = 0;
        std::size_t chunks = 0;
        std::ptrdiff_t prev_ref = -2;
        bool prev_matched = false;
        for (const auto& tok : hyp) {
            std::ptrdiff_t hit = -1;
            for (std::size_t j = 0; j < ref.size(); ++j) {
                if (!used[j] && ref[j] == tok) {
                    hit = static_cast<std::ptrdiff_t>(j);
                    break;
                }
            }
            if (hit < 0) {
                prev_matched = false;
                continue;
            }
            used[static_cast<std::size_t>(hit)] = true;
            ++matches;
            if (!(prev_matched && hit == prev_ref + 1)) ++chunks;
            prev_ref = hit;
            prev_matched = true;
        }
        if (matches == 0) continue;
        const double m = static_cast<double>(matches);
        const double precision = m / static_cast<double>(hyp.size());
        const double recall = m / static_cast<double>(ref.size());
        const double f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);
        const double penalty = 0.5 * std::pow(static_cast<double>(chunks) / m, 3.0);
        sum += f_mean * (1.0 - penalty);
    }
    return sum / static_cast<double>(pairs.size());
}

std::string MetricReport::to_json(double scale) const {
    return nlohmann::json{{"bleu1", bleu1 * scale},         {"bleu2", bleu2 * scale},
                          {"rouge2", rouge2 * scale},       {"rougeL", rougeL * scale},
                          {"distinct1", distinct1 * scale}, {"distinct2", distinct2 * scale},
                          {"meteor_lite", meteor_lite * scale}, {"pairs", pairs}}
        .dump();
}

MetricReport evaluate_metrics(std::span<const EvalPair> pairs) {
    MetricReport r;
    r.pairs = pairs.size();
    r.bleu1 = bleu(pairs, 1);
    r.bleu2 = bleu(pairs, 2);
    r.rouge2 = rouge_n(pairs, 2);
    r.rougeL = rouge_l(pairs);
    r.meteor_lite = meteor_lite(pairs);
    std::vector<Tokens> hyps;
    hyps.reserve(pairs.size());
    for (const auto& p : pairs) hyps.push_back(p.hypothesis);
    auto safe_distinct = [&](int n) {
        std::size_t total = 0;
        for (const auto& h : hyps) total += ngram_total(h, n);
        return total == 0 ? 0.0 : distinct_n(hyps, n);
    };
    r.distinct1 = safe_distinct(1);
    r.distinct2 = safe_distinct(2);
    return r;
}

}  // namespace turnlm
