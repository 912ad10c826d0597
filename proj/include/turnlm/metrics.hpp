#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace turnlm {

using Tokens = std::vector<std::string>;

struct EvalPair {
    Tokens hypothesis;
    Tokens reference;
};

/// Tokenizes both sides with the corpus tokenizer.
EvalPair make_eval_pair(const std::string& hypothesis, const std::string& reference);

/// One {"hyp": ..., "ref": ...} record per line. ParseError carries the line.
std::vector<EvalPair> parse_eval_pairs(std::string_view jsonl);
std::vector<EvalPair> load_eval_pairs(const std::filesystem::path& path);

/// Corpus BLEU: clipped n-gram counts pooled over all pairs for orders
/// 1..max_n, geometric mean of precisions, brevity penalty
/// exp(min(0, 1 - ref_len / hyp_len)) on total lengths. Any zero precision
/// gives 0.
double bleu(std::span<const EvalPair> pairs, int max_n);

/// Mean over pairs of the clipped n-gram overlap F1. A pair scores 0 when
/// either side has no n-gram of that order.
double rouge_n(std::span<const EvalPair> pairs, int n = 2);

/// Mean over pairs of the LCS-based F1.
double rouge_l(std::span<const EvalPair> pairs);

/// Unique n-grams over total n-grams, pooled over all hypotheses.
/// ContractError when there is no n-gram at all.
double distinct_n(std::span<const Tokens> hypotheses, int n);

/// Exact-match METEOR variant without stemming or synonyms: greedy
/// left-to-right alignment, F_mean = 10PR / (R + 9P), fragmentation
/// penalty 0.5 (chunks / matches)^3. Not comparable to published METEOR.
double meteor_lite(std::span<const EvalPair> pairs);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

struct MetricReport {
    double bleu1 = 0.0;
    double bleu2 = 0.0;
    double rouge2 = 0.0;
    double rougeL = 0.0;
    double distinct1 = 0.0;
    double distinct2 = 0.0;
    double meteor_lite = 0.0;
    std::size_t pairs = 0;

    /// Scores multiplied by `scale` (1 or 100); pair count unchanged.
    std::string to_json(double scale = 1.0) const;
};

/// All seven scores. Distinct-n is reported as 0 when the hypotheses hold
/// no n-gram of that order.
MetricReport evaluate_metrics(std::span<const EvalPair> pairs);

}  // namespace turnlm
